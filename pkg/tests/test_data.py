import json
import warnings

import numpy as np
import pytest

from fasa.data import (
    FEATURE_HEADER, ManifestEntry, SceneSpec, generate_dataset, generate_scene, load_split, read_features,
    read_manifest, read_masks, read_pgm, write_features, write_manifest, write_masks, write_pgm,
)
from fasa.errors import InputError, ParseError
from fasa.slots import kmeans


# --- generator ----------------------------------------------------------------


def test_same_seed_bit_identical():
    a, b = generate_scene(SceneSpec(), 11), generate_scene(SceneSpec(), 11)
    assert a.features.tobytes() == b.features.tobytes()
    assert np.array_equal(a.instance_masks, b.instance_masks)
    assert not np.array_equal(a.features, generate_scene(SceneSpec(), 12).features)


@pytest.mark.parametrize("seed", range(10))
def test_masks_partition_grid(seed):
    rec = generate_scene(SceneSpec(), seed)
    assert 1 <= len(rec.instance_masks) <= 4
    counts = rec.instance_masks.sum(axis=0)
    assert counts.max() <= 1
    assert np.array_equal(rec.fg, counts == 1)
    assert np.array_equal(rec.labels() > 0, rec.fg)


@pytest.mark.parametrize("seed", range(5))
def test_noiseless_kmeans_recovers_partition(seed):
    rec = generate_scene(SceneSpec(sigma=0.0), seed)
    labels = rec.labels()
    k = len(rec.instance_masks) + 1
    np.testing.assert_array_equal(rec.features, rec.prototypes[labels])
    res = kmeans(rec.features, k, seed=seed, n_init=5)
    # one-to-one map between clusters and ground-truth labels
    pairs = set(zip(res.labels.tolist(), labels.tolist()))
    assert len(pairs) == k


def test_separability_ratio():
    spec = SceneSpec()
    rec = generate_scene(spec, 3)
    p = rec.prototypes
    d = np.linalg.norm(p[:, None] - p[None], axis=-1)[np.triu_indices(len(p), 1)]
    resid = rec.features - p[rec.labels()]
    assert d.min() / resid.std() >= spec.separation / spec.sigma * 0.95
    assert d.min() / spec.sigma >= 12.0


def test_prototype_fallback_above_dimension():
    rec = generate_scene(SceneSpec(dim=3, objects_min=4, objects_max=4, grid=(16, 16)), 0)
    p = rec.prototypes
    d = np.linalg.norm(p[:, None] - p[None], axis=-1)[np.triu_indices(len(p), 1)]
    assert len(p) == 5 and d.min() >= 6.0
    np.testing.assert_allclose(np.linalg.norm(p, axis=1), 6.0)


def test_overfull_scene_warns_and_reduces():
    spec = SceneSpec(grid=(6, 6), objects_min=4, objects_max=4, size_min=3, size_max=3)
    with pytest.warns(UserWarning, match="placed"):
        rec = generate_scene(spec, 0)
    assert len(rec.instance_masks) < 4


def test_scene_spec_validation():
    with pytest.raises(InputError):
        SceneSpec(objects_min=3, objects_max=2)
    with pytest.raises(InputError):
        SceneSpec(shapes="stars")
    with pytest.raises(InputError):
        SceneSpec(sigma=-1.0)


# --- feature files --------------------------------------------------------------


def test_feature_round_trip(tmp_path):
    x = np.random.default_rng(0).standard_normal((256, 64)).astype(np.float32)
    p = tmp_path / "a.feat"
    write_features(p, x, (16, 16))
    assert p.stat().st_size == 22 + 65536 == FEATURE_HEADER.size + 256 * 64 * 4
    y, grid = read_features(p)
    assert grid == (16, 16) and y.dtype == np.float64
    assert y.astype(np.float32).tobytes() == x.tobytes()


def test_feature_truncated(tmp_path):
    p = tmp_path / "a.feat"
    write_features(p, np.ones((4, 3)), (2, 2))
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(ParseError, match="expected 70 bytes.*got 65") as err:
        read_features(p)
    assert err.value.offset == 65


def test_feature_bad_magic_and_version(tmp_path):
    p = tmp_path / "a.feat"
    write_features(p, np.ones((4, 3)), (2, 2))
    buf = bytearray(p.read_bytes())
    p.write_bytes(b"XXXXFEAT" + bytes(buf[8:]))
    with pytest.raises(ParseError) as err:
        read_features(p)
    assert err.value.offset == 0
    buf[8] = 9
    p.write_bytes(bytes(buf))
    with pytest.raises(ParseError, match="version") as err:
        read_features(p)
    assert err.value.offset == 8
    p.write_bytes(b"FASA")
    with pytest.raises(ParseError, match="header"):
        read_features(p)


def test_feature_write_rejects(tmp_path):
    with pytest.raises(InputError):
        write_features(tmp_path / "a", np.ones((5, 3)), (2, 2))
    with pytest.raises(InputError):
        write_features(tmp_path / "a", np.array([[np.nan]]), (1, 1))


# --- masks ------------------------------------------------------------------------


def test_pgm_round_trip(tmp_path):
    m = np.random.default_rng(1).random(12) > 0.5
    write_pgm(tmp_path / "m.pgm", m, (3, 4))
    out = read_pgm(tmp_path / "m.pgm")
    assert out.shape == (3, 4) and np.array_equal(out.reshape(-1), m)


def test_pgm_header_comment(tmp_path):
    (tmp_path / "m.pgm").write_bytes(b"P5\n# note\n2 1\n255\n\xff\x00")
    assert read_pgm(tmp_path / "m.pgm").tolist() == [[True, False]]


def test_pgm_non_binary_pixel(tmp_path):
    (tmp_path / "m.pgm").write_bytes(b"P5\n2 1\n255\n\xff\x07")
    with pytest.raises(ParseError, match="non-binary pixel value 7") as err:
        read_pgm(tmp_path / "m.pgm")
    assert err.value.offset == 12


def test_pgm_wrong_magic(tmp_path):
    (tmp_path / "m.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(ParseError):
        read_pgm(tmp_path / "m.pgm")


def test_mask_stack_round_trip_with_empty(tmp_path):
    masks = np.zeros((3, 6), bool)
    masks[0, :2] = True
    masks[2, 3:] = True
    side = write_masks(tmp_path / "s", masks, (2, 3), [4, 5, 6], [1, 2, 1], extra={"note": "x"})
    meta = json.loads(side.read_text())
    assert meta["count"] == 3 == len(list(tmp_path.glob("s_*.pgm")))
    assert [e["empty"] for e in meta["masks"]] == [False, True, False]
    st = read_masks(tmp_path / "s")
    assert np.array_equal(st.masks, masks) and st.grid == (2, 3)
    assert st.instance_ids == [4, 5, 6] and st.class_ids == [1, 2, 1] and st.extra == {"note": "x"}


def test_mask_sidecar_count_mismatch(tmp_path):
    side = write_masks(tmp_path / "s", np.ones((1, 4), bool), (2, 2))
    meta = json.loads(side.read_text())
    meta["count"] = 2
    side.write_text(json.dumps(meta))
    with pytest.raises(ParseError, match="count"):
        read_masks(tmp_path / "s")


# --- manifests and datasets -------------------------------------------------------


def test_dataset_layout_and_determinism(tmp_path):
    spec = SceneSpec(grid=(8, 8), dim=8, objects_min=1, objects_max=2, size_min=2, size_max=3)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = generate_dataset(tmp_path / "a", 10, spec, seed=3)
        b = generate_dataset(tmp_path / "b", 10, spec, seed=3)
    assert set(a) == {"train", "val"}
    ta, tb = read_manifest(a["train"]), read_manifest(b["train"])
    assert len(ta.samples) == 8 and len(read_manifest(a["val"]).samples) == 2
    assert ta.generator["seed"] == 3 and ta.grid == (8, 8)
    for e in ta.samples:
        assert ta.feature_file(e).read_bytes() == tb.feature_file(e).read_bytes()
    split = load_split(ta)
    assert split.features.shape == (8, 64, 8)
    assert [len(g.masks) for g in split.gt] == [e.num_instances for e in ta.samples]


def test_manifest_missing_file(tmp_path):
    e = ManifestEntry("s0", "features/s0.feat", "masks/s0", 1, (2, 2))
    write_manifest(tmp_path / "m.json", "train", [e], {})
    with pytest.raises(ParseError, match="missing feature file"):
        read_manifest(tmp_path / "m.json")
    assert len(read_manifest(tmp_path / "m.json", check_files=False).samples) == 1


def test_manifest_mixed_grids(tmp_path):
    es = [ManifestEntry("a", "a", "a", 1, (2, 2)), ManifestEntry("b", "b", "b", 1, (3, 3))]
    write_manifest(tmp_path / "m.json", "train", es, {})
    with pytest.raises(ParseError, match="mixed grid"):
        read_manifest(tmp_path / "m.json", check_files=False)


def test_load_split_grid_mismatch(tmp_path):
    (tmp_path / "f").mkdir()
    write_features(tmp_path / "f" / "a.feat", np.ones((4, 2)), (2, 2))
    write_masks(tmp_path / "m" / "a", np.ones((1, 9), bool), (3, 3))
    write_manifest(tmp_path / "m.json", "train", [ManifestEntry("a", "f/a.feat", "m/a", 1, (3, 3))], {})
    with pytest.raises(ParseError, match="grid"):
        load_split(read_manifest(tmp_path / "m.json"))
