"""Synthetic scenes, the binary feature format, PGM mask stacks and dataset manifests."""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import InputError, ParseError

FEATURE_MAGIC = b"FASAFEAT"
FEATURE_VERSION = 1
FEATURE_HEADER = struct.Struct("<8sHIII")   # 22 bytes

SHAPE_CLASSES = {"rect": 1, "blob": 2}


@dataclass
class SceneSpec:
    grid: tuple[int, int] = (16, 16)
    dim: int = 64
    objects_min: int = 1
    objects_max: int = 4
    shapes: str = "mixed"          # rects | blobs | mixed
    separation: float = 6.0
    sigma: float = 0.5
    size_min: int = 3
    size_max: int = 6

    def __post_init__(self) -> None:
        self.grid = (int(self.grid[0]), int(self.grid[1]))
        if self.objects_min < 0 or self.objects_max < self.objects_min:
            raise InputError(f"bad object count range {self.objects_min}..{self.objects_max}")
        if self.shapes not in ("rects", "blobs", "mixed"):
            raise InputError(f"unknown shape family {self.shapes!r}")
        if self.sigma < 0 or self.separation <= 0:
            raise InputError("sigma must be >= 0 and separation > 0")
        if min(self.grid) < 2 or self.dim < 1:
            raise InputError("grid must be at least 2x2 and dim positive")


@dataclass
class SceneRecord:
    features: np.ndarray           # (N, D)
    instance_masks: np.ndarray     # (I, N) bool
    class_ids: np.ndarray          # (I,)
    grid: tuple[int, int]
    seed: int | None = None
    prototypes: np.ndarray | None = field(default=None, repr=False)

    @property
    def fg(self) -> np.ndarray:
        if len(self.instance_masks) == 0:
            return np.zeros(self.features.shape[0], dtype=bool)
        return self.instance_masks.any(axis=0)

    @property
    def instance_ids(self) -> np.ndarray:
        return np.arange(1, len(self.instance_masks) + 1)

    def labels(self) -> np.ndarray:
        out = np.zeros(self.features.shape[0], dtype=np.int64)
        for i, m in enumerate(self.instance_masks):
            out[m] = i + 1
        return out


def _prototypes(rng: np.random.Generator, count: int, dim: int, radius: float) -> np.ndarray:
    """Mutually orthogonal points on a sphere of ``radius`` (pairwise distance radius * sqrt 2).

    Falls back to rejection sampling for pairwise distance >= ``radius`` when
    there are more prototypes than dimensions.
    """
    if count <= dim:
        q, _ = np.linalg.qr(rng.standard_normal((dim, count)))
        return radius * q.T
    for _ in range(1000):
        p = rng.standard_normal((count, dim))
        p *= radius / np.linalg.norm(p, axis=1, keepdims=True)
        d = np.linalg.norm(p[:, None] - p[None], axis=-1)
        if d[np.triu_indices(count, 1)].min() >= radius:
            return p
    raise InputError(f"could not place {count} prototypes {radius} apart in {dim} dimensions")


def _shape_mask(rng: np.random.Generator, kind: str, spec: SceneSpec) -> np.ndarray:
    h = int(rng.integers(spec.size_min, spec.size_max + 1))
    w = int(rng.integers(spec.size_min, spec.size_max + 1))
    if kind == "rect":
        return np.ones((h, w), dtype=bool)
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    m = ((yy - cy) / (h / 2.0)) ** 2 + ((xx - cx) / (w / 2.0)) ** 2 <= 1.0
    return m


def _corners_hit(mask: np.ndarray) -> int:
    return int(mask[0, 0]) + int(mask[0, -1]) + int(mask[-1, 0]) + int(mask[-1, -1])


def generate_scene(spec: SceneSpec, seed: int) -> SceneRecord:
    """Sample a scene of well-separated prototype clusters.

    Objects are disjoint, never touch (not even diagonally) and together
    cover at most one image corner.  Patch features are their prototype plus
    isotropic Gaussian noise.
    """
    rng = np.random.default_rng(seed)
    hgt, wid = spec.grid
    want = int(rng.integers(spec.objects_min, spec.objects_max + 1))
    occupied = np.zeros(spec.grid, dtype=bool)
    shapes: list[np.ndarray] = []
    kinds: list[str] = []
    for _ in range(want):
        if spec.shapes == "mixed":
            kind = "rect" if rng.random() < 0.5 else "blob"
        else:
            kind = spec.shapes[:-1]
        placed = False
        for _attempt in range(100):
            m = _shape_mask(rng, kind, spec)
            if m.shape[0] > hgt or m.shape[1] > wid:
                continue
            y = int(rng.integers(0, hgt - m.shape[0] + 1))
            x = int(rng.integers(0, wid - m.shape[1] + 1))
            full = np.zeros(spec.grid, dtype=bool)
            full[y:y + m.shape[0], x:x + m.shape[1]] = m
            halo = ndimage.binary_dilation(full, structure=np.ones((3, 3), dtype=bool))
            if (halo & occupied).any() or _corners_hit(occupied | full) > 1:
                continue
            occupied |= full
            shapes.append(full.reshape(-1))
            kinds.append(kind)
            placed = True
            break
        if not placed:
            warnings.warn(f"scene seed {seed}: placed {len(shapes)} of {want} objects", stacklevel=2)
            break
    k = len(shapes)
    protos = _prototypes(rng, k + 1, spec.dim, spec.separation)
    labels = np.zeros(hgt * wid, dtype=np.int64)
    for i, m in enumerate(shapes):
        labels[m] = i + 1
    feats = protos[labels] + spec.sigma * rng.standard_normal((hgt * wid, spec.dim))
    masks = np.array(shapes, dtype=bool).reshape(k, hgt * wid)
    classes = np.array([SHAPE_CLASSES[c] for c in kinds], dtype=np.int64)
    return SceneRecord(feats, masks, classes, spec.grid, seed, protos)


# --- feature files ------------------------------------------------------------


def write_features(path, features: np.ndarray, grid: tuple[int, int]) -> None:
    x = np.asarray(features)
    h, w = grid
    if x.ndim != 2 or x.shape[0] != h * w:
        raise InputError(f"features {x.shape} do not fit grid {grid}")
    if not np.isfinite(x).all():
        raise InputError("refusing to write non-finite features")
    header = FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, h, w, x.shape[1])
    Path(path).write_bytes(header + np.ascontiguousarray(x, dtype="<f4").tobytes())


def read_features(path) -> tuple[np.ndarray, tuple[int, int]]:
    """Return ``(features as float64 (N, D), (H, W))``."""
    buf = Path(path).read_bytes()
    if len(buf) < FEATURE_HEADER.size:
        raise ParseError(f"{path}: expected {FEATURE_HEADER.size}-byte header, file has {len(buf)} bytes",
                         offset=len(buf))
    magic, version, h, w, d = FEATURE_HEADER.unpack_from(buf, 0)
    if magic != FEATURE_MAGIC:
        raise ParseError(f"{path}: bad magic {magic!r}", offset=0)
    if version != FEATURE_VERSION:
        raise ParseError(f"{path}: unsupported version {version}", offset=8)
    expected = FEATURE_HEADER.size + 4 * h * w * d
    if len(buf) != expected:
        raise ParseError(f"{path}: expected {expected} bytes for {h}x{w}x{d} features, got {len(buf)}",
                         offset=min(len(buf), expected))
    x = np.frombuffer(buf, dtype="<f4", offset=FEATURE_HEADER.size).reshape(h * w, d)
    return x.astype(np.float64), (h, w)


# --- PGM masks ----------------------------------------------------------------


def write_pgm(path, mask: np.ndarray, grid: tuple[int, int]) -> None:
    h, w = grid
    img = np.where(np.asarray(mask, dtype=bool).reshape(h, w), 255, 0).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def _pgm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError("truncated PGM header", offset=pos)
        tokens.append(buf[start:pos])
    return tokens, pos + 1


def read_pgm(path) -> np.ndarray:
    """Binary mask from a P5 PGM holding only 0 and 255."""
    buf = Path(path).read_bytes()
    tokens, pos = _pgm_tokens(buf, 4)
    if tokens[0] != b"P5":
        raise ParseError(f"{path}: not a binary PGM (magic {tokens[0]!r})", offset=0)
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ParseError(f"{path}: expected maxval 255, got {maxval}")
    data = buf[pos:]
    if len(data) != w * h:
        raise ParseError(f"{path}: expected {w * h} pixel bytes, got {len(data)}", offset=pos)
    img = np.frombuffer(data, dtype=np.uint8).reshape(h, w)
    bad = np.flatnonzero((img != 0) & (img != 255))
    if bad.size:
        raise ParseError(f"{path}: non-binary pixel value {int(img.reshape(-1)[bad[0]])}", offset=pos + int(bad[0]))
    return img == 255


@dataclass
class MaskStack:
    masks: np.ndarray          # (M, N) bool
    grid: tuple[int, int]
    instance_ids: list[int]
    class_ids: list[int]
    extra: dict = field(default_factory=dict)


def write_masks(stem, masks: np.ndarray, grid: tuple[int, int], instance_ids=None, class_ids=None,
                extra: dict | None = None) -> Path:
    """Write ``<stem>_000.pgm ...`` plus a ``<stem>.json`` sidecar; returns the sidecar path."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    masks = np.asarray(masks, dtype=bool).reshape(-1, grid[0] * grid[1])
    ids = list(range(1, len(masks) + 1)) if instance_ids is None else [int(i) for i in instance_ids]
    classes = [0] * len(masks) if class_ids is None else [int(c) for c in class_ids]
    entries = []
    for i, m in enumerate(masks):
        name = f"{stem.name}_{i:03d}.pgm"
        write_pgm(stem.parent / name, m, grid)
        entries.append({"file": name, "instance_id": ids[i], "class_id": classes[i],
                        "area": int(m.sum()), "empty": not m.any()})
    sidecar = {"grid": list(grid), "count": len(masks), "masks": entries}
    if extra:
        sidecar.update(extra)
    path = stem.with_suffix(".json")
    path.write_text(json.dumps(sidecar, indent=2))
    return path


def read_masks(stem) -> MaskStack:
    stem = Path(stem)
    path = stem.with_suffix(".json")
    meta = json.loads(path.read_text())
    grid = tuple(meta["grid"])
    entries = meta["masks"]
    if meta.get("count", len(entries)) != len(entries):
        raise ParseError(f"{path}: sidecar count {meta['count']} != {len(entries)} entries")
    masks = np.zeros((len(entries), grid[0] * grid[1]), dtype=bool)
    for i, e in enumerate(entries):
        img = read_pgm(stem.parent / e["file"])
        if img.shape != grid:
            raise ParseError(f"{e['file']}: size {img.shape} != sidecar grid {grid}")
        masks[i] = img.reshape(-1)
    extra = {k: v for k, v in meta.items() if k not in ("grid", "count", "masks")}
    return MaskStack(masks, grid, [e["instance_id"] for e in entries], [e["class_id"] for e in entries], extra)


# --- manifests ----------------------------------------------------------------


@dataclass
class ManifestEntry:
    id: str
    feature_path: str
    gt_mask_path: str
    num_instances: int
    grid: tuple[int, int]


@dataclass
class DatasetManifest:
    split: str
    samples: list[ManifestEntry]
    generator: dict
    root: Path

    @property
    def grid(self) -> tuple[int, int]:
        return self.samples[0].grid if self.samples else (0, 0)

    def feature_file(self, e: ManifestEntry) -> Path:
        return self.root / e.feature_path

    def mask_stem(self, e: ManifestEntry) -> Path:
        return self.root / e.gt_mask_path


def write_manifest(path, split: str, samples: list[ManifestEntry], generator: dict) -> None:
    doc = {"split": split, "generator": generator,
           "samples": [dict(asdict(s), grid=list(s.grid)) for s in samples]}
    Path(path).write_text(json.dumps(doc, indent=2))


def read_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    doc = json.loads(path.read_text())
    samples = [ManifestEntry(s["id"], s["feature_path"], s["gt_mask_path"], int(s["num_instances"]),
                             tuple(s["grid"])) for s in doc["samples"]]
    man = DatasetManifest(doc["split"], samples, doc.get("generator", {}), path.parent)
    grids = {s.grid for s in samples}
    if len(grids) > 1:
        raise ParseError(f"{path}: mixed grid sizes {sorted(grids)} in one split")
    if check_files:
        for s in samples:
            if not man.feature_file(s).exists():
                raise ParseError(f"{path}: missing feature file {s.feature_path}")
            if not man.mask_stem(s).with_suffix(".json").exists():
                raise ParseError(f"{path}: missing mask sidecar for {s.gt_mask_path}")
    return man


def generate_dataset(out_dir, count: int, spec: SceneSpec, seed: int = 0, val_fraction: float = 0.2) -> dict[str, Path]:
    """Write ``count`` scenes and ``train.json`` / ``val.json`` manifests under ``out_dir``."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    n_val = int(round(count * val_fraction))
    seeds = np.random.SeedSequence(seed).generate_state(count)
    splits: dict[str, list[ManifestEntry]] = {"train": [], "val": []}
    for i in range(count):
        scene = generate_scene(spec, int(seeds[i]))
        sid = f"scene_{i:05d}"
        write_features(out / "features" / f"{sid}.feat", scene.features, scene.grid)
        write_masks(out / "masks" / sid, scene.instance_masks, scene.grid, scene.instance_ids, scene.class_ids)
        entry = ManifestEntry(sid, f"features/{sid}.feat", f"masks/{sid}", len(scene.instance_masks), scene.grid)
        splits["val" if i >= count - n_val else "train"].append(entry)
    gen = dict(asdict(spec), grid=list(spec.grid), seed=seed, count=count)
    paths = {}
    for name, entries in splits.items():
        if entries:
            paths[name] = out / f"{name}.json"
            write_manifest(paths[name], name, entries, gen)
    return paths


@dataclass
class LoadedSplit:
    ids: list[str]
    features: np.ndarray                  # (S, N, D) float64
    gt: list[MaskStack]
    grid: tuple[int, int]


def load_split(manifest: DatasetManifest) -> LoadedSplit:
    feats, gts = [], []
    for e in manifest.samples:
        x, grid = read_features(manifest.feature_file(e))
        if tuple(grid) != tuple(e.grid):
            raise ParseError(f"{e.feature_path}: grid {grid} != manifest grid {e.grid}")
        feats.append(x)
        gts.append(read_masks(manifest.mask_stem(e)))
    return LoadedSplit([e.id for e in manifest.samples], np.stack(feats), gts, manifest.grid)
