import json

import numpy as np
import pytest

from fasa import cli, gradcheck
from fasa.data import read_masks

TINY_INI = """\
slot_dim = 16
decoder_hidden = 32
decoder_layers = 3
batch_size = 4
warmup_steps = 2
epochs_fgbg = 2
epochs_decomp = 2
peak_lr = 1e-3
num_slots = 3
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.ini").write_text(TINY_INI)
    code = cli.main(["gen-data", "--out", str(root / "data"), "--count", "10", "--grid", "8x8", "--dim", "8",
                     "--objects-max", "2", "--seed", "2"])
    assert code == 0
    return root


@pytest.fixture(scope="module")
def trained(workdir):
    r = workdir
    common = ["--config", str(r / "tiny.ini")]
    assert cli.main(["train-fgbg", "--train", str(r / "data/train.json"), "--val", str(r / "data/val.json"),
                     "--out-dir", str(r / "s1"), *common]) == 0
    with pytest.warns(UserWarning, match="missing"):
        code = cli.main(["train-decomp", "--train", str(r / "data/train.json"), "--stage1", str(r / "s1/fgbg.ckpt"),
                         "--pseudo-cache", str(r / "pseudo.npz"), "--out-dir", str(r / "s2"), *common])
    assert code == 0
    return r


def test_gen_data_outputs(workdir, capsys):
    man = json.loads((workdir / "data/train.json").read_text())
    assert len(man["samples"]) == 8 and man["generator"]["grid"] == [8, 8]
    assert (workdir / "data/features/scene_00000.feat").exists()


def test_train_fgbg_reports_mbo(workdir, capsys):
    assert cli.main(["train-fgbg", "--train", str(workdir / "data/train.json"), "--val", str(workdir / "data/val.json"),
                     "--out-dir", str(workdir / "s1b"), "--config", str(workdir / "tiny.ini"),
                     "--epochs-fgbg", "1"]) == 0
    assert "held-out fg/bg mBO" in capsys.readouterr().out


def test_eval_writes_report(trained, capsys):
    r = trained
    rep = r / "report.json"
    assert cli.main(["eval", "--manifest", str(r / "data/val.json"), "--stage1", str(r / "s1/fgbg.ckpt"),
                     "--stage2", str(r / "s2/decomp.ckpt"), "--report", str(rep)]) == 0
    doc = json.loads(rep.read_text())
    assert doc["count"] == 2 and "miou" in doc["aggregate"]
    assert rep.with_suffix(".txt").exists() and "mean" in capsys.readouterr().out


def test_infer_with_viz(trained):
    r = trained
    out = r / "pred" / "scene"
    assert cli.main(["infer", "--features", str(r / "data/features/scene_00009.feat"), "--stage1",
                     str(r / "s1/fgbg.ckpt"), "--stage2", str(r / "s2/decomp.ckpt"), "--out", str(out),
                     "--emit-viz", str(r / "viz")]) == 0
    stack = read_masks(out)
    assert stack.masks.shape == (3, 64)
    assert np.array_equal(stack.masks.sum(axis=0), np.ones(64))
    fg = read_masks(out.with_name("scene_fg"))
    assert fg.masks.shape == (1, 64)
    ppm = sorted((r / "viz").glob("*.ppm"))
    assert len(ppm) == 4
    head = ppm[0].read_bytes()[:11]
    assert head.startswith(b"P6\n64 64\n")


def test_maskcut_command(workdir, capsys):
    out = workdir / "mc" / "scene"
    assert cli.main(["maskcut", "--features", str(workdir / "data/features/scene_00000.feat"), "--out", str(out),
                     "--n", "2"]) == 0
    meta = json.loads(out.with_suffix(".json").read_text())
    assert meta["count"] <= 2 and "stop_reason" in meta
    assert "masks" in capsys.readouterr().out


def test_gradcheck_exit_codes(monkeypatch, capsys):
    assert cli.main(["gradcheck", "--trials", "1"]) == 0
    assert "matmul" in capsys.readouterr().out
    monkeypatch.setattr(gradcheck, "main_report", lambda trials, seed: (False, "bad"))
    assert cli.main(["gradcheck"]) == 3


def test_validation_errors_exit_2(workdir, capsys):
    assert cli.main(["train-decomp", "--train", str(workdir / "data/train.json")]) == 2
    assert "--stage1" in capsys.readouterr().err
    assert cli.main(["maskcut", "--features", str(workdir / "nope.feat"), "--out", str(workdir / "x")]) == 2
    bad = workdir / "bad.ini"
    bad.write_text("warmup = 3\n")
    assert cli.main(["train-fgbg", "--train", str(workdir / "data/train.json"), "--config", str(bad)]) == 2
    assert "unknown config key" in capsys.readouterr().err


def test_corrupt_feature_file_exit_2(workdir, capsys):
    f = workdir / "broken.feat"
    f.write_bytes(b"FASAFEAT\x01\x00")
    assert cli.main(["maskcut", "--features", str(f), "--out", str(workdir / "y")]) == 2
    assert "byte offset" in capsys.readouterr().err


def test_bad_grid_argument():
    with pytest.raises(SystemExit) as err:
        cli.main(["gen-data", "--out", "x", "--grid", "sixteen"])
    assert err.value.code == 2
