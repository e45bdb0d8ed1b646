"""Command-line entry point: ``fasa <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import DimensionError, FasaError, GradientError, InputError, NumericError, ParseError

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3

PALETTE = np.array([
    [40, 40, 40], [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48],
    [145, 30, 180], [70, 240, 240], [240, 50, 230], [210, 245, 60], [250, 190, 212], [0, 128, 128],
], dtype=np.uint8)


def _grid(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"grid must look like 16x16, got {text!r}") from exc
    return h, w


def _config(args):
    from .train import TrainConfig, load_config

    cfg = load_config(args.config) if args.config else TrainConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out_dir is not None:
        changes["out_dir"] = args.out_dir
    for key in ("lam", "num_slots", "eval_source", "epochs_fgbg", "epochs_decomp"):
        val = getattr(args, key, None)
        if val is not None:
            changes[key] = val
    return cfg.replace(**changes) if changes else cfg


def _out_dir(args, cfg) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_ppm(path, rgb: np.ndarray, scale: int = 8) -> None:
    img = np.repeat(np.repeat(rgb, scale, axis=0), scale, axis=1)
    h, w = img.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + img.astype(np.uint8).tobytes())


def emit_viz(out_dir, masks: np.ndarray, grid: tuple[int, int], stem: str = "slot") -> list[Path]:
    """One colour-indexed PPM per slot plus a combined segmentation image."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    labels = np.asarray(masks).argmax(axis=0).reshape(grid)
    for k, m in enumerate(masks):
        rgb = np.zeros(grid + (3,), dtype=np.uint8)
        rgb[np.asarray(m, dtype=bool).reshape(grid)] = PALETTE[k % len(PALETTE)]
        paths.append(out / f"{stem}_{k:02d}.ppm")
        write_ppm(paths[-1], rgb)
    paths.append(out / f"{stem}_all.ppm")
    write_ppm(paths[-1], PALETTE[labels % len(PALETTE)])
    return paths


# --- commands -----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .data import SceneSpec, generate_dataset

    spec = SceneSpec(grid=args.grid, dim=args.dim, objects_min=args.objects_min, objects_max=args.objects_max,
                     shapes=args.shapes, sigma=args.sigma, separation=args.separation)
    out = Path(args.out)
    paths = generate_dataset(out, args.count, spec, seed=args.seed or 0, val_fraction=args.val_fraction)
    for split, p in paths.items():
        print(f"{split}: {p}")
    return EXIT_OK


def cmd_train_fgbg(args) -> int:
    from .train import fgbg_masks, load_fgbg, load_manifest_split, train_stage_one
    from .metrics import mean_best_overlap

    cfg = _config(args).replace(stage="fgbg")
    out = _out_dir(args, cfg)
    res = train_stage_one(load_manifest_split(args.train), cfg, out)
    print(f"checkpoint: {res.checkpoint}  ({res.seconds:.1f}s, final loss {res.epoch_losses[-1]:.5f})"
          if res.epoch_losses else f"checkpoint: {res.checkpoint}")
    if args.val:
        val = load_manifest_split(args.val)
        model = load_fgbg(res.checkpoint)
        scores = []
        for m, gt in zip(fgbg_masks(model, val.features, val.grid, model.cfg.seed), val.gt):
            fg = gt.masks.any(axis=0) if len(gt.masks) else np.zeros(m.bits.size, bool)
            targets = np.stack([t for t in (fg, ~fg) if t.any()])
            scores.append(mean_best_overlap(np.stack([m.bits, ~m.bits]), targets))
        print(f"held-out fg/bg mBO: {np.mean(scores):.4f}")
    return EXIT_OK


def cmd_train_decomp(args) -> int:
    from .train import load_manifest_split, train_stage_two

    cfg = _config(args).replace(stage="decomp")
    stage1 = args.stage1 or cfg.stage1_ckpt
    if not stage1:
        raise InputError("train-decomp needs a frozen stage-one checkpoint (--stage1)")
    out = _out_dir(args, cfg)
    res = train_stage_two(load_manifest_split(args.train), stage1, cfg, out, args.pseudo_cache)
    print(f"checkpoint: {res.checkpoint}  ({res.seconds:.1f}s)")
    print(f"stage-one hash unchanged: {res.extra['stage1_hash_before'] == res.extra['stage1_hash_after']}")
    return EXIT_OK


def cmd_maskcut(args) -> int:
    from .data import read_features, write_masks
    from .maskcut import maskcut_extract

    x, grid = read_features(args.features)
    res = maskcut_extract(x, grid, n=args.n, tau=args.tau, corner_rule=args.corner_rule,
                          max_coverage=args.max_coverage, solver=args.solver)
    sidecar = write_masks(args.out, res.as_array(), grid,
                          extra={"stop_reason": res.stop_reason, "iterations": res.diagnostics})
    print(f"{len(res.masks)} masks ({res.stop_reason}); sidecar {sidecar}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate, format_report, load_decomp, load_fgbg, load_manifest_split

    stage_one = load_fgbg(args.stage1)
    stage_two = load_decomp(args.stage2)
    if args.eval_source:
        stage_two.cfg = stage_two.cfg.replace(eval_source=args.eval_source)
    report = evaluate(load_manifest_split(args.manifest), stage_one, stage_two, args.seed)
    text = format_report(report)
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2))
        Path(args.report).with_suffix(".txt").write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_infer(args) -> int:
    from .data import read_features, write_masks
    from .train import infer, load_decomp, load_fgbg

    x, grid = read_features(args.features)
    stage_one, stage_two = load_fgbg(args.stage1), load_decomp(args.stage2)
    res = infer(x, stage_one, stage_two, grid, args.seed)
    out = Path(args.out)
    write_masks(out, res.prediction.masks, grid, extra={"source": res.prediction.source,
                                                         "foreground_area": res.fg_mask.area})
    write_masks(out.with_name(out.name + "_fg"), res.fg_mask.bits[None], grid)
    print(f"{res.prediction.num_slots} slot masks -> {out.with_suffix('.json')}")
    if args.emit_viz:
        soft = res.decoder.weights.data if res.prediction.source == "alpha" else res.attention.T
        for p in emit_viz(args.emit_viz, soft == soft.max(axis=0, keepdims=True), grid):
            print(f"wrote {p}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import main_report

    ok, text = main_report(trials=args.trials, seed=args.seed or 0)
    print(text)
    return EXIT_OK if ok else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI-style key = value file with training options")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out-dir", default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fasa", description="Foreground-aware slot attention toolkit",
                                parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset and manifests")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=500)
    g.add_argument("--objects-min", type=int, default=1)
    g.add_argument("--objects-max", type=int, default=4)
    g.add_argument("--sigma", type=float, default=0.5)
    g.add_argument("--separation", type=float, default=6.0)
    g.add_argument("--grid", type=_grid, default=(16, 16))
    g.add_argument("--dim", type=int, default=64)
    g.add_argument("--shapes", choices=("rects", "blobs", "mixed"), default="mixed")
    g.add_argument("--val-fraction", type=float, default=0.2)
    g.set_defaults(func=cmd_gen_data)

    t1 = sub.add_parser("train-fgbg", parents=[common], help="train the two-slot stage")
    t1.add_argument("--train", required=True, help="training manifest")
    t1.add_argument("--val", help="held-out manifest for the fg/bg report")
    t1.add_argument("--epochs-fgbg", type=int)
    t1.set_defaults(func=cmd_train_fgbg)

    t2 = sub.add_parser("train-decomp", parents=[common], help="train the masked decomposition stage")
    t2.add_argument("--train", required=True)
    t2.add_argument("--stage1", help="frozen stage-one checkpoint")
    t2.add_argument("--pseudo-cache", help="MaskCut cache (.npz); built when missing")
    t2.add_argument("--lam", type=float)
    t2.add_argument("--num-slots", type=int)
    t2.add_argument("--epochs-decomp", type=int)
    t2.set_defaults(func=cmd_train_decomp)

    mc = sub.add_parser("maskcut", parents=[common], help="pseudo-masks for one feature file")
    mc.add_argument("--features", required=True)
    mc.add_argument("--out", required=True, help="output stem for PGM stack and JSON sidecar")
    mc.add_argument("--n", type=int, default=3)
    mc.add_argument("--tau", type=float, default=0.15)
    mc.add_argument("--corner-rule", choices=("ge2", "gt2"), default="gt2")
    mc.add_argument("--max-coverage", type=float, default=0.95)
    mc.add_argument("--solver", choices=("jacobi", "lapack"), default="jacobi")
    mc.set_defaults(func=cmd_maskcut)

    ev = sub.add_parser("eval", parents=[common], help="score both stages on a manifest")
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--stage1", required=True)
    ev.add_argument("--stage2", required=True)
    ev.add_argument("--report", help="JSON report path (a .txt table is written next to it)")
    ev.add_argument("--eval-source", choices=("alpha", "attention"))
    ev.set_defaults(func=cmd_eval)

    inf = sub.add_parser("infer", parents=[common], help="segment one feature file")
    inf.add_argument("--features", required=True)
    inf.add_argument("--stage1", required=True)
    inf.add_argument("--stage2", required=True)
    inf.add_argument("--out", required=True, help="output stem for the slot-mask stack")
    inf.add_argument("--emit-viz", metavar="DIR", help="write colour-indexed PPM masks here")
    inf.set_defaults(func=cmd_infer)

    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    gc.add_argument("--trials", type=int, default=5)
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (NumericError, GradientError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, ParseError, DimensionError, FasaError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
