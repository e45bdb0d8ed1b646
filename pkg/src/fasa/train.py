"""Two-stage training, inference and evaluation."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import LoadedSplit, load_split, read_manifest
from .decoder import BroadcastDecoder, DecoderOutput
from .errors import InputError, NumericError
from .maskcut import PseudoMaskSet, maskcut_extract
from .matching import (LossBreakdown, match_slots_to_pseudo, matched_bce_loss, reconstruction_loss,
                       total_loss)
from .metrics import (GroundTruth, SegmentationPrediction, fg_ari, hungarian_miou, mbo_class,
                      mbo_instance, mean_best_overlap, saliency_metrics)
from .nn import Linear, ParamStore, read_checkpoint, write_checkpoint
from .slots import (BinaryMask, InputProjector, SlotAttention, SlotConfig, build_mask_bias,
                    extract_binary_mask, fgbg_centroids, init_decomp_slots, looks_linear_,
                    similarity_attention_)

log = logging.getLogger(__name__)

STAGES = ("fgbg", "decomp")
INIT_SCHEMES = ("structured", "random")
EVAL_SOURCES = ("alpha", "attention")


@dataclass
class TrainConfig:
    stage: str = "decomp"
    epochs_fgbg: int = 20
    epochs_decomp: int = 40
    batch_size: int = 16
    peak_lr: float = 1e-4
    min_lr: float = 1e-7
    warmup_steps: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lam: float = 0.05
    num_slots: int = 5
    slot_dim: int = 64
    mlp_hidden: int | None = None
    mlp_activation: str = "relu"
    num_iterations: int = 3
    decoder_hidden: int = 256
    decoder_layers: int = 4
    input_pos_scale: float = 0.0     # > 0 adds a learned input position embedding
    init_scheme: str = "structured"  # or "random"
    attn_gain: float = 2.0
    fgbg_gate_bias: float = 3.0
    fgbg_corner_rule: str = "ge2"
    maskcut_corner_rule: str = "gt2"
    maskcut_iterations: int = 3
    maskcut_tau: float = 0.15
    maskcut_max_coverage: float = 0.95
    maskcut_solver: str = "lapack"
    eval_source: str = "alpha"
    seed: int = 0
    stage1_ckpt: str | None = None
    out_dir: str = "runs"

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise InputError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if not (0 < self.min_lr <= self.peak_lr):
            raise InputError(f"need 0 < min_lr <= peak_lr, got {self.min_lr} / {self.peak_lr}")
        if self.warmup_steps < 0:
            raise InputError("warmup_steps must be >= 0")
        if self.batch_size < 1 or self.epochs_fgbg < 0 or self.epochs_decomp < 0:
            raise InputError("batch_size must be positive and epochs non-negative")
        if self.lam < 0:
            raise InputError(f"lam must be >= 0, got {self.lam}")
        if self.num_slots < 2:
            raise InputError("num_slots must be >= 2 (background plus at least one object)")
        if self.eval_source not in EVAL_SOURCES:
            raise InputError(f"eval_source must be one of {EVAL_SOURCES}")
        if self.init_scheme not in INIT_SCHEMES:
            raise InputError(f"init_scheme must be one of {INIT_SCHEMES}")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(name: str, raw: str, current):
    kind = {f.name: f.type for f in dataclasses.fields(TrainConfig)}[name]
    text = raw.strip()
    if text.lower() in ("none", "") and "None" in str(kind):
        return None
    if "int" in str(kind) and "float" not in str(kind):
        return int(text)
    if "float" in str(kind):
        return float(text)
    return text


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    """Read ``key = value`` pairs from an INI file; section names are ignored."""
    parser = configparser.ConfigParser()
    text = Path(path).read_text()
    if not text.lstrip().startswith("["):
        text = "[fasa]\n" + text
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise InputError(f"{path}: {exc}") from exc
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    values = (base or TrainConfig()).to_dict()
    for section in parser.sections():
        for key, raw in parser.items(section):
            if key not in known:
                raise InputError(f"{path}: unknown config key {key!r} in [{section}]")
            try:
                values[key] = _coerce(key, raw, values[key])
            except ValueError as exc:
                raise InputError(f"{path}: bad value for {key}: {raw!r}") from exc
    return TrainConfig(**values)


# --- optimisation -------------------------------------------------------------


def lr_at(step: int, cfg: TrainConfig, total_steps: int) -> float:
    """Linear warm-up from 0 to ``peak_lr``, then cosine decay to ``min_lr`` at ``total_steps``."""
    if step < 0:
        raise InputError("step must be >= 0")
    warm = cfg.warmup_steps
    if warm and step < warm:
        return cfg.peak_lr * step / warm
    span = max(total_steps - warm, 1)
    progress = min((step - warm) / span, 1.0)
    return cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def save(self, path) -> None:
        tensors = {"state.step": np.array([float(self.step)])}
        tensors.update({f"m.{k}": a for k, a in self.m.items()})
        tensors.update({f"v.{k}": a for k, a in self.v.items()})
        write_checkpoint(path, tensors)

    @classmethod
    def load(cls, path) -> "TrainState":
        raw = read_checkpoint(path)
        st = cls(int(raw.pop("state.step")[0]))
        for k, a in raw.items():
            kind, name = k.split(".", 1)
            (st.m if kind == "m" else st.v)[name] = a
        return st


class Adam:
    """Adam with bias correction and no weight decay."""

    def __init__(self, store: ParamStore, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 state: TrainState | None = None):
        self.store, self.beta1, self.beta2, self.eps = store, beta1, beta2, eps
        self.state = state or TrainState()
        for name, p in store.items():
            self.state.m.setdefault(name, np.zeros_like(p.data))
            self.state.v.setdefault(name, np.zeros_like(p.data))

    def step(self, lr: float) -> None:
        st = self.state
        missing = [n for n, p in self.store.items() if p.grad is None]
        if missing:
            raise InputError("no gradient for " + ", ".join(missing))
        st.step += 1
        c1 = 1.0 - self.beta1 ** st.step
        c2 = 1.0 - self.beta2 ** st.step
        for name, p in self.store.items():
            g = p.grad
            m = st.m[name]
            v = st.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(store: ParamStore, state: TrainState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    Adam(store, beta1, beta2, eps, state).step(lr)


# --- models -------------------------------------------------------------------


def _slot_config(cfg: TrainConfig, k: int, input_dim: int) -> SlotConfig:
    return SlotConfig(num_slots=k, input_dim=input_dim, slot_dim=cfg.slot_dim,
                      num_iterations=cfg.num_iterations, mlp_hidden=cfg.mlp_hidden,
                      mlp_activation=cfg.mlp_activation)


class FgBgModel:
    """Two slots seeded from per-image K-Means centres, trained by reconstruction."""

    prefix = "fgbg"

    def __init__(self, cfg: TrainConfig, input_dim: int, n_positions: int, seed: int | None = None):
        rng = np.random.default_rng([cfg.seed if seed is None else seed, 1])
        self.cfg, self.input_dim, self.n_positions = cfg, input_dim, n_positions
        self.store = ParamStore()
        p = self.prefix
        self.project = InputProjector(self.store, f"{p}.input", input_dim, cfg.slot_dim, rng,
                                      n_positions if cfg.input_pos_scale > 0 else None, cfg.input_pos_scale)
        self.centroid_proj = Linear(self.store, f"{p}.centroid_proj", input_dim, cfg.slot_dim, rng)
        self.attention = SlotAttention(self.store, f"{p}.sa", _slot_config(cfg, 2, input_dim), rng)
        self.decoder = BroadcastDecoder(self.store, f"{p}.dec", cfg.slot_dim, input_dim, n_positions, rng,
                                        hidden=cfg.decoder_hidden, num_layers=cfg.decoder_layers)
        if cfg.init_scheme == "structured":
            # the projected centres start where the input path maps them, and the
            # attention starts as a similarity; together the two slots begin on
            # the K-Means split instead of at a random one
            lin = looks_linear_(self.project.mlp)
            centre = np.eye(input_dim) - 1.0 / input_dim   # what LayerNorm does before scaling
            self.centroid_proj.weight.data[...] = centre @ lin
            self.centroid_proj.bias.data[...] = 0.0
            similarity_attention_(self.attention, rng, cfg.attn_gain, cfg.fgbg_gate_bias)

    def forward(self, x: np.ndarray, centroids: np.ndarray):
        slots0 = self.centroid_proj(Tensor(centroids))
        slots, rec = self.attention(self.project(Tensor(x)), slots0)
        out = self.decoder(slots)
        return rec, out

    def masks(self, x: np.ndarray, centroids: np.ndarray, grid) -> list[BinaryMask]:
        rec, _ = self.forward(x, centroids)
        attn = rec.attn.data.reshape((-1,) + rec.attn.shape[-2:])
        return [extract_binary_mask(a, grid, self.cfg.fgbg_corner_rule) for a in attn]


class DecompModel:
    """K slots sampled from a learned Gaussian; slot 0 is pinned to the background by the mask bias."""

    prefix = "decomp"

    def __init__(self, cfg: TrainConfig, input_dim: int, n_positions: int, seed: int | None = None):
        rng = np.random.default_rng([cfg.seed if seed is None else seed, 2])
        self.cfg, self.input_dim, self.n_positions = cfg, input_dim, n_positions
        self.store = ParamStore()
        p = self.prefix
        d = cfg.slot_dim
        self.project = InputProjector(self.store, f"{p}.input", input_dim, d, rng,
                                      n_positions if cfg.input_pos_scale > 0 else None, cfg.input_pos_scale)
        self.mu = self.store.add(f"{p}.slots.mu", rng.normal(0.0, d ** -0.5, size=(d,)))
        self.log_sigma = self.store.add(f"{p}.slots.log_sigma", np.zeros(d))
        self.attention = SlotAttention(self.store, f"{p}.sa", _slot_config(cfg, cfg.num_slots, input_dim), rng)
        self.decoder = BroadcastDecoder(self.store, f"{p}.dec", d, input_dim, n_positions, rng,
                                        hidden=cfg.decoder_hidden, num_layers=cfg.decoder_layers)
        if cfg.init_scheme == "structured":
            looks_linear_(self.project.mlp)
            similarity_attention_(self.attention, rng, cfg.attn_gain)

    def forward(self, x: np.ndarray, bias: np.ndarray, rng: np.random.Generator):
        batch = x.shape[0] if x.ndim == 3 else None
        init = init_decomp_slots(self.cfg.num_slots, self.mu, self.log_sigma, rng, batch)
        slots, rec = self.attention(self.project(Tensor(x)), init, bias)
        return rec, self.decoder(slots)


# --- caches -------------------------------------------------------------------


def split_centroids(features: np.ndarray, seed: int) -> np.ndarray:
    """Per-image two-cluster K-Means centres, shape (S, 2, D)."""
    out = np.empty((features.shape[0], 2, features.shape[2]))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for i, x in enumerate(features):
            out[i] = fgbg_centroids(x, np.random.default_rng([seed, i]))[0]
    return out


def compute_pseudo_masks(split: LoadedSplit, cfg: TrainConfig) -> list[PseudoMaskSet]:
    return [maskcut_extract(x, split.grid, n=cfg.maskcut_iterations, tau=cfg.maskcut_tau,
                            corner_rule=cfg.maskcut_corner_rule, max_coverage=cfg.maskcut_max_coverage,
                            solver=cfg.maskcut_solver) for x in split.features]


def _pseudo_key(cfg: TrainConfig) -> str:
    opts = (cfg.maskcut_iterations, cfg.maskcut_tau, cfg.maskcut_corner_rule, cfg.maskcut_max_coverage)
    return hashlib.sha256(repr(opts).encode()).hexdigest()[:16]


def save_pseudo_cache(path, ids: list[str], masks: list[np.ndarray], cfg: TrainConfig) -> None:
    arrays = {f"m_{i}": m for i, m in zip(ids, masks)}
    np.savez_compressed(path, __ids__=np.array(ids), __key__=np.array(_pseudo_key(cfg)), **arrays)


def load_pseudo_masks(path, split: LoadedSplit, cfg: TrainConfig) -> list[np.ndarray]:
    """Cached MaskCut output for ``split``; rebuilt (with a warning) when absent or stale."""
    path = Path(path)
    if path.exists():
        with np.load(path) as z:
            ids = list(z["__ids__"])
            if str(z["__key__"]) == _pseudo_key(cfg) and all(f"m_{i}" in z for i in split.ids):
                return [z[f"m_{i}"].astype(bool) for i in split.ids]
        warnings.warn(f"pseudo-mask cache {path} is stale; regenerating", stacklevel=2)
    else:
        warnings.warn(f"pseudo-mask cache {path} missing; generating on the fly", stacklevel=2)
    masks = [pm.as_array() for pm in compute_pseudo_masks(split, cfg)]
    save_pseudo_cache(path, split.ids, masks, cfg)
    return masks


def state_hash(store: ParamStore) -> str:
    h = hashlib.sha256()
    for name in sorted(store.names()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(store[name].data).tobytes())
    return h.hexdigest()


# --- training loops -----------------------------------------------------------


@dataclass
class StageResult:
    checkpoint: Path
    log: list[dict]
    epoch_losses: list[float]
    seconds: float
    extra: dict = field(default_factory=dict)


def _batches(n: int, batch: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch] for i in range(0, n, batch)]


def _guard(loss: LossBreakdown, step: int, epoch: int) -> None:
    if not (math.isfinite(loss.total) and math.isfinite(loss.l_rec) and math.isfinite(loss.l_bce)):
        raise NumericError(f"non-finite loss at step {step} (epoch {epoch}): "
                           f"l_rec={loss.l_rec} l_bce={loss.l_bce}")


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2))


def train_stage_one(data: LoadedSplit, cfg: TrainConfig, out_dir=None) -> StageResult:
    """Optimise the two-slot model on reconstruction alone; writes ``fgbg.ckpt`` and ``fgbg_log.json``."""
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    n_img, n_pos, d_in = data.features.shape
    model = FgBgModel(cfg, d_in, n_pos)
    centroids = split_centroids(data.features, cfg.seed)
    opt = Adam(model.store, cfg.beta1, cfg.beta2, cfg.adam_eps)
    steps_per_epoch = math.ceil(n_img / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs_fgbg
    logs, epoch_losses = [], []
    for epoch in range(cfg.epochs_fgbg):
        running = []
        for idx in _batches(n_img, cfg.batch_size, np.random.default_rng([cfg.seed, 11, epoch])):
            x = data.features[idx]
            model.store.zero_grad()
            with Tape() as tape:
                _, dec = model.forward(x, centroids[idx])
                loss = total_loss(reconstruction_loss(x, dec.recon), 0.0, 0.0)
            _guard(loss, opt.state.step, epoch)
            tape.backward(loss.tensor)
            lr = lr_at(opt.state.step + 1, cfg, total)
            opt.step(lr)
            logs.append({"step": opt.state.step, "epoch": epoch, "lr": lr, "l_rec": loss.l_rec,
                         "l_bce": 0.0, "lam": 0.0, "total": loss.total})
            running.append(loss.total)
        epoch_losses.append(float(np.mean(running)))
        log.info("fgbg epoch %d loss %.5f", epoch, epoch_losses[-1])
    ckpt = out / "fgbg.ckpt"
    model.store.save(ckpt)
    opt.state.save(out / "fgbg.adam")
    _write_json(out / "fgbg.json", {"config": cfg.to_dict(), "input_dim": d_in, "n_positions": n_pos,
                                    "grid": list(data.grid), "hash": state_hash(model.store)})
    _write_json(out / "fgbg_log.json", {"steps": logs, "epoch_losses": epoch_losses})
    return StageResult(ckpt, logs, epoch_losses, time.perf_counter() - t0)


def load_fgbg(ckpt, cfg: TrainConfig | None = None) -> FgBgModel:
    ckpt = Path(ckpt)
    meta = json.loads(ckpt.with_suffix(".json").read_text())
    mcfg = TrainConfig(**meta["config"]) if cfg is None else cfg
    model = FgBgModel(mcfg, meta["input_dim"], meta["n_positions"])
    model.store.load(ckpt)
    return model


def load_decomp(ckpt, cfg: TrainConfig | None = None) -> DecompModel:
    ckpt = Path(ckpt)
    meta = json.loads(ckpt.with_suffix(".json").read_text())
    mcfg = TrainConfig(**meta["config"]) if cfg is None else cfg
    model = DecompModel(mcfg, meta["input_dim"], meta["n_positions"])
    model.store.load(ckpt)
    return model


def fgbg_masks(model: FgBgModel, features: np.ndarray, grid, seed: int, batch: int = 32) -> list[BinaryMask]:
    """Stage-one foreground masks for a stack of images (no gradients)."""
    cents = split_centroids(features, seed)
    out: list[BinaryMask] = []
    for i in range(0, len(features), batch):
        out += model.masks(features[i:i + batch], cents[i:i + batch], grid)
    return out


def train_stage_two(data: LoadedSplit, stage1_ckpt, cfg: TrainConfig, out_dir=None,
                    pseudo_cache=None) -> StageResult:
    """Masked-attention decomposition with matched pseudo-mask BCE; stage one stays frozen."""
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    stage_one = load_fgbg(stage1_ckpt)
    before = state_hash(stage_one.store)
    n_img, n_pos, d_in = data.features.shape
    # stage one is frozen, so its masks are fixed for the whole run
    fg = fgbg_masks(stage_one, data.features, data.grid, stage_one.cfg.seed)
    bias = np.stack([build_mask_bias(m, cfg.num_slots) for m in fg])
    pseudo = load_pseudo_masks(pseudo_cache or out / "pseudo_masks.npz", data, cfg)

    model = DecompModel(cfg, d_in, n_pos)
    opt = Adam(model.store, cfg.beta1, cfg.beta2, cfg.adam_eps)
    steps_per_epoch = math.ceil(n_img / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs_decomp
    logs, epoch_losses = [], []
    for epoch in range(cfg.epochs_decomp):
        running = []
        for idx in _batches(n_img, cfg.batch_size, np.random.default_rng([cfg.seed, 22, epoch])):
            x = data.features[idx]
            rng = np.random.default_rng([cfg.seed, 23, opt.state.step])
            model.store.zero_grad()
            with Tape() as tape:
                rec, dec = model.forward(x, bias[idx], rng)
                l_rec = reconstruction_loss(x, dec.recon)
                if cfg.lam > 0:
                    targets = [pseudo[i] for i in idx]
                    assigns = [match_slots_to_pseudo(a, t) for a, t in zip(rec.attn.data, targets)]
                    l_bce = matched_bce_loss(rec.attn[..., 1:], targets, assigns)
                else:
                    l_bce = 0.0
                loss = total_loss(l_rec, l_bce, cfg.lam)
            _guard(loss, opt.state.step, epoch)
            tape.backward(loss.tensor)
            lr = lr_at(opt.state.step + 1, cfg, total)
            opt.step(lr)
            logs.append({"step": opt.state.step, "epoch": epoch, "lr": lr, "l_rec": loss.l_rec,
                         "l_bce": loss.l_bce, "lam": cfg.lam, "total": loss.total})
            running.append(loss.total)
        epoch_losses.append(float(np.mean(running)))
        log.info("decomp epoch %d loss %.5f", epoch, epoch_losses[-1])
    after = state_hash(stage_one.store)
    if after != before:
        raise InputError("stage-one parameters changed during stage two")
    ckpt = out / "decomp.ckpt"
    model.store.save(ckpt)
    opt.state.save(out / "decomp.adam")
    _write_json(out / "decomp.json", {"config": cfg.to_dict(), "input_dim": d_in, "n_positions": n_pos,
                                      "grid": list(data.grid), "stage1": str(stage1_ckpt),
                                      "stage1_hash": before, "hash": state_hash(model.store)})
    _write_json(out / "decomp_log.json", {"steps": logs, "epoch_losses": epoch_losses})
    return StageResult(ckpt, logs, epoch_losses, time.perf_counter() - t0,
                       {"stage1_hash_before": before, "stage1_hash_after": after})


# --- inference and evaluation -------------------------------------------------


@dataclass
class Inference:
    prediction: SegmentationPrediction
    fg_mask: BinaryMask
    decoder: DecoderOutput
    attention: np.ndarray       # (N, K)


def infer(features: np.ndarray, stage_one: FgBgModel, stage_two: DecompModel, grid, seed: int | None = None) -> Inference:
    """Full two-stage pass on one (N, D) feature map; deterministic given ``seed``."""
    seed = stage_two.cfg.seed if seed is None else seed
    x = np.asarray(features, dtype=np.float64)
    if x.shape != (stage_two.n_positions, stage_two.input_dim):
        raise InputError(f"features {x.shape} do not fit model ({stage_two.n_positions}, {stage_two.input_dim})")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        cents, _ = fgbg_centroids(x, np.random.default_rng([stage_one.cfg.seed, 0]))
    fg = stage_one.masks(x, cents, grid)[0]
    bias = build_mask_bias(fg, stage_two.cfg.num_slots)
    rec, dec = stage_two.forward(x, bias, np.random.default_rng([seed, 31]))
    attn = rec.attn.data
    soft = dec.weights.data if stage_two.cfg.eval_source == "alpha" else attn.T
    return Inference(SegmentationPrediction.from_soft(soft, stage_two.cfg.eval_source), fg, dec, attn)


AGGREGATE_KEYS = ("miou", "mbo_i", "mbo_c", "fg_ari", "acc", "iou", "f_beta", "fgbg_mbo")


def score_image(res: Inference, gt: GroundTruth) -> dict:
    scores: dict[str, float | None] = dict.fromkeys(AGGREGATE_KEYS)
    fg_true = gt.fg if len(gt.instance_masks) else np.zeros_like(res.fg_mask.bits)
    sal = saliency_metrics(res.fg_mask.bits, fg_true)
    scores.update(acc=sal.acc, iou=sal.iou, f_beta=sal.f_beta)
    pairs = [m for m in (fg_true, ~fg_true) if m.any()]
    scores["fgbg_mbo"] = mean_best_overlap(np.stack([res.fg_mask.bits, ~res.fg_mask.bits]), np.stack(pairs))
    if len(gt.instance_masks):
        scores["miou"] = hungarian_miou(res.prediction.masks, gt.instance_masks)
        scores["mbo_i"] = mbo_instance(res.prediction, gt)
        scores["mbo_c"] = mbo_class(res.prediction, gt)
        if fg_true.sum() >= 2:
            scores["fg_ari"] = fg_ari(res.prediction.labels(), gt.labels(), fg_true)
    return scores


def evaluate(data: LoadedSplit, stage_one: FgBgModel, stage_two: DecompModel, seed: int | None = None) -> dict:
    """JSON-ready report: per-image scores and their means (undefined entries skipped)."""
    per_image = {}
    for sid, x, stack in zip(data.ids, data.features, data.gt):
        gt = GroundTruth(stack.masks, np.asarray(stack.instance_ids), np.asarray(stack.class_ids))
        per_image[sid] = score_image(infer(x, stage_one, stage_two, data.grid, seed), gt)
    aggregate = {}
    for key in AGGREGATE_KEYS:
        vals = [s[key] for s in per_image.values() if s[key] is not None]
        aggregate[key] = float(np.mean(vals)) if vals else None
    return {"per_image": per_image, "aggregate": aggregate, "count": len(per_image)}


def format_report(report: dict) -> str:
    keys = AGGREGATE_KEYS
    head = f"{'image':<14}" + "".join(f"{k:>10}" for k in keys)
    lines = [head, "-" * len(head)]

    def cell(v):
        return f"{v:>10.4f}" if v is not None else f"{'-':>10}"

    for sid, s in report["per_image"].items():
        lines.append(f"{sid:<14}" + "".join(cell(s[k]) for k in keys))
    lines.append("-" * len(head))
    lines.append(f"{'mean':<14}" + "".join(cell(report["aggregate"][k]) for k in keys))
    return "\n".join(lines)


def load_manifest_split(path) -> LoadedSplit:
    return load_split(read_manifest(path))


@dataclass
class PipelineResult:
    stage_one: StageResult
    stage_two: StageResult
    reports: dict        # eval source -> held-out report
    source: str
    seconds: float

    @property
    def report(self) -> dict:
        return self.reports[self.source]

    def summary(self) -> dict:
        agg = self.report["aggregate"]
        out = {"seconds": self.seconds, "fgbg_mbo": agg["fgbg_mbo"], "miou": agg["miou"], "fg_ari": agg["fg_ari"],
               "stage1_hash": self.stage_two.extra["stage1_hash_after"]}
        for src, rep in self.reports.items():
            out[f"miou_{src}"] = rep["aggregate"]["miou"]
        return out


def run_two_stage(train: LoadedSplit, val: LoadedSplit, cfg: TrainConfig, out_dir, stage1_ckpt=None,
                  pseudo_cache=None) -> PipelineResult:
    """Train both stages (or reuse a stage-one checkpoint) and score the held-out split
    with both soft-mask sources; ``cfg.eval_source`` picks the headline report."""
    out = Path(out_dir)
    t0 = time.perf_counter()
    if stage1_ckpt is None:
        first = train_stage_one(train, cfg.replace(stage="fgbg"), out / "fgbg")
        stage1_ckpt = first.checkpoint
    else:
        first = StageResult(Path(stage1_ckpt), [], [], 0.0, {})
    second = train_stage_two(train, stage1_ckpt, cfg.replace(stage="decomp"), out / "decomp", pseudo_cache)
    s1, s2 = load_fgbg(stage1_ckpt), load_decomp(second.checkpoint)
    reports = {}
    for src in EVAL_SOURCES:
        s2.cfg = s2.cfg.replace(eval_source=src)
        reports[src] = evaluate(val, s1, s2)
    return PipelineResult(first, second, reports, cfg.eval_source, time.perf_counter() - t0)
