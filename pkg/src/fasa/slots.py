"""Slot attention, clustering-based slot initialisation and the masked variant.

Shapes follow ``(batch, tokens, dim)``; a leading batch axis is optional for
every function that takes tensors.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, InputError
from .nn import MLP, GRUCell, LayerNorm, Linear, ParamStore

# additive logit that pins tokens to (or away from) the background slot
LARGE = 1e6

CORNER_RULES = ("ge2", "gt2")


@dataclass
class SlotConfig:
    num_slots: int
    input_dim: int
    slot_dim: int = 256
    num_iterations: int = 3
    mlp_hidden: int | None = None
    mlp_activation: str = "relu"

    def __post_init__(self) -> None:
        if self.mlp_hidden is None:
            self.mlp_hidden = 4 * self.slot_dim
        if self.num_slots < 2:
            raise InputError(f"num_slots must be >= 2, got {self.num_slots}")
        if self.num_iterations < 1:
            raise InputError(f"num_iterations must be >= 1, got {self.num_iterations}")
        if self.slot_dim < 1 or self.input_dim < 1:
            raise InputError("slot_dim and input_dim must be positive")


@dataclass
class AttentionRecord:
    """Outcome of a slot-attention run.

    ``attn`` and ``weights`` are the final-iteration attention ``A`` (softmax
    over slots) and its column-normalised form; ``history`` keeps the value of
    ``A`` after every iteration.
    """

    attn: Tensor
    weights: Tensor
    slots: Tensor
    history: list[np.ndarray] = field(default_factory=list)


@dataclass
class BinaryMask:
    """Per-patch foreground bits on an ``(H, W)`` grid, stored flat."""

    bits: np.ndarray
    grid: tuple[int, int]

    def __post_init__(self) -> None:
        bits = np.asarray(self.bits)
        if bits.dtype != bool:
            if not np.isin(bits, (0, 1)).all():
                raise InputError("BinaryMask values must be 0 or 1")
            bits = bits.astype(bool)
        self.bits = bits.reshape(-1)
        self.grid = (int(self.grid[0]), int(self.grid[1]))
        if self.grid[0] * self.grid[1] != self.bits.size:
            raise DimensionError(f"grid {self.grid} does not hold {self.bits.size} patches")

    @classmethod
    def from_grid(cls, arr) -> "BinaryMask":
        arr = np.asarray(arr)
        return cls(arr.reshape(-1), arr.shape)

    def as_grid(self) -> np.ndarray:
        return self.bits.reshape(self.grid)

    def flipped(self) -> "BinaryMask":
        return BinaryMask(~self.bits, self.grid)

    @property
    def area(self) -> int:
        return int(self.bits.sum())


class InputProjector:
    """LayerNorm followed by a two-layer MLP into slot space.

    With ``n_positions`` a learned per-patch embedding is added to the raw
    features first, so that slot updates can carry layout information.
    """

    def __init__(self, store: ParamStore, name: str, input_dim: int, slot_dim: int, rng: np.random.Generator,
                 n_positions: int | None = None, pos_scale: float = 1.0):
        self.pos = None
        if n_positions:
            self.pos = store.add(f"{name}.pos", rng.normal(0.0, pos_scale, size=(n_positions, input_dim)))
        self.norm = LayerNorm(store, f"{name}.norm", input_dim)
        self.mlp = MLP(store, f"{name}.mlp", [input_dim, slot_dim, slot_dim], rng)

    def __call__(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if self.pos is not None:
            if x.shape[-2] != self.pos.shape[0]:
                raise DimensionError(f"expected {self.pos.shape[0]} patches, got {x.shape[-2]}")
            x = x + self.pos
        return self.mlp(self.norm(x))


class SlotAttention:
    def __init__(self, store: ParamStore, name: str, cfg: SlotConfig, rng: np.random.Generator):
        d = cfg.slot_dim
        self.cfg = cfg
        self.norm_inputs = LayerNorm(store, f"{name}.norm_inputs", d)
        self.norm_slots = LayerNorm(store, f"{name}.norm_slots", d)
        self.norm_mlp = LayerNorm(store, f"{name}.norm_mlp", d)
        self.to_q = Linear(store, f"{name}.q", d, d, rng, bias=False)
        self.to_k = Linear(store, f"{name}.k", d, d, rng, bias=False)
        self.to_v = Linear(store, f"{name}.v", d, d, rng, bias=False)
        self.gru = GRUCell(store, f"{name}.gru", d, rng)
        self.mlp = MLP(store, f"{name}.mlp", [d, cfg.mlp_hidden, d], rng, activation=cfg.mlp_activation)
        self.scale = 1.0 / np.sqrt(d)

    def keys_values(self, x) -> tuple[Tensor, Tensor]:
        x = ad.as_tensor(x)
        if x.shape[-1] != self.cfg.slot_dim:
            raise DimensionError(f"projected inputs must have dim {self.cfg.slot_dim}, got {x.shape[-1]}")
        xn = self.norm_inputs(x)
        return self.to_k(xn), self.to_v(xn)

    def _update(self, k: Tensor, v: Tensor, slots: Tensor, bias) -> tuple[Tensor, Tensor, Tensor]:
        q = self.to_q(self.norm_slots(slots))
        logits = ad.matmul(k, ad.swapaxes(q, -1, -2)) * self.scale
        if bias is not None:
            bias = np.asarray(bias.data if isinstance(bias, Tensor) else bias, dtype=np.float64)
            if bias.shape[-2:] != logits.shape[-2:]:
                raise DimensionError(f"mask bias {bias.shape} does not match logits {logits.shape}")
            logits = logits + bias
        attn = ad.softmax(logits, axis=-1)
        mass = ad.sum_(attn, axis=-2, keepdims=True)
        weights = attn / ad.maximum(mass, 1e-12)
        updates = ad.matmul(ad.swapaxes(weights, -1, -2), v)
        slots = self.gru(slots, updates)
        slots = slots + self.mlp(self.norm_mlp(slots))
        return slots, attn, weights

    def step(self, x, slots, bias=None) -> tuple[Tensor, AttentionRecord]:
        """One refinement iteration on projected inputs ``x``."""
        slots = ad.as_tensor(slots)
        self._check_slots(slots)
        k, v = self.keys_values(x)
        new, attn, weights = self._update(k, v, slots, bias)
        return new, AttentionRecord(attn, weights, new, [attn.data])

    def run(self, x, init, bias=None, num_iterations: int | None = None) -> tuple[Tensor, AttentionRecord]:
        """Iterate ``num_iterations`` times (default from config); gradients flow through all of them."""
        slots = ad.as_tensor(init)
        self._check_slots(slots)
        k, v = self.keys_values(x)
        history = []
        for _ in range(num_iterations or self.cfg.num_iterations):
            slots, attn, weights = self._update(k, v, slots, bias)
            history.append(attn.data)
        return slots, AttentionRecord(attn, weights, slots, history)

    __call__ = run

    def _check_slots(self, slots: Tensor) -> None:
        if slots.shape[-1] != self.cfg.slot_dim:
            raise DimensionError(f"slots must have dim {self.cfg.slot_dim}, got {slots.shape[-1]}")


# --- structured initialisation ---------------------------------------------


def looks_linear_(mlp: MLP) -> np.ndarray:
    """Mirror a two-layer ReLU MLP so that it starts out as a linear map.

    Hidden units come in pairs ``relu(a)`` and ``relu(-a)`` whose output
    weights are negated copies, so ``relu(a) - relu(-a) = a``.  Biases are
    zeroed.  Returns the equivalent ``(in, out)`` matrix.
    """
    first, second = mlp.layers if len(mlp.layers) == 2 else (None, None)
    if first is None or mlp.activation != "relu" or first.d_out % 2:
        raise InputError("looks-linear init needs a two-layer ReLU MLP with an even hidden width")
    half = first.d_out // 2
    a = first.weight.data[:, :half].copy()
    b = second.weight.data[:half].copy() * np.sqrt(2.0)
    first.weight.data[...] = np.concatenate([a, -a], axis=1)
    second.weight.data[...] = np.concatenate([b, -b], axis=0)
    first.bias.data[...] = 0.0
    second.bias.data[...] = 0.0
    return a @ b


def similarity_attention_(sa: SlotAttention, rng: np.random.Generator, gain: float = 2.0,
                          gate_bias: float | None = None) -> None:
    """Tie query and key maps to one scaled orthogonal matrix.

    Logits then start as scaled dot products between normalised slots and
    inputs, so the first iteration is a soft nearest-centre assignment.  A
    positive ``gate_bias`` opens the GRU update gate towards keeping the old
    state, and the residual MLP output is zeroed, so the initial slots survive
    all iterations until training moves them.
    """
    d = sa.cfg.slot_dim
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    q = q * np.sign(np.diag(r))
    sa.to_q.weight.data[...] = gain * q
    sa.to_k.weight.data[...] = gain * q
    if gate_bias is not None:
        sa.gru.b_gates.data[:d] = gate_bias
        last = sa.mlp.layers[-1]
        last.weight.data[...] = 0.0
        last.bias.data[...] = 0.0


# --- clustering initialisation ----------------------------------------------


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    objective_history: list[float]
    iterations: int
    degenerate: bool


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - c[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def kmeans(x: np.ndarray, k: int, seed=0, tol: float = 1e-6, max_iter: int = 100,
           n_init: int = 1) -> KMeansResult:
    """K-Means++ seeding followed by Lloyd iterations.

    Empty clusters are re-seeded at the point farthest from its current
    centre.  The recorded objective is non-increasing.  With ``n_init > 1``
    the seeding is repeated from one generator and the run with the lowest
    final objective is kept.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if k < 1 or k > n:
        raise InputError(f"cannot form {k} clusters from {n} points")
    if n_init < 1:
        raise InputError(f"n_init must be >= 1, got {n_init}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        res = _lloyd(x, k, rng, tol, max_iter)
        if best is None or res.objective_history[-1] < best.objective_history[-1]:
            best = res
    return best


def _lloyd(x: np.ndarray, k: int, rng: np.random.Generator, tol: float, max_iter: int) -> KMeansResult:
    n = x.shape[0]

    centers = [x[rng.integers(n)]]
    closest = _sq_dists(x, centers[0][None])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centers.append(x[idx])
        closest = np.minimum(closest, _sq_dists(x, x[idx][None])[:, 0])
    centroids = np.array(centers)

    history: list[float] = []
    labels = np.zeros(n, dtype=np.int64)
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(x, centroids)
        labels = d.argmin(axis=1)
        history.append(float(d[np.arange(n), labels].sum()))
        new = centroids.copy()
        counts = np.bincount(labels, minlength=k)
        for j in range(k):
            if counts[j]:
                new[j] = x[labels == j].mean(axis=0)
        for j in np.flatnonzero(counts == 0):
            far = int(d[np.arange(n), labels].argmax())
            new[j] = x[far]
            labels[far] = j
            d[far, labels[far]] = 0.0
        moved = float(np.sqrt(((new - centroids) ** 2).sum(axis=1)).max())
        centroids = new
        if moved < tol:
            break
    d = _sq_dists(x, centroids)
    labels = d.argmin(axis=1)
    history.append(float(d[np.arange(n), labels].sum()))
    degenerate = bool(k > 1 and np.allclose(centroids, centroids[0], atol=1e-12, rtol=0.0))
    return KMeansResult(centroids, labels, history, it, degenerate)


def kmeans_pp_init(x: np.ndarray, k: int, seed=0) -> np.ndarray:
    return kmeans(x, k, seed).centroids


# restarts for the two-cluster split; a single seeding sometimes isolates the
# largest object and lumps the smaller ones in with the background
FGBG_RESTARTS = 5


def fgbg_centroids(x: np.ndarray, seed=0, n_init: int = FGBG_RESTARTS) -> tuple[np.ndarray, bool]:
    """Two-cluster centres of one feature map, plus a degenerate-input flag."""
    res = kmeans(x, 2, seed, n_init=n_init)
    if res.degenerate:
        warnings.warn("all patches identical: foreground/background centroids coincide", stacklevel=2)
    return res.centroids, res.degenerate


def init_fgbg_slots(x, projection: Linear, seed=0, centroids: np.ndarray | None = None) -> Tensor:
    """Project the two K-Means centres into slot space.  Centres carry no gradient."""
    if centroids is None:
        feats = np.asarray(x.data if isinstance(x, Tensor) else x)
        if feats.ndim == 2:
            centroids, _ = fgbg_centroids(feats, seed)
        else:
            centroids = np.stack([fgbg_centroids(f, seed)[0] for f in feats])
    return projection(Tensor(centroids))


def init_decomp_slots(k: int, mu: Tensor, log_sigma: Tensor, rng: np.random.Generator,
                      batch: int | None = None) -> Tensor:
    """Sample ``mu + exp(log_sigma) * eps`` for ``k`` slots (optionally per batch item)."""
    shape = (k, mu.shape[-1]) if batch is None else (batch, k, mu.shape[-1])
    eps = rng.standard_normal(shape)
    return mu + ad.exp(log_sigma) * eps


# --- foreground mask --------------------------------------------------------


def corner_count(mask: BinaryMask) -> int:
    g = mask.as_grid()
    return int(g[0, 0]) + int(g[0, -1]) + int(g[-1, 0]) + int(g[-1, -1])


def orient_foreground(mask: BinaryMask, rule: str = "ge2") -> BinaryMask:
    """Flip the mask if the foreground claims too many image corners.

    ``ge2`` flips at two or more foreground corners, ``gt2`` only at three or more.
    """
    if rule not in CORNER_RULES:
        raise InputError(f"unknown corner rule {rule!r}")
    h, w = mask.grid
    if h < 2 or w < 2:
        raise InputError(f"corner prior needs a grid of at least 2x2, got {mask.grid}")
    limit = 2 if rule == "ge2" else 3
    return mask.flipped() if corner_count(mask) >= limit else mask


def extract_binary_mask(attn, grid: tuple[int, int], rule: str = "ge2") -> BinaryMask:
    """Argmax over the two slots (ties go to slot 0), then orient by the corner prior."""
    a = np.asarray(attn.data if isinstance(attn, Tensor) else attn)
    if a.ndim != 2 or a.shape[1] != 2:
        raise DimensionError(f"expected (tokens, 2) attention, got {a.shape}")
    labels = a.argmax(axis=1)
    return orient_foreground(BinaryMask(labels == 1, grid), rule)


def build_mask_bias(mask: BinaryMask, k: int) -> np.ndarray:
    """Additive logits pinning background tokens to slot 0 and foreground tokens away from it."""
    if k < 2:
        raise InputError("masked slot attention needs at least two slots")
    bias = np.zeros((mask.bits.size, k))
    bias[:, 0] = np.where(mask.bits, -LARGE, LARGE)
    return bias
