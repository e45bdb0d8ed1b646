"""Central finite-difference checks for every differentiable building block."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .decoder import BroadcastDecoder
from .matching import hungarian_match, iou_matrix, matched_bce_loss, reconstruction_loss
from .nn import GRUCell, MLP, ParamStore
from .slots import SlotAttention, SlotConfig

STEP = 1e-5
PRIMITIVE_TOL = 1e-6
COMPOSITE_TOL = 1e-5


ABS_FLOOR = 1e-8


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``|a - n| / max(|a| + |n|, ABS_FLOOR)`` in the 2-norm.

    The floor keeps structurally zero gradients (a bias that shifts every
    softmax logit equally) from turning round-off into a relative error of 1.
    """
    diff = np.linalg.norm(analytic - numeric)
    scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    return float(diff / max(scale, ABS_FLOOR))


def numeric_grad(fn: Callable[[], float], t: Tensor, h: float = STEP) -> np.ndarray:
    g = np.zeros_like(t.data)
    flat, out = t.data.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return g


def check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = STEP, joint: bool = False) -> float:
    """Relative error between tape gradients and central differences.

    Per input tensor (the maximum is returned) by default; with ``joint`` the
    gradients of all inputs are compared as one concatenated vector, which is
    how composite graphs are judged.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    analytic = [t.grad.copy() for t in inputs]

    def value() -> float:
        return fn().item()

    numeric = [numeric_grad(value, t, h) for t in inputs]
    if joint:
        return relative_error(np.concatenate([a.ravel() for a in analytic]),
                              np.concatenate([n.ravel() for n in numeric]))
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


def _probe(rng: np.random.Generator, out: Tensor) -> Tensor:
    # a random linear functional; plain sums hide errors in softmax-like ops
    return ad.sum_(out * rng.standard_normal(out.shape))


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    trials: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _t(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(scale * rng.standard_normal(shape))


def _matmul(rng):
    m, k, n = rng.integers(1, 6, size=3)
    a, b = _t(rng, m, k), _t(rng, k, n)
    return lambda: _probe(np.random.default_rng(1), ad.matmul(a, b)), [a, b]


def _softmax(rng):
    n, k = rng.integers(1, 6, size=2)
    x = _t(rng, n, k, scale=2.0)
    return lambda: _probe(np.random.default_rng(1), ad.softmax_rows(x)), [x]


def _layernorm(rng):
    n, d = int(rng.integers(1, 5)), int(rng.integers(2, 6))
    x, g, b = _t(rng, n, d), _t(rng, d), _t(rng, d)
    return lambda: _probe(np.random.default_rng(1), ad.layernorm(x, g, b)), [x, g, b]


def _gru(rng):
    k, d = int(rng.integers(1, 4)), int(rng.integers(1, 5))
    store = ParamStore()
    cell = GRUCell(store, "gru", d, rng)
    h, x = _t(rng, k, d), _t(rng, k, d)
    params = [store[n] for n in store.names()]
    return lambda: _probe(np.random.default_rng(1), cell(h, x)), [h, x] + params


def _mlp(rng):
    dims = [int(v) for v in rng.integers(2, 6, size=3)]
    store = ParamStore()
    mlp = MLP(store, "mlp", dims, rng, activation="relu")
    x = _t(rng, int(rng.integers(1, 5)), dims[0])
    params = [store[n] for n in store.names()]
    return lambda: _probe(np.random.default_rng(1), mlp(x)), [x] + params


def _slot_step(rng):
    n, k, d = 8, 3, 4
    store = ParamStore()
    sa = SlotAttention(store, "sa", SlotConfig(num_slots=k, input_dim=d, slot_dim=d), rng)
    x, s = _t(rng, n, d), _t(rng, k, d)
    bias = np.zeros((n, k))
    params = [store[name] for name in store.names()]
    return lambda: _probe(np.random.default_rng(1), sa.step(x, s, bias)[0]), [x, s] + params


def _decode(rng):
    k, n, d_in, d_slot = 3, 16, 8, 4
    store = ParamStore()
    dec = BroadcastDecoder(store, "dec", d_slot, d_in, n, rng, hidden=6)
    slots, x = _t(rng, k, d_slot), _t(rng, n, d_in)
    params = [store[name] for name in store.names()]
    return lambda: reconstruction_loss(x, dec(slots).recon), [slots] + params


def _recon(rng):
    n, d = int(rng.integers(1, 6)), int(rng.integers(1, 6))
    x, xh = _t(rng, n, d), _t(rng, n, d)
    return lambda: reconstruction_loss(x, xh), [xh]


def _bce(rng):
    n, k = 8, 3
    logits = _t(rng, n, k)
    pseudo = rng.random((2, n)) < 0.5
    hard = logits.data.argmax(axis=1)
    slot_masks = np.stack([hard == j for j in range(1, k)])
    assign = hungarian_match(iou_matrix(slot_masks, pseudo))
    if not assign.pairs:
        assign = hungarian_match(np.eye(k - 1, 2))

    def fn():
        attn = ad.softmax_rows(logits)
        return matched_bce_loss(attn[:, 1:], pseudo, assign)

    return fn, [logits]


SUITE: dict[str, tuple[Callable, float]] = {
    "matmul": (_matmul, PRIMITIVE_TOL),
    "softmax": (_softmax, PRIMITIVE_TOL),
    "layernorm": (_layernorm, PRIMITIVE_TOL),
    "gru_cell": (_gru, PRIMITIVE_TOL),
    "mlp": (_mlp, PRIMITIVE_TOL),
    "reconstruction_loss": (_recon, PRIMITIVE_TOL),
    "slot_attention_step": (_slot_step, COMPOSITE_TOL),
    "decode": (_decode, COMPOSITE_TOL),
    "matched_bce_loss": (_bce, COMPOSITE_TOL),
}


def run_suite(trials: int = 5, seed: int = 0, names: Sequence[str] | None = None) -> list[CheckResult]:
    results = []
    for name in names or SUITE:
        build, tol = SUITE[name]
        worst = 0.0
        for trial in range(trials):
            rng = np.random.default_rng([seed, trial, len(name)])
            fn, inputs = build(rng)
            worst = max(worst, check(fn, inputs, joint=tol == COMPOSITE_TOL))
        results.append(CheckResult(name, worst, tol, trials))
    return results


def format_results(results: Sequence[CheckResult], elapsed: float | None = None) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'operation':<{width}}  max_rel_error  tolerance  status"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.max_rel_error:13.3e}  {r.tolerance:9.0e}  {'ok' if r.passed else 'FAIL'}")
    if elapsed is not None:
        lines.append(f"elapsed {elapsed:.2f}s")
    return "\n".join(lines)


def main_report(trials: int = 5, seed: int = 0) -> tuple[bool, str]:
    t0 = time.perf_counter()
    res = run_suite(trials, seed)
    return all(r.passed for r in res), format_results(res, time.perf_counter() - t0)
