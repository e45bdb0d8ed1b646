"""Pseudo-mask discovery by repeated normalized cuts on a patch-affinity graph."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import InputError
from .slots import CORNER_RULES, BinaryMask, corner_count

WEAK_EDGE = 1e-5
DEGREE_FLOOR = 1e-8


@dataclass
class AffinityGraph:
    weights: np.ndarray
    degrees: np.ndarray
    tau: float


def build_affinity(features: np.ndarray, tau: float = 0.15, allow_zero_rows: bool = False) -> AffinityGraph:
    """Binarised cosine affinity: 1 where cosine >= tau, 1e-5 elsewhere.

    Zero feature rows are rejected unless ``allow_zero_rows``; then they have
    cosine 0 with everything (used when earlier foregrounds are masked out).
    """
    x = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    zero = norms == 0.0
    if zero.any() and not allow_zero_rows:
        raise InputError(f"patch {int(np.flatnonzero(zero)[0])} has a zero feature vector")
    unit = x / np.where(zero, 1.0, norms)[:, None]
    cos = unit @ unit.T
    cos = 0.5 * (cos + cos.T)
    w = np.where(cos >= tau, 1.0, WEAK_EDGE)
    return AffinityGraph(w, np.maximum(w.sum(axis=1), DEGREE_FLOOR), tau)


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pairings of ``n`` (even) indices so every pair meets once per sweep."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        rounds.append((np.array(players[: n // 2]), np.array(players[n // 2:][::-1])))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def jacobi_eigh(a: np.ndarray, tol: float = 1e-10, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Sweeps visit every off-diagonal pair once, in round-robin order so that
    the n/2 rotations of a round touch disjoint index pairs and can be applied
    together.  Stops when the off-diagonal Frobenius norm is at most ``tol``.
    Returns ascending eigenvalues and eigenvectors as columns.
    """
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[0]
    if a.ndim != 2 or a.shape[1] != n:
        raise InputError(f"expected a square matrix, got {a.shape}")
    if n == 1:
        return a.diagonal().copy(), np.eye(1)
    m = n + (n % 2)                     # odd sizes get an inert dummy index
    work = np.zeros((m, m))
    work[:n, :n] = 0.5 * (a + a.T)
    v = np.eye(m)
    rounds = _round_robin(m)
    offdiag = ~np.eye(m, dtype=bool)
    for _ in range(max_sweeps):
        # direct norm: sum(A^2) - sum(diag^2) cancels catastrophically near convergence
        if np.linalg.norm(work[offdiag]) <= tol:
            break
        for p, q in rounds:
            apq = work[p, q]
            active = np.abs(apq) > 1e-300
            if not active.any():
                continue
            safe = np.where(active, apq, 1.0)
            theta = (work[q, q] - work[p, p]) / (2.0 * safe)
            t = np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.hypot(theta, 1.0))
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            cols_p, cols_q = work[:, p], work[:, q]
            work[:, p], work[:, q] = c * cols_p - s * cols_q, s * cols_p + c * cols_q
            rows_p, rows_q = work[p, :], work[q, :]
            work[p, :], work[q, :] = c[:, None] * rows_p - s[:, None] * rows_q, s[:, None] * rows_p + c[:, None] * rows_q
            work[p, q] = 0.0
            work[q, p] = 0.0
            vp, vq = v[:, p], v[:, q]
            v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
    vals = np.diag(work)[:n].copy()
    vecs = v[:n, :n]
    order = np.argsort(vals, kind="stable")
    return vals[order], vecs[:, order]


def symmetric_eigh(a: np.ndarray, solver: str = "jacobi") -> tuple[np.ndarray, np.ndarray]:
    if solver == "jacobi":
        return jacobi_eigh(a)
    if solver == "lapack":
        return np.linalg.eigh(a)
    raise InputError(f"unknown eigensolver {solver!r}")


@dataclass
class NCutResult:
    eigenvector: np.ndarray   # generalised eigenvector x, largest |x_i| made positive
    eigenvalue: float
    eigenvalues: np.ndarray   # full generalised spectrum, ascending
    mask: np.ndarray          # x_i > mean(x)
    null_multiplicity: int    # eigenvalues ~ 0 (disconnected components)
    degenerate: bool          # second eigenvalue not separated from the third


def ncut_bipartition(g: AffinityGraph, solver: str = "jacobi", gap_tol: float = 1e-8) -> NCutResult:
    """Second-smallest solution of ``(D - W) x = lambda D x`` via the symmetric normalised Laplacian."""
    d = g.degrees
    if (d <= 0).any():
        raise InputError("affinity graph has a non-positive degree")
    inv_sqrt = 1.0 / np.sqrt(d)
    lap = np.diag(d) - g.weights
    lsym = inv_sqrt[:, None] * lap * inv_sqrt[None, :]
    lsym = 0.5 * (lsym + lsym.T)
    vals, vecs = symmetric_eigh(lsym, solver)
    n = len(vals)
    if n < 2:
        raise InputError("need at least two patches to cut")
    x = inv_sqrt * vecs[:, 1]
    if x[np.argmax(np.abs(x))] < 0:
        x = -x
    null = int(np.sum(vals < 1e-9))
    degenerate = n > 2 and abs(vals[2] - vals[1]) <= gap_tol * max(1.0, abs(vals[1]))
    return NCutResult(x, float(vals[1]), vals, x > x.mean(), null, bool(degenerate or null > 1))


def ncut_value(w: np.ndarray, side: np.ndarray) -> float:
    """NCut(A, B) = cut/assoc(A, V) + cut/assoc(B, V)."""
    side = np.asarray(side, dtype=bool)
    cut = w[side][:, ~side].sum()
    return float(cut / w[side].sum() + cut / w[~side].sum())


@dataclass
class PseudoMaskSet:
    masks: list[np.ndarray]
    grid: tuple[int, int]
    n_iterations: int
    stop_reason: str
    diagnostics: list[dict] = field(default_factory=list)

    def as_array(self) -> np.ndarray:
        n = self.grid[0] * self.grid[1]
        return np.array(self.masks, dtype=bool).reshape(len(self.masks), n)


def _component_with(bits: np.ndarray, grid: tuple[int, int], seed: int) -> np.ndarray:
    labels, _ = ndimage.label(bits.reshape(grid))
    flat = labels.reshape(-1)
    return flat == flat[seed]


def maskcut_extract(features: np.ndarray, grid: tuple[int, int], n: int = 3, tau: float = 0.15,
                    corner_rule: str = "gt2", max_coverage: float = 0.95, solver: str = "jacobi",
                    seed_component: bool = True) -> PseudoMaskSet:
    """Discover up to ``n`` disjoint foreground masks.

    Each round cuts the affinity graph, orients the cut with the corner prior,
    keeps the grid-connected piece around the most salient patch (the entry of
    largest magnitude on the foreground side) and zeroes the features of the
    discovered patches before the next round.  Stops early on a degenerate
    spectrum, an empty mask, or a mask wider than ``max_coverage``.
    """
    if n < 1:
        raise InputError("n must be >= 1")
    if corner_rule not in CORNER_RULES:
        raise InputError(f"unknown corner rule {corner_rule!r}")
    feats = np.array(features, dtype=np.float64)
    npatch = feats.shape[0]
    if grid[0] * grid[1] != npatch:
        raise InputError(f"grid {grid} does not match {npatch} patches")
    limit = 2 if corner_rule == "ge2" else 3
    found = np.zeros(npatch, dtype=bool)
    masks: list[np.ndarray] = []
    diags: list[dict] = []
    reason = "max_iterations"
    for it in range(n):
        g = build_affinity(feats, tau, allow_zero_rows=it > 0)
        res = ncut_bipartition(g, solver)
        diag = {"iteration": it, "eigenvalue": res.eigenvalue, "degenerate": res.degenerate,
                "null_multiplicity": res.null_multiplicity}
        diags.append(diag)
        if res.degenerate:
            reason = "degenerate"
            break
        fg = res.mask.copy()
        saliency = res.eigenvector.copy()
        flipped = corner_count(BinaryMask(fg, grid)) >= limit
        if flipped:
            fg = ~fg
            saliency = -saliency
        diag["flipped"] = bool(flipped)
        fg &= ~found
        if not fg.any():
            diag["area"] = 0
            reason = "empty"
            break
        if seed_component:
            seed = int(np.flatnonzero(fg)[np.argmax(saliency[fg])])
            fg = _component_with(fg, grid, seed)
        diag["area"] = int(fg.sum())
        if fg.mean() > max_coverage:
            reason = "coverage"
            break
        masks.append(fg)
        found |= fg
        feats[fg] = 0.0
    return PseudoMaskSet(masks, tuple(grid), len(diags), reason, diags)
