"""Spatial-broadcast MLP decoder with per-slot alpha maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, InputError
from .nn import Linear, ParamStore


@dataclass
class DecoderOutput:
    recons: Tensor        # (..., K, N, D_out) per-slot reconstructions
    alpha_logits: Tensor  # (..., K, N)
    weights: Tensor       # (..., K, N) softmax over slots
    recon: Tensor         # (..., N, D_out) alpha-weighted combination


class BroadcastDecoder:
    """Each slot is copied to every position, offset by a learned positional
    embedding, and decoded independently by a ReLU MLP into a feature vector
    plus one alpha logit.

    The first layer is evaluated as ``slot @ W + pos @ W`` -- the same affine
    map applied to ``slot + pos`` -- so the broadcast tensor is never built at
    slot width.
    """

    def __init__(self, store: ParamStore, name: str, slot_dim: int, out_dim: int, n_positions: int,
                 rng: np.random.Generator, hidden: int = 2048, num_layers: int = 4):
        if num_layers < 2:
            raise InputError("decoder needs at least two layers")
        self.slot_dim, self.out_dim, self.n_positions = slot_dim, out_dim, n_positions
        self.pos = store.add(f"{name}.pos", rng.normal(0.0, 0.02, size=(n_positions, slot_dim)))
        self.first = Linear(store, f"{name}.0", slot_dim, hidden, rng)
        self.hidden = [Linear(store, f"{name}.{i}", hidden, hidden, rng) for i in range(1, num_layers - 1)]
        # the output layer emits out_dim + 1 channels; kept as two column blocks
        last = num_layers - 1
        self.to_recon = Linear(store, f"{name}.{last}.recon", hidden, out_dim, rng)
        self.to_alpha = Linear(store, f"{name}.{last}.alpha", hidden, 1, rng)

    def __call__(self, slots, n_positions: int | None = None) -> DecoderOutput:
        return decode(slots, self, n_positions)


def decode(slots, params: BroadcastDecoder, n_positions: int | None = None) -> DecoderOutput:
    slots = ad.as_tensor(slots)
    if slots.shape[-1] != params.slot_dim:
        raise DimensionError(f"decoder expects slot dim {params.slot_dim}, got {slots.shape[-1]}")
    if n_positions is not None and n_positions != params.n_positions:
        raise DimensionError(f"decoder was built for {params.n_positions} positions, asked for {n_positions}")
    lead = slots.shape[:-1]                     # (..., K)
    hs = params.first(slots)                    # (..., K, H)
    hp = ad.matmul(params.pos, params.first.weight)   # (N, H)
    hs = hs.reshape(lead + (1, hs.shape[-1]))
    h = ad.relu(hs + hp)                        # (..., K, N, H)
    for layer in params.hidden:
        h = ad.relu(layer(h))
    recons = params.to_recon(h)                 # (..., K, N, D)
    alpha = params.to_alpha(h).reshape(lead + (params.n_positions,))
    k_axis = len(lead) - 1
    weights = ad.softmax(alpha, axis=k_axis)
    w = weights.reshape(weights.shape + (1,))
    recon = ad.sum_(w * recons, axis=k_axis)
    return DecoderOutput(recons, alpha, weights, recon)


def alpha_masks(out: DecoderOutput) -> np.ndarray:
    """Soft per-slot masks (the alpha mixture weights); argmax over slots gives a hard segmentation."""
    return out.weights.data
