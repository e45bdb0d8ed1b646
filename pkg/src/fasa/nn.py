"""Parameter storage, checkpoints and the layers built on :mod:`fasa.autodiff`."""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, InputError, ParseError

CHECKPOINT_MAGIC = b"FASA"
CHECKPOINT_VERSION = 1


class ParamStore:
    """Named, trainable parameters.  Names are unique dotted paths."""

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise InputError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def num_values(self) -> int:
        return sum(p.size for p in self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = np.zeros_like(p.data)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        """Copy values in place.  Shape or name mismatches raise, listing every offender."""
        problems = []
        for name, p in self._params.items():
            if name not in state:
                if strict:
                    problems.append(f"{name}: missing")
                continue
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                problems.append(f"{name}: expected shape {p.shape}, got {value.shape}")
        if strict:
            problems += [f"{name}: unexpected" for name in state if name not in self._params]
        if problems:
            raise InputError("checkpoint does not fit model: " + "; ".join(problems))
        for name, p in self._params.items():
            if name in state:
                p.data = np.array(state[name], dtype=np.float64)
                p.grad = np.zeros_like(p.data)

    def save(self, path) -> None:
        write_checkpoint(path, self.state_dict())

    def load(self, path, strict: bool = True) -> None:
        self.load_state_dict(read_checkpoint(path), strict=strict)


def write_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named float64 arrays in the FASA checkpoint layout (little-endian)."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION)]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: bad checkpoint magic {buf[:4]!r}", offset=0)
    if len(buf) < 6:
        raise ParseError(f"{path}: truncated header", offset=len(buf))
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version}", offset=4)
    pos = 6
    out: dict[str, np.ndarray] = {}

    def need(n: int) -> None:
        if pos + n > len(buf):
            raise ParseError(f"{path}: truncated, need {n} bytes, have {len(buf) - pos}", offset=pos)

    while pos < len(buf):
        need(4)
        (name_len,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(name_len)
        name = buf[pos : pos + name_len].decode("utf-8")
        pos += name_len
        need(4)
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(8 * rank)
        shape = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        count = int(np.prod(shape, dtype=np.int64))
        need(8 * count)
        out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    return out


def uniform_init(rng: np.random.Generator, fan_in: int, shape: Sequence[int]) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=tuple(shape))


class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int,
                 rng: np.random.Generator, bias: bool = True):
        self.d_in, self.d_out = d_in, d_out
        self.weight = store.add(f"{name}.weight", uniform_init(rng, d_in, (d_in, d_out)))
        self.bias = store.add(f"{name}.bias", uniform_init(rng, d_in, (d_out,))) if bias else None

    def __call__(self, x) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, dim: int, eps: float = 1e-5):
        self.eps = eps
        self.gain = store.add(f"{name}.gain", np.ones(dim))
        self.bias = store.add(f"{name}.bias", np.zeros(dim))

    def __call__(self, x) -> Tensor:
        return ad.layernorm(x, self.gain, self.bias, self.eps)


ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh, "sigmoid": ad.sigmoid}


def mlp_forward(x, layers: Sequence[Linear], activation: str = "relu") -> Tensor:
    """Affine/activation chain; the last layer stays affine."""
    act = ACTIVATIONS[activation]
    h = x
    for i, layer in enumerate(layers):
        if i > 0 and layers[i - 1].d_out != layer.d_in:
            raise DimensionError(f"MLP layer {i} expects {layer.d_in} inputs, previous emits {layers[i - 1].d_out}")
        h = layer(h)
        if i < len(layers) - 1:
            h = act(h)
    return h


class MLP:
    def __init__(self, store: ParamStore, name: str, dims: Sequence[int],
                 rng: np.random.Generator, activation: str = "relu"):
        if len(dims) < 2:
            raise InputError("MLP needs at least input and output dims")
        self.activation = activation
        self.layers = [Linear(store, f"{name}.{i}", dims[i], dims[i + 1], rng) for i in range(len(dims) - 1)]

    def __call__(self, x) -> Tensor:
        return mlp_forward(x, self.layers, self.activation)


class GRUCell:
    """Gated recurrent unit in the interpolation form.

    z = sigmoid([x, h] Wz + bz), r = sigmoid([x, h] Wr + br),
    n = tanh([x, r*h] Wn + bn),  h' = (1 - z) * n + z * h
    """

    def __init__(self, store: ParamStore, name: str, dim: int, rng: np.random.Generator):
        self.dim = dim
        fan_in = 2 * dim
        self.w_gates = store.add(f"{name}.w_gates", uniform_init(rng, fan_in, (2 * dim, 2 * dim)))
        self.b_gates = store.add(f"{name}.b_gates", uniform_init(rng, fan_in, (2 * dim,)))
        self.w_cand = store.add(f"{name}.w_cand", uniform_init(rng, fan_in, (2 * dim, dim)))
        self.b_cand = store.add(f"{name}.b_cand", uniform_init(rng, fan_in, (dim,)))

    def __call__(self, state, inputs) -> Tensor:
        return gru_cell(state, inputs, self)


def gru_cell(state, inputs, params: GRUCell) -> Tensor:
    state, inputs = ad.as_tensor(state), ad.as_tensor(inputs)
    if state.shape != inputs.shape:
        raise DimensionError(f"GRU state {state.shape} and input {inputs.shape} differ")
    d = params.dim
    gates = ad.sigmoid(ad.linear(ad.concat([inputs, state], axis=-1), params.w_gates, params.b_gates))
    z = gates[..., :d]
    r = gates[..., d:]
    cand = ad.tanh(ad.linear(ad.concat([inputs, r * state], axis=-1), params.w_cand, params.b_cand))
    return (1.0 - z) * cand + z * state
