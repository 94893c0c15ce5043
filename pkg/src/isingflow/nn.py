"""Small dense networks with hand-written backpropagation and Adam.

Inputs are row batches: ``x`` has shape ``(batch, layer_dims[0])`` (a 1-D
vector is treated as a batch of one). Weights are stored ``(fan_in, fan_out)``
so a layer computes ``act(x @ W + b)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"IFM1"
FILE_VERSION = 1
ACTIVATIONS = ("tanh", "identity")


class StaleCacheError(RuntimeError):
    pass


@dataclass
class Cache:
    inputs: list[np.ndarray]
    outputs: list[np.ndarray]
    version: int
    squeeze: bool
    used: bool = False


class Mlp:
    def __init__(self, layer_dims: Sequence[int], activations: Sequence[str], weights, biases):
        dims = [int(d) for d in layer_dims]
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ValueError(f"bad layer dims {dims}")
        if len(activations) != len(dims) - 1:
            raise ValueError("need one activation per layer")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        for li, (w, b) in enumerate(zip(weights, biases)):
            if w.shape != (dims[li], dims[li + 1]) or b.shape != (dims[li + 1],):
                raise ValueError(f"layer {li} parameter shapes do not match dims")
        self.layer_dims = dims
        self.activations = list(activations)
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.version = 0

    @classmethod
    def init(cls, layer_dims: Sequence[int], activations: Sequence[str], rng: np.random.Generator) -> "Mlp":
        """Glorot-uniform weights, zero biases."""
        ws, bs = [], []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            ws.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
            bs.append(np.zeros(fan_out))
        return cls(layer_dims, activations, ws, bs)

    @classmethod
    def zeros(cls, layer_dims: Sequence[int], activations: Sequence[str]) -> "Mlp":
        return cls(
            layer_dims,
            activations,
            [np.zeros((a, b)) for a, b in zip(layer_dims[:-1], layer_dims[1:])],
            [np.zeros(b) for b in layer_dims[1:]],
        )

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def copy(self) -> "Mlp":
        m = Mlp(self.layer_dims, self.activations, [w.copy() for w in self.weights], [b.copy() for b in self.biases])
        return m

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, Cache]:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[-1] != self.layer_dims[0]:
            raise ValueError(f"input dim {x.shape[-1]} != {self.layer_dims[0]}")
        inputs, outputs = [], []
        h = x
        for w, b, act in zip(self.weights, self.biases, self.activations):
            inputs.append(h)
            h = h @ w + b
            if act == "tanh":
                h = np.tanh(h)
            outputs.append(h)
        y = h[0] if squeeze else h
        return y, Cache(inputs, outputs, self.version, squeeze)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: Cache, grad_out: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Parameter gradients (ordered like ``params``) and the input gradient."""
        if cache.used:
            raise StaleCacheError("cache already consumed by a backward pass")
        if cache.version != self.version:
            raise StaleCacheError("parameters changed since this forward pass")
        cache.used = True
        g = np.asarray(grad_out, dtype=np.float64)
        if cache.squeeze:
            g = g[None, :]
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))  # type: ignore[list-item]
        for li in range(len(self.weights) - 1, -1, -1):
            if self.activations[li] == "tanh":
                y = cache.outputs[li]
                g = g * (1.0 - y * y)
            grads[2 * li] = cache.inputs[li].T @ g
            grads[2 * li + 1] = g.sum(axis=0)
            g = g @ self.weights[li].T
        return grads, (g[0] if cache.squeeze else g)

    # ---------------------------------------------------------------- files

    def to_bytes(self) -> bytes:
        parts = [
            MAGIC,
            struct.pack("<II", FILE_VERSION, len(self.weights)),
            struct.pack(f"<{len(self.layer_dims)}I", *self.layer_dims),
            bytes(ACTIVATIONS.index(a) for a in self.activations),
        ]
        for w, b in zip(self.weights, self.biases):
            parts.append(w.astype("<f8").tobytes())
            parts.append(b.astype("<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Mlp":
        if data[:4] != MAGIC:
            raise ValueError("not a model file (bad magic)")
        version, n_layers = struct.unpack_from("<II", data, 4)
        if version != FILE_VERSION:
            raise ValueError(f"unsupported model file version {version}")
        off = 12
        dims = list(struct.unpack_from(f"<{n_layers + 1}I", data, off))
        off += 4 * (n_layers + 1)
        acts = [ACTIVATIONS[t] for t in data[off : off + n_layers]]
        off += n_layers
        ws, bs = [], []
        for a, b in zip(dims[:-1], dims[1:]):
            w = np.frombuffer(data, "<f8", a * b, off).reshape(a, b).astype(np.float64)
            off += 8 * a * b
            bias = np.frombuffer(data, "<f8", b, off).astype(np.float64)
            off += 8 * b
            ws.append(w)
            bs.append(bias)
        if off != len(data):
            raise ValueError("trailing bytes in model file")
        return cls(dims, acts, ws, bs)

    def save(self, path: Path | str) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: Path | str) -> "Mlp":
        return cls.from_bytes(Path(path).read_bytes())


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_model(cls, model: Mlp, **kw) -> "OptimState":
        s = cls(**kw)
        s.m = [np.zeros_like(p) for p in model.params]
        s.v = [np.zeros_like(p) for p in model.params]
        return s


def opt_step(model: Mlp, grads: Sequence[np.ndarray], s: OptimState) -> tuple[Mlp, OptimState]:
    """One Adam update, applied in place."""
    params = model.params
    if not s.m:
        s.m = [np.zeros_like(p) for p in params]
        s.v = [np.zeros_like(p) for p in params]
    if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
        raise ValueError("gradient shapes do not match parameters")
    s.step += 1
    c1 = 1.0 - s.beta1**s.step
    c2 = 1.0 - s.beta2**s.step
    for p, g, m, v in zip(params, grads, s.m, s.v):
        m *= s.beta1
        m += (1.0 - s.beta1) * g
        v *= s.beta2
        v += (1.0 - s.beta2) * g * g
        p -= s.lr * (m / c1) / (np.sqrt(v / c2) + s.eps)
    model.version += 1
    return model, s
