"""Minimal parameter containers on top of :mod:`malt.numerics`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .numerics import SeededRng, ShapeError, Tensor, gelu, layer_norm


class Module:
    """Holds named parameters and child modules; names are stable for checkpoints."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def param(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for k, v in self._params.items():
            yield prefix + k, v
        for k, c in self._children.items():
            yield from c.named_parameters(prefix + k + ".")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {k}: shape {arr.shape} != expected {p.shape}")
            p.data = arr.copy()


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: SeededRng, init: str = "xavier", bias: bool = True):
        super().__init__()
        if init == "zeros":
            w = np.zeros((d_in, d_out))
        elif init == "xavier":
            w = rng.normal((d_in, d_out)) * math.sqrt(2.0 / (d_in + d_out))
        else:  # "small"
            w = rng.normal((d_in, d_out)) * 0.02
        self.w = self.param("w", w)
        self.b = self.param("b", np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.w
        return y + self.b if self.b is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, affine: bool = True):
        super().__init__()
        self.gain = self.param("gain", np.ones(dim)) if affine else None
        self.bias = self.param("bias", np.zeros(dim)) if affine else None

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


class ResidualMLP(Module):
    """x + W2 gelu(W1 LN(x))"""

    def __init__(self, dim: int, hidden: int, rng: SeededRng):
        super().__init__()
        self.norm = self.child("norm", LayerNorm(dim))
        self.fc1 = self.child("fc1", Linear(dim, hidden, rng.spawn(1)))
        self.fc2 = self.child("fc2", Linear(hidden, dim, rng.spawn(2)))

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.fc2(gelu(self.fc1(self.norm(x))))
