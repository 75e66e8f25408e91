from __future__ import annotations

import math

import numpy as np

from .numerics import Tensor, backward


def cosine_lr(step: int, budget: int, peak: float, floor_frac: float = 0.1) -> float:
    """Cosine decay from ``peak`` at step 0 to ``floor_frac * peak`` at ``budget``."""
    if budget <= 0:
        return peak
    frac = min(max(step / budget, 0.0), 1.0)
    floor = floor_frac * peak
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Adam with decoupled weight decay; state is plain arrays so it checkpoints cleanly."""

    def __init__(self, params: dict[str, Tensor], lr: float = 5e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0, grad_clip: float | None = None):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.t = 0
        self.m = {k: np.zeros(p.shape) for k, p in params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in params.items()}

    def step(self, loss: Tensor, lr: float | None = None) -> dict[str, np.ndarray]:
        grads = backward(loss)
        g = {k: grads.get(p, np.zeros(p.shape)) for k, p in self.params.items()}
        self.apply(g, lr)
        return g

    def apply(self, grads: dict[str, np.ndarray], lr: float | None = None):
        lr = self.lr if lr is None else lr
        if self.grad_clip is not None:
            norm = math.sqrt(sum(float((v * v).sum()) for v in grads.values()))
            if norm > self.grad_clip:
                grads = {k: v * (self.grad_clip / norm) for k, v in grads.items()}
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in sorted(self.params):
            p = self.params[k]
            g = grads[k]
            m = self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            v = self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = p.data - lr * update - lr * self.weight_decay * p.data

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"t": np.array([float(self.t)])}
        for k in self.params:
            out["m." + k] = self.m[k].copy()
            out["v." + k] = self.v[k].copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]):
        self.t = int(state["t"][0])
        for k in self.params:
            self.m[k] = np.array(state["m." + k], dtype=np.float64)
            self.v[k] = np.array(state["v." + k], dtype=np.float64)
