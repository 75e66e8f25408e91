"""Random differentiable graphs for gradient checking."""

from __future__ import annotations

import numpy as np

from malt.numerics import SeededRng, Tensor
from malt.numerics import tensor as T


def _unary(rng: SeededRng):
    ops = [
        lambda x: T.tanh(x),
        lambda x: T.sigmoid(x),
        lambda x: T.silu(x),
        lambda x: T.gelu(x),
        lambda x: T.exp(T.tanh(x)),
        lambda x: T.log(x * x + 1.0),
        lambda x: T.sqrt(x * x + 0.5),
        lambda x: x / (x * x + 1.0),
        lambda x: T.power(x * x + 1.0, 1.5),
        lambda x: T.softmax(x, axis=-1) * 3.0,
        lambda x: T.layer_norm(x),
        lambda x: -x * 0.7,
        lambda x: T.mean(x, axis=-1, keepdims=True) + x,
        lambda x: T.tsum(x, axis=0, keepdims=True) * x,
        lambda x: T.permute(T.permute(x, (1, 0)) * 1.3, (1, 0)),
        lambda x: T.reshape(T.reshape(x, (-1,)) + 0.1, x.shape),
        lambda x: T.concat([x[:, :1], T.tanh(x[:, 1:])], axis=1),
        lambda x: x[::-1] * x,
        lambda x: T.getitem(x, np.array([1, 0] + list(range(x.shape[0]))[:x.shape[0] - 2]))
        * x,
    ]
    return ops[rng.integers(0, len(ops))]


def random_graph(seed: int):
    """Returns ``(f, x0)`` where ``f`` maps a (r, c) tensor to a scalar."""
    rng = SeededRng(seed, 77)
    r, c = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    x0 = rng.normal((r, c))
    n_ops = int(rng.integers(3, 7))
    consts = [rng.spawn(i).normal((r, c)) for i in range(n_ops)]
    mats = [rng.spawn(100 + i).normal((c, c)) * 0.7 for i in range(n_ops)]
    plan = []
    for i in range(n_ops):
        kind = int(rng.integers(0, 4))
        plan.append((kind, _unary(rng.spawn(200 + i)), consts[i], mats[i]))

    def f(x: Tensor) -> Tensor:
        h = x
        for kind, op, cst, m in plan:
            if kind == 0:
                h = op(h)
            elif kind == 1:
                h = op(h) + h * Tensor(cst)
            elif kind == 2:
                h = T.matmul(op(h), Tensor(m))
            else:
                h = op(h) * T.tanh(x)
            # keep activations O(1) so no op saturates or overflows
            h = h * T.power(T.mean(h * h) + 1.0, -0.5)
        return T.mean(h * h) + T.mean(h)

    return f, x0
