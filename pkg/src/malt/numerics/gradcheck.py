from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, backward, no_grad


def _ridders(fn: Callable[[float], float], h: float, shrink: float = 1.4, levels: int = 10) -> float:
    """Polynomial extrapolation of central differences to h -> 0 (Ridders' method).

    Keeps the tableau entry with the smallest error estimate and stops once
    higher orders get worse, so one call copes with both stiff and flat
    coordinates.
    """
    a = np.zeros((levels, levels))
    a[0, 0] = (fn(h) - fn(-h)) / (2 * h)
    best, err = a[0, 0], np.inf
    s2 = shrink * shrink
    for i in range(1, levels):
        h /= shrink
        a[0, i] = (fn(h) - fn(-h)) / (2 * h)
        fac = s2
        for j in range(1, i + 1):
            a[j, i] = (a[j - 1, i] * fac - a[j - 1, i - 1]) / (fac - 1.0)
            fac *= s2
            e = max(abs(a[j, i] - a[j - 1, i]), abs(a[j, i] - a[j - 1, i - 1]))
            if e <= err:
                err, best = e, a[j, i]
        if abs(a[i, i] - a[i - 1, i - 1]) >= 2.0 * err:
            break
    return best


def _central(fn: Callable[[float], float], h: float, order) -> float:
    if order == "ridders":
        return _ridders(fn, h)
    if order == 2:
        return (fn(h) - fn(-h)) / (2 * h)
    if order == 4:
        # five-point stencil: truncation O(h^4), so a larger h keeps roundoff small
        return (-fn(2 * h) + 8 * fn(h) - 8 * fn(-h) + fn(-2 * h)) / (12 * h)
    raise ValueError(f"order must be 2, 4 or 'ridders', got {order!r}")


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x,
    h: float = 1e-5,
    coords=None,
    order=2,
) -> float:
    """Max relative error between autodiff and central differences.

    ``f`` maps a tensor to a scalar tensor. ``coords`` optionally restricts the
    check to a subset of flat indices of ``x``. The error per coordinate is
    ``|fd - ad| / (|ad| + 1e-8)``. ``order=4`` uses the five-point stencil;
    ``order="ridders"`` extrapolates a sequence of steps starting at ``h``,
    which resolves gradients near 1e-9 that a single 3-point difference drowns
    in roundoff.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    out = f(leaf)
    grads = backward(out)
    ad = grads.get(leaf, np.zeros_like(x0)).reshape(-1)

    flat = x0.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    with no_grad():
        for i in idx:
            def at(d, i=i):
                xp = flat.copy()
                xp[i] += d
                return f(Tensor(xp.reshape(x0.shape))).item()

            fd = _central(at, h, order)
            err = abs(fd - ad[i]) / (abs(ad[i]) + 1e-8)
            worst = max(worst, err)
    return worst


def param_finite_diff_check(loss_fn: Callable[[], Tensor], param: Tensor, coords, h: float = 1e-5,
                            order=2) -> float:
    """Same measure for a parameter tensor that ``loss_fn`` closes over.

    The parameter is perturbed in place and restored.
    """
    loss = loss_fn()
    ad = backward(loss).get(param, np.zeros(param.shape)).reshape(-1)
    flat = param.data.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in coords:
            old = flat[i]

            def at(d):
                flat[i] = old + d
                return loss_fn().item()

            fd = _central(at, h, order)
            flat[i] = old
            worst = max(worst, abs(fd - ad[i]) / (abs(ad[i]) + 1e-8))
    return worst
