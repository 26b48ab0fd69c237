"""Central finite-difference gradients, used as the independent oracle for
checking the analytic backward pass."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Parameter

__all__ = ["finite_difference_gradient", "max_relative_error"]


def finite_difference_gradient(loss_fn: Callable[[], float],
                               params: Sequence[Parameter],
                               h: float = 1e-5) -> list[np.ndarray]:
    """Estimate d loss / d p for every entry of every parameter.

    `loss_fn` must be a pure function of the current parameter values (it is
    re-evaluated 2 times per scalar entry).  Central differences with step h.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p.values)
        flat = p.values.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(loss_fn())
            flat[i] = orig - h
            f_minus = float(loss_fn())
            flat[i] = orig
            gf[i] = (f_plus - f_minus) / (2.0 * h)
        grads.append(g)
    return grads


def max_relative_error(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray],
                       floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all entries."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
