"""Adam optimizer with bias correction.

Defaults follow the common convention (beta1=0.9, beta2=0.999, eps=1e-8);
learning rate is the only hyperparameter exposed to grid search.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from ..errors import ConfigurationError, NumericError
from .tensor import Parameter

__all__ = ["AdamState", "Adam"]


@dataclass
class AdamState:
    """Per-parameter moment estimates and step counter."""

    m: np.ndarray
    v2: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        if len({id(p) for p in self.params}) != len(self.params):
            raise ConfigurationError("a parameter was registered with Adam more than once")
        for hp, name in ((lr, "lr"), (beta1, "beta1"), (beta2, "beta2"), (eps, "eps")):
            if hp <= 0:
                raise ConfigurationError(f"Adam {name} must be positive, got {hp}")
        self.states = [
            AdamState(m=np.zeros_like(p.values), v2=np.zeros_like(p.values),
                      lr=lr, beta1=beta1, beta2=beta2, eps=eps)
            for p in self.params
        ]

    def step(self) -> None:
        """Apply one bias-corrected Adam update and zero the gradients."""
        for p, s in zip(self.params, self.states):
            g = p.grad
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for parameter {p.name!r}")
            s.t += 1
            s.m = s.beta1 * s.m + (1.0 - s.beta1) * g
            s.v2 = s.beta2 * s.v2 + (1.0 - s.beta2) * g * g
            m_hat = s.m / (1.0 - s.beta1 ** s.t)
            v_hat = s.v2 / (1.0 - s.beta2 ** s.t)
            p.values -= s.lr * m_hat / (np.sqrt(v_hat) + s.eps)
            if not np.isfinite(p.values).all():
                raise NumericError(f"non-finite values in parameter {p.name!r} after update")
        self.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
