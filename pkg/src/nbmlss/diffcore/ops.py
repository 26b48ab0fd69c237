"""Array/Tensor-generic operations.

The distribution heads are written once against these helpers so the same
formula serves both the differentiable training path (``Tensor`` inputs) and
plain numpy evaluation.  Each helper dispatches on input type.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from ..errors import ConfigurationError, NumericError
from .tensor import Parameter, Tensor

__all__ = [
    "log", "exp", "log1p", "sqrt", "asinh", "softplus", "softplus_inverse",
    "gammaln", "relu", "dense_forward", "DropoutMask", "dropout_apply",
]


def log(x):
    return x.log() if isinstance(x, Tensor) else np.log(x)


def exp(x):
    return x.exp() if isinstance(x, Tensor) else np.exp(x)


def log1p(x):
    return x.log1p() if isinstance(x, Tensor) else np.log1p(x)


def sqrt(x):
    return x.sqrt() if isinstance(x, Tensor) else np.sqrt(x)


def asinh(x):
    # numpy's arcsinh already uses the log(u + sqrt(1+u^2)) form with the
    # large-|u| safe branch
    return x.asinh() if isinstance(x, Tensor) else np.arcsinh(x)


def softplus(x):
    """log(1 + e^x), overflow-safe in both tails."""
    if isinstance(x, Tensor):
        return x.softplus()
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus_inverse(y):
    """Inverse of softplus on y > 0 (numpy only); softplus(result) == y."""
    y = np.asarray(y, dtype=np.float64)
    return y + np.log1p(-np.exp(-y))


def gammaln(x):
    return x.gammaln() if isinstance(x, Tensor) else special.gammaln(x)


def relu(x):
    return x.relu() if isinstance(x, Tensor) else np.maximum(x, 0.0)


def dense_forward(x, weights, bias=None):
    """Affine map ``x @ weights + bias`` with shape and finiteness checks.

    Parameters
    ----------
    x : [B, I] array or Tensor
    weights : [I, O] Tensor (typically a Parameter)
    bias : [O] Tensor or None
    """
    xv = x.values if isinstance(x, Tensor) else np.asarray(x)
    wv = weights.values if isinstance(weights, Tensor) else np.asarray(weights)
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[0]:
        raise ConfigurationError(
            f"dense shapes do not conform: x {xv.shape} vs weights {wv.shape}")
    if bias is not None:
        bv = bias.values if isinstance(bias, Tensor) else np.asarray(bias)
        if bv.shape != (wv.shape[1],):
            raise ConfigurationError(
                f"bias shape {bv.shape} does not match output width {wv.shape[1]}")
    if not np.isfinite(xv).all():
        raise NumericError("non-finite input to dense layer")
    out = x @ weights
    if bias is not None:
        out = out + bias
    return out


@dataclass
class DropoutMask:
    """A drawn dropout pattern: binary mask plus inverted-dropout scaling."""

    keep_prob: float
    mask: np.ndarray
    mode: str = "train"  # train | eval

    @classmethod
    def draw(cls, shape, keep_prob: float, rng: np.random.Generator,
             mode: str = "train") -> "DropoutMask":
        if not 0.0 < keep_prob <= 1.0:
            raise ConfigurationError(f"keep_prob must be in (0, 1], got {keep_prob}")
        if mode not in ("train", "eval"):
            raise ConfigurationError(f"unknown dropout mode {mode!r}")
        if mode == "eval" or keep_prob == 1.0:
            mask = np.ones(shape, dtype=np.float64)
        else:
            mask = (rng.random(shape) < keep_prob).astype(np.float64)
        return cls(keep_prob=keep_prob, mask=mask, mode=mode)


def dropout_apply(x, mask: DropoutMask):
    """Inverted dropout: identity in eval mode, mask/keep_prob scaling in train."""
    if not 0.0 < mask.keep_prob <= 1.0:
        raise ConfigurationError(f"keep_prob must be in (0, 1], got {mask.keep_prob}")
    if mask.mode == "eval":
        return x
    return x * (mask.mask / mask.keep_prob)
