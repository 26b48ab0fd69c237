"""Distribution heads: Johnson's SU, Normal and Student-t.

Each head turns a raw network output vector into valid distribution
parameters through softplus-based link transforms, and provides log-density
(differentiable), closed-form quantiles/CDF, and seeded sampling.

Raw output layout for a horizon of H steps and n_p parameters: the flat
vector stacks all H entries of the first parameter, then all H of the
second, and so on ([h], [H+h], [2H+h], ...).

Johnson's SU convention used here: with u = (x - loc) / scale,

    pdf(x) = tailweight / (scale * sqrt(2*pi)) * 1/sqrt(1 + u^2)
             * exp(-0.5 * (skew + tailweight * asinh(u))^2)

i.e. the skewness parameter enters the exponent with a *positive* sign.
References that subtract it instead map onto this one via skew <-> -skew.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import stats
from scipy.special import ndtr, ndtri

from .diffcore import Tensor, asinh, gammaln, log, log1p, softplus
from .errors import ConfigurationError, NumericError

__all__ = [
    "LinkConfig", "JsuParams", "NormalParams", "StudentTParams",
    "JohnsonSUHead", "NormalHead", "StudentTHead", "make_head",
    "HEAD_KINDS",
]

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
HEAD_KINDS = ("jsu", "normal", "studentt")


@dataclass(frozen=True)
class LinkConfig:
    """Head kind plus the correction factors used inside the scale/shape links."""

    kind: str = "jsu"
    epsilon: float = 1e-3
    gamma: float = 3.0

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ConfigurationError(f"unknown head kind {self.kind!r}")
        if self.epsilon <= 0:
            raise ConfigurationError("epsilon must be positive")
        if self.gamma <= 0:
            raise ConfigurationError("gamma must be positive")


def _values(x):
    return x.values if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


class _ParamsBase:
    """Shared helpers for the per-head parameter containers."""

    def map(self, fn: Callable):
        """Apply `fn` to every parameter field (e.g. reshape, detach)."""
        return type(self)(*[fn(getattr(self, f)) for f in self.__dataclass_fields__])

    def numpy(self):
        return self.map(_values)


@dataclass
class JsuParams(_ParamsBase):
    loc: object
    scale: object
    tailweight: object
    skew: object

    def affine(self, shift, scale_factor):
        """Push the distribution through y = scale_factor * x + shift."""
        return JsuParams(self.loc * scale_factor + shift, self.scale * scale_factor,
                         self.tailweight, self.skew)


@dataclass
class NormalParams(_ParamsBase):
    loc: object
    scale: object

    def affine(self, shift, scale_factor):
        return NormalParams(self.loc * scale_factor + shift, self.scale * scale_factor)


@dataclass
class StudentTParams(_ParamsBase):
    loc: object
    scale: object
    df: object

    def affine(self, shift, scale_factor):
        return StudentTParams(self.loc * scale_factor + shift,
                              self.scale * scale_factor, self.df)


class _HeadBase:
    kind: str
    n_params: int
    param_names: tuple[str, ...]

    def __init__(self, cfg: LinkConfig | None = None):
        self.cfg = cfg if cfg is not None else LinkConfig(kind=self.kind)
        if self.cfg.kind != self.kind:
            raise ConfigurationError(
                f"link config is for {self.cfg.kind!r}, head is {self.kind!r}")

    # -- raw output slicing -------------------------------------------------
    def _slices(self, raw, horizon: int):
        n = _values(raw).shape[-1]
        if n != self.n_params * horizon:
            raise ConfigurationError(
                f"raw parameter vector has width {n}, expected "
                f"{self.n_params} * {horizon} = {self.n_params * horizon}")
        return [raw[..., p * horizon:(p + 1) * horizon] for p in range(self.n_params)]

    def nll(self, y, params):
        """Per-sample negative log-likelihood, summed over the horizon."""
        lp = self.logpdf(y, params)
        vals = _values(lp)
        if not np.isfinite(vals).all():
            hour = int(np.argwhere(~np.isfinite(np.atleast_2d(vals)))[0][-1])
            raise NumericError(f"non-finite log-density at hour index {hour}")
        if isinstance(lp, Tensor) or np.ndim(vals) > 0:
            return -lp.sum(axis=-1) if isinstance(lp, Tensor) else -vals.sum(axis=-1)
        return -lp

    def quantiles_vector(self, params, probs: np.ndarray) -> np.ndarray:
        """Closed-form quantiles for array-valued params: output [*shape, len(probs)]."""
        probs = np.asarray(probs, dtype=np.float64)
        cols = params.map(lambda a: np.asarray(a, dtype=np.float64)[..., None])
        return self.quantile(probs, cols)


class JohnsonSUHead(_HeadBase):
    kind = "jsu"
    n_params = 4
    param_names = ("lambda", "sigma", "tau", "zeta")

    def transform(self, raw, horizon: int) -> JsuParams:
        eps, gam = self.cfg.epsilon, self.cfg.gamma
        loc_raw, scale_raw, tail_raw, skew_raw = self._slices(raw, horizon)
        return JsuParams(
            loc=loc_raw,
            scale=eps + gam * softplus(scale_raw),
            tailweight=1.0 + gam * softplus(tail_raw),
            skew=skew_raw,
        )

    def logpdf(self, x, p: JsuParams):
        u = (x - p.loc) / p.scale
        t = p.skew + p.tailweight * asinh(u)
        return (log(p.tailweight) - log(p.scale) - _HALF_LOG_2PI
                - 0.5 * log1p(u * u) - 0.5 * (t * t))

    def cdf(self, x, p: JsuParams) -> np.ndarray:
        p = p.numpy()
        u = (np.asarray(x, dtype=np.float64) - p.loc) / p.scale
        return ndtr(p.skew + p.tailweight * np.arcsinh(u))

    def quantile(self, u, p: JsuParams) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        if np.any(u <= 0.0) or np.any(u >= 1.0):
            raise ConfigurationError("quantile levels must lie strictly inside (0, 1)")
        p = p.numpy()
        z = ndtri(u)
        return p.loc + p.scale * np.sinh((z - p.skew) / p.tailweight)

    def sample(self, p: JsuParams, n: int, rng: np.random.Generator) -> np.ndarray:
        p = p.numpy()
        z = rng.standard_normal((n,) + np.shape(p.loc))
        return p.loc + p.scale * np.sinh((z - p.skew) / p.tailweight)


class NormalHead(_HeadBase):
    kind = "normal"
    n_params = 2
    param_names = ("mu", "sigma")

    def transform(self, raw, horizon: int) -> NormalParams:
        eps, gam = self.cfg.epsilon, self.cfg.gamma
        loc_raw, scale_raw = self._slices(raw, horizon)
        return NormalParams(loc=loc_raw, scale=eps + gam * softplus(scale_raw))

    def logpdf(self, x, p: NormalParams):
        u = (x - p.loc) / p.scale
        return -log(p.scale) - _HALF_LOG_2PI - 0.5 * (u * u)

    def cdf(self, x, p: NormalParams) -> np.ndarray:
        p = p.numpy()
        return ndtr((np.asarray(x, dtype=np.float64) - p.loc) / p.scale)

    def quantile(self, u, p: NormalParams) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        if np.any(u <= 0.0) or np.any(u >= 1.0):
            raise ConfigurationError("quantile levels must lie strictly inside (0, 1)")
        p = p.numpy()
        return p.loc + p.scale * ndtri(u)

    def sample(self, p: NormalParams, n: int, rng: np.random.Generator) -> np.ndarray:
        p = p.numpy()
        z = rng.standard_normal((n,) + np.shape(p.loc))
        return p.loc + p.scale * z


class StudentTHead(_HeadBase):
    kind = "studentt"
    n_params = 3
    param_names = ("mu", "sigma", "nu")

    def transform(self, raw, horizon: int) -> StudentTParams:
        eps, gam = self.cfg.epsilon, self.cfg.gamma
        loc_raw, scale_raw, df_raw = self._slices(raw, horizon)
        # df > 2 keeps the variance finite, which Monte-Carlo quantile
        # extraction relies on; the 1e-6 offset preserves strict inequality
        # even when softplus underflows against the 2.0
        return StudentTParams(
            loc=loc_raw,
            scale=eps + gam * softplus(scale_raw),
            df=2.0 + 1e-6 + softplus(df_raw),
        )

    def logpdf(self, x, p: StudentTParams):
        u = (x - p.loc) / p.scale
        half = (p.df + 1.0) / 2.0
        return (gammaln(half) - gammaln(p.df / 2.0) - 0.5 * log(p.df)
                - 0.5 * math.log(math.pi) - log(p.scale)
                - half * log1p(u * u / p.df))

    def cdf(self, x, p: StudentTParams) -> np.ndarray:
        p = p.numpy()
        u = (np.asarray(x, dtype=np.float64) - p.loc) / p.scale
        return stats.t.cdf(u, p.df)

    def quantile(self, u, p: StudentTParams) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        if np.any(u <= 0.0) or np.any(u >= 1.0):
            raise ConfigurationError("quantile levels must lie strictly inside (0, 1)")
        p = p.numpy()
        return p.loc + p.scale * stats.t.ppf(u, p.df)

    def sample(self, p: StudentTParams, n: int, rng: np.random.Generator) -> np.ndarray:
        p = p.numpy()
        t = rng.standard_t(np.broadcast_to(p.df, (n,) + np.shape(p.df)))
        return p.loc + p.scale * t


_HEADS = {"jsu": JohnsonSUHead, "normal": NormalHead, "studentt": StudentTHead}


def make_head(cfg: LinkConfig | str) -> _HeadBase:
    if isinstance(cfg, str):
        cfg = LinkConfig(kind=cfg)
    try:
        return _HEADS[cfg.kind](cfg)
    except KeyError:
        raise ConfigurationError(f"unknown head kind {cfg.kind!r}") from None
