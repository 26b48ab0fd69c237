"""Ensemble aggregation, quantile extraction and probabilistic backtest metrics.

Quantile protocol: predictive quantiles are the 99 percentiles 1..99.  The
default production path draws a fixed budget of samples (10000) per test item
and takes empirical percentiles; closed-form quantiles are available behind a
flag.  Post-hoc sorting repairs any quantile crossing.

Ensembles aggregate either as a uniform probability mixture ("p": pool equal
sample counts from every member, then take percentiles) or by vincentization
("v": average the member quantile functions pointwise).

Metrics: CRPS approximated by the mean pinball loss over the 99 percentiles,
MAE on the median, central-interval coverage (PICP) with Kupiec's
unconditional-coverage likelihood-ratio test per hour of day, and the
multivariate Diebold-Mariano test on daily L1 norms of the CRPS loss panels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .errors import ConfigurationError

__all__ = [
    "PERCENTILES", "QUANTILE_LEVELS",
    "EnsembleSpec", "ForecastDistribution", "extract_quantiles", "quantile_panel",
    "pinball", "crps_panel", "crps", "mae", "picp", "coverage_bounds",
    "KupiecResult", "kupiec", "kupiec_hour_panel",
    "DmResult", "dm_test",
    "calibration_curve", "BacktestReport", "build_report", "climatology_quantiles",
]

PERCENTILES = np.arange(1, 100)           # 1..99
QUANTILE_LEVELS = PERCENTILES / 100.0
KUPIEC_CRITICAL = 3.841459                # chi-square(1) at significance 0.05


@dataclass(frozen=True)
class EnsembleSpec:
    members: int = 5
    mode: str = "p"       # p: probability mixture | v: vincentization
    n_samples: int = 10000
    seed: int = 0
    closed_form: bool = False

    def __post_init__(self):
        if self.members < 1:
            raise ConfigurationError("ensemble needs at least one member")
        if self.n_samples < 1000:
            raise ConfigurationError("n_samples must be >= 1000")
        if self.mode not in ("p", "v"):
            raise ConfigurationError(f"unknown aggregation mode {self.mode!r}")


@dataclass
class ForecastDistribution:
    """Per-day predictive distribution: member params plus cached quantiles."""

    date: object
    members: list                      # head params, arrays of length horizon
    quantiles: np.ndarray | None = None  # [horizon, 99], non-decreasing rows

    def ensure_quantiles(self, head, spec: EnsembleSpec,
                         rng: np.random.Generator | None = None) -> np.ndarray:
        if self.quantiles is None:
            self.quantiles = extract_quantiles(self.members, head, spec, rng=rng)
        return self.quantiles


def _member_draws(spec: EnsembleSpec) -> list[int]:
    """Equal draw counts per member; any remainder goes to the first members."""
    base, rem = divmod(spec.n_samples, spec.members)
    return [base + (1 if m < rem else 0) for m in range(spec.members)]


def extract_quantiles(members: list, head, spec: EnsembleSpec,
                      rng: np.random.Generator | None = None) -> np.ndarray:
    """The 99 predictive percentiles for one test item, [horizon, 99]."""
    if len(members) != spec.members:
        raise ConfigurationError(f"got {len(members)} member params, spec says {spec.members}")
    if rng is None:
        rng = np.random.default_rng(spec.seed)

    if spec.mode == "p":
        if spec.closed_form and spec.members == 1:
            q = head.quantiles_vector(members[0], QUANTILE_LEVELS)
        else:
            draws = [head.sample(p, n, rng) for p, n in zip(members, _member_draws(spec))]
            pooled = np.concatenate(draws, axis=0)
            q = np.percentile(pooled, PERCENTILES, axis=0)
            q = np.moveaxis(q, 0, -1)
    else:
        per_member = []
        for p in members:
            if spec.closed_form:
                per_member.append(head.quantiles_vector(p, QUANTILE_LEVELS))
            else:
                draws = head.sample(p, spec.n_samples, rng)
                per_member.append(np.moveaxis(np.percentile(draws, PERCENTILES, axis=0), 0, -1))
        q = np.mean(per_member, axis=0)
    return np.sort(q, axis=-1)


def quantile_panel(forecasts: list[ForecastDistribution], head,
                   spec: EnsembleSpec) -> np.ndarray:
    """Stacked [days, horizon, 99] quantiles, one independent rng per day."""
    out = []
    for d, fc in enumerate(forecasts):
        rng = np.random.default_rng([spec.seed, d])
        out.append(fc.ensure_quantiles(head, spec, rng=rng))
    return np.asarray(out)


# ---------------------------------------------------------------------------
# scores
# ---------------------------------------------------------------------------

def pinball(y, q_hat, alpha) -> np.ndarray:
    """alpha * (y - q) where y >= q, else (1 - alpha) * (q - y); broadcasts."""
    y = np.asarray(y, dtype=np.float64)
    q_hat = np.asarray(q_hat, dtype=np.float64)
    diff = y - q_hat
    return np.where(diff >= 0, alpha * diff, (alpha - 1.0) * diff)


def crps_panel(y: np.ndarray, quantiles: np.ndarray) -> np.ndarray:
    """Per-(day, hour) mean pinball loss over the 99 percentiles."""
    y = np.asarray(y, dtype=np.float64)
    if quantiles.shape[:-1] != y.shape or quantiles.shape[-1] != len(QUANTILE_LEVELS):
        raise ConfigurationError(f"quantile panel {quantiles.shape} does not match "
                                 f"targets {y.shape} with 99 levels")
    return pinball(y[..., None], quantiles, QUANTILE_LEVELS).mean(axis=-1)


def crps(y: np.ndarray, quantiles: np.ndarray) -> float:
    return float(crps_panel(y, quantiles).mean())


def mae(y: np.ndarray, quantiles: np.ndarray) -> float:
    """Mean absolute error of the median (the 50th percentile)."""
    q50 = quantiles[..., 49]
    return float(np.mean(np.abs(np.asarray(y) - q50)))


def coverage_bounds(coverage: float) -> tuple[int, int]:
    """Indices of the central-interval bounds on the 99-percentile grid."""
    lo = (1.0 - coverage) / 2.0 * 100.0
    hi = 100.0 - lo
    lo_i, hi_i = round(lo), round(hi)
    if not (math.isclose(lo, lo_i, abs_tol=1e-9) and 1 <= lo_i <= 99):
        raise ConfigurationError(
            f"coverage {coverage} needs the {lo:.4g}% bound, which is not on the "
            f"1..99 percentile grid")
    return int(lo_i) - 1, int(hi_i) - 1


def picp(y: np.ndarray, quantiles: np.ndarray, coverage: float) -> float:
    """Fraction of observations inside the central `coverage` interval."""
    lo, hi = coverage_bounds(coverage)
    y = np.asarray(y, dtype=np.float64)
    inside = (quantiles[..., lo] <= y) & (y <= quantiles[..., hi])
    return float(inside.mean())


@dataclass(frozen=True)
class KupiecResult:
    lr: float
    passed: bool
    hits: int
    n: int


def kupiec(hits: int, n: int, nominal: float) -> KupiecResult:
    """Unconditional-coverage likelihood ratio, evaluated in log space.

    Boundary counts (0 or n) use the 0 * log 0 = 0 convention; the test
    passes when the statistic stays below the chi-square(1) 5% critical
    value 3.841459.
    """
    if not 0.0 < nominal < 1.0:
        raise ConfigurationError("nominal coverage must lie in (0, 1)")
    if not 0 <= hits <= n:
        raise ConfigurationError(f"hits {hits} outside [0, {n}]")

    def loglik(p: float) -> float:
        ll = 0.0
        if n - hits > 0:
            ll += (n - hits) * math.log1p(-p) if p < 1.0 else -math.inf
        if hits > 0:
            ll += hits * math.log(p) if p > 0.0 else -math.inf
        return ll

    lr = -2.0 * (loglik(nominal) - loglik(hits / n))
    return KupiecResult(lr=lr, passed=bool(lr < KUPIEC_CRITICAL), hits=hits, n=n)


def kupiec_hour_panel(y: np.ndarray, quantiles: np.ndarray, coverage: float) -> int:
    """Kupiec applied per hour of day; returns how many hours are not rejected."""
    lo, hi = coverage_bounds(coverage)
    y = np.asarray(y, dtype=np.float64)
    inside = (quantiles[..., lo] <= y) & (y <= quantiles[..., hi])
    passed = 0
    for h in range(y.shape[1]):
        r = kupiec(int(inside[:, h].sum()), y.shape[0], coverage)
        passed += int(r.passed)
    return passed


@dataclass(frozen=True)
class DmResult:
    statistic: float
    p_value: float
    degenerate: bool
    mean_diff: float

    @property
    def better(self) -> int:
        """-1: first model's losses smaller, +1: larger, 0: identical."""
        return int(np.sign(self.mean_diff))


def dm_test(loss_a: np.ndarray, loss_b: np.ndarray, norm_ord: int = 1,
            two_sided: bool = False) -> DmResult:
    """Diebold-Mariano test on daily loss-norm differences.

    With delta_d = ||loss_a[d]|| - ||loss_b[d]|| and the statistic
    sqrt(N) * mean(delta) / std(delta), the one-sided p-value is the lower
    tail P(Z <= statistic): small p is evidence that the first model's losses
    are significantly smaller.  Days with identical norms in every entry give
    a degenerate result carrying only the sign of the mean difference.
    """
    a = np.asarray(loss_a, dtype=np.float64)
    b = np.asarray(loss_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigurationError(f"loss panels differ in shape: {a.shape} vs {b.shape}")
    delta = (np.linalg.norm(a, ord=norm_ord, axis=1)
             - np.linalg.norm(b, ord=norm_ord, axis=1))
    n = delta.size
    mean = float(delta.mean())
    std = float(delta.std(ddof=1)) if n > 1 else 0.0
    if std == 0.0:
        return DmResult(statistic=math.nan, p_value=math.nan, degenerate=True,
                        mean_diff=mean)
    stat = math.sqrt(n) * mean / std
    p = float(ndtr(stat))
    if two_sided:
        p = 2.0 * min(p, 1.0 - p)
    return DmResult(statistic=stat, p_value=p, degenerate=False, mean_diff=mean)


def calibration_curve(y: np.ndarray, quantiles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nominal vs empirical CDF coverage over the 99 percentiles."""
    y = np.asarray(y, dtype=np.float64)
    empirical = (y[..., None] <= quantiles).mean(axis=tuple(range(y.ndim)))
    return QUANTILE_LEVELS.copy(), empirical


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class BacktestReport:
    picp50: float
    kupiec50: int
    picp90: float
    kupiec90: int
    picp98: float
    kupiec98: int
    mae: float
    crps: float
    n_days: int = 0

    def to_dict(self) -> dict:
        return {"picp50": self.picp50, "kupiec50": self.kupiec50,
                "picp90": self.picp90, "kupiec90": self.kupiec90,
                "picp98": self.picp98, "kupiec98": self.kupiec98,
                "mae": self.mae, "crps": self.crps, "n_days": self.n_days}


def build_report(y: np.ndarray, quantiles: np.ndarray) -> BacktestReport:
    """Backtest metrics over a [days, horizon] target panel."""
    return BacktestReport(
        picp50=picp(y, quantiles, 0.50), kupiec50=kupiec_hour_panel(y, quantiles, 0.50),
        picp90=picp(y, quantiles, 0.90), kupiec90=kupiec_hour_panel(y, quantiles, 0.90),
        picp98=picp(y, quantiles, 0.98), kupiec98=kupiec_hour_panel(y, quantiles, 0.98),
        mae=mae(y, quantiles), crps=crps(y, quantiles), n_days=int(np.asarray(y).shape[0]),
    )


def climatology_quantiles(train_y: np.ndarray) -> np.ndarray:
    """Per-hour empirical percentiles of the training targets, [horizon, 99].

    The naive unconditional baseline: every test day gets the same quantile
    vector.
    """
    q = np.percentile(np.asarray(train_y, dtype=np.float64), PERCENTILES, axis=0)
    return np.sort(np.moveaxis(q, 0, -1), axis=-1)
