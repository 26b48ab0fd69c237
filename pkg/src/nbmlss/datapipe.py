"""Hourly market data ingestion and daily multi-horizon sample construction.

Input CSVs carry the header ``timestamp,price,load_fc,wind_fc,solar_fc`` with
ISO-8601 UTC timestamps on the hour.  Each eligible day d becomes one sample
with a fixed 147-wide feature layout:

    positions   0- 23  hourly price of day d-1
    positions  24- 47  hourly price of day d-2
    positions  48- 71  hourly price of day d-7
    positions  72- 95  hourly load forecast of day d
    positions  96-119  hourly wind forecast of day d
    positions 120-143  hourly solar forecast of day d
    position  144      sin(2*pi*dow/7), day-of-week code 0 = Monday
    position  145      cos(2*pi*dow/7)
    position  146      temporal age, (d - first sample day) / 365.25 years

and the 24 hourly prices of day d as the target vector.

Two scalers are provided: conventional z-score standardization fitted on the
training samples (population 1/N standard deviation, floored at 1e-6), and a
reversible per-sample normalization of the 72 lagged-price features whose
statistics are later inverted on the predictive distribution as an affine
pushforward.  Exogenous and calendar columns are z-scored in both setups.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError

__all__ = [
    "CSV_HEADER", "N_FEATURES", "HORIZON", "LAG_FEATURES",
    "HourlySeries", "IngestReport", "load_csv",
    "DaySample", "SampleSet", "build_samples", "feature_names", "target_names",
    "ZScoreScaler", "RevinScaler", "RevinStats", "make_scaler",
    "fit_zscore", "revin_normalize", "revin_denorm_params",
]

CSV_HEADER = ("timestamp", "price", "load_fc", "wind_fc", "solar_fc")
HORIZON = 24
N_FEATURES = 147
LAG_FEATURES = slice(0, 72)
SD_FLOOR = 1e-6

_LAG_DAYS = (1, 2, 7)
_EXO_COLUMNS = ("load_fc", "wind_fc", "solar_fc")


def feature_names() -> list[str]:
    names = [f"price_lag{lag}_h{h:02d}" for lag in _LAG_DAYS for h in range(HORIZON)]
    names += [f"{col}_h{h:02d}" for col in _EXO_COLUMNS for h in range(HORIZON)]
    names += ["dow_sin", "dow_cos", "temporal_age"]
    return names


def target_names() -> list[str]:
    return [f"y_h{h:02d}" for h in range(HORIZON)]


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

@dataclass
class HourlySeries:
    """Aligned hourly series on a gap-free, strictly increasing hour grid."""

    timestamps: np.ndarray  # datetime64[h]
    price: np.ndarray
    load_fc: np.ndarray
    wind_fc: np.ndarray
    solar_fc: np.ndarray

    def __post_init__(self):
        n = len(self.timestamps)
        for col in ("price", "load_fc", "wind_fc", "solar_fc"):
            if len(getattr(self, col)) != n:
                raise DataError(f"column {col!r} has length {len(getattr(self, col))}, "
                                f"expected {n}")
        if n > 1:
            steps = np.diff(self.timestamps.astype("datetime64[h]").astype(np.int64))
            if not (steps == 1).all():
                raise DataError("timestamps are not a strictly increasing hourly grid")

    def __len__(self) -> int:
        return len(self.timestamps)


@dataclass
class IngestReport:
    n_rows: int = 0
    interpolated: list = field(default_factory=list)   # datetime64[h] of filled hours
    rejected_days: list = field(default_factory=list)  # datetime64[D] of days in long gaps
    duplicates_merged: list = field(default_factory=list)


def _parse_timestamp(raw: str, lineno: int) -> int:
    """ISO-8601 UTC timestamp -> hours since epoch."""
    text = raw.strip().replace("Z", "+00:00")
    try:
        dt = datetime.fromisoformat(text)
    except ValueError:
        raise DataError(f"line {lineno}: unparsable timestamp {raw!r}") from None
    if dt.tzinfo is not None:
        if dt.utcoffset().total_seconds() != 0.0:
            raise DataError(f"line {lineno}: timestamp {raw!r} is not UTC")
        dt = dt.replace(tzinfo=None)
    if dt.minute or dt.second or dt.microsecond:
        raise DataError(f"line {lineno}: timestamp {raw!r} is not on the hour")
    epoch = datetime(1970, 1, 1)
    return int((dt - epoch).total_seconds()) // 3600


def load_csv(path: str | Path, *, missing: str = "interpolate", max_gap_hours: int = 3,
             duplicates: str = "error") -> tuple[HourlySeries, IngestReport]:
    """Parse an hourly market CSV into a gap-free series plus an ingest report.

    Gap policy (``missing="interpolate"``): runs of up to `max_gap_hours`
    missing hours are filled by linear interpolation; longer runs are also
    filled, but every day they touch is recorded in ``report.rejected_days``
    and excluded from sample construction.  ``missing="error"`` rejects any
    gap.  Duplicated timestamps are an error by default; ``duplicates="mean"``
    averages them (the DST-fold case).
    """
    if missing not in ("interpolate", "error"):
        raise ConfigurationError(f"unknown missing-hour policy {missing!r}")
    if duplicates not in ("error", "mean"):
        raise ConfigurationError(f"unknown duplicate policy {duplicates!r}")

    path = Path(path)
    if not path.exists():
        raise DataError(f"input file does not exist: {path}")

    hours: list[int] = []
    rows: list[tuple[float, float, float, float]] = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: file is empty") from None
        if tuple(h.strip() for h in header) != CSV_HEADER:
            raise DataError(f"{path}: header {header!r} does not match expected "
                            f"{','.join(CSV_HEADER)!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(CSV_HEADER):
                raise DataError(f"line {lineno}: expected {len(CSV_HEADER)} fields, "
                                f"got {len(row)}")
            hours.append(_parse_timestamp(row[0], lineno))
            try:
                rows.append(tuple(float(v) for v in row[1:]))
            except ValueError:
                raise DataError(f"line {lineno}: non-numeric value in {row[1:]!r}") from None

    if not rows:
        raise DataError(f"{path}: no data rows")

    hours_arr = np.asarray(hours, dtype=np.int64)
    data = np.asarray(rows, dtype=np.float64)
    order = np.argsort(hours_arr, kind="stable")
    hours_arr, data = hours_arr[order], data[order]

    report = IngestReport(n_rows=len(rows))

    # duplicates
    dup = np.flatnonzero(np.diff(hours_arr) == 0)
    if dup.size:
        if duplicates == "error":
            ts = hours_arr[dup[0]].astype("datetime64[h]")
            raise DataError(f"duplicated timestamp {ts}")
        keep_hours, inverse = np.unique(hours_arr, return_inverse=True)
        merged = np.zeros((len(keep_hours), data.shape[1]))
        counts = np.bincount(inverse).astype(np.float64)
        for j in range(data.shape[1]):
            merged[:, j] = np.bincount(inverse, weights=data[:, j]) / counts
        report.duplicates_merged = list(hours_arr[dup].astype("datetime64[h]"))
        hours_arr, data = keep_hours, merged

    # gaps
    full = np.arange(hours_arr[0], hours_arr[-1] + 1, dtype=np.int64)
    if len(full) != len(hours_arr):
        if missing == "error":
            first_gap = hours_arr[np.flatnonzero(np.diff(hours_arr) > 1)[0]] + 1
            raise DataError(f"missing hour at {first_gap.astype('datetime64[h]')}")
        present = np.isin(full, hours_arr)
        filled = np.empty((len(full), data.shape[1]))
        for j in range(data.shape[1]):
            filled[:, j] = np.interp(full, hours_arr, data[:, j])
        missing_hours = full[~present]
        report.interpolated = list(missing_hours.astype("datetime64[h]"))
        # runs longer than max_gap_hours invalidate the days they touch
        run_edges = np.flatnonzero(np.diff(missing_hours) > 1)
        starts = np.concatenate(([0], run_edges + 1))
        ends = np.concatenate((run_edges, [len(missing_hours) - 1]))
        bad_days: set = set()
        for s, e in zip(starts, ends):
            if missing_hours[e] - missing_hours[s] + 1 > max_gap_hours:
                for h in range(int(missing_hours[s]), int(missing_hours[e]) + 1):
                    bad_days.add(h // 24)
        report.rejected_days = sorted(np.asarray(sorted(bad_days), dtype="int64")
                                      .astype("datetime64[D]"))
        hours_arr, data = full, filled

    series = HourlySeries(
        timestamps=hours_arr.astype("datetime64[h]"),
        price=data[:, 0], load_fc=data[:, 1], wind_fc=data[:, 2], solar_fc=data[:, 3],
    )
    return series, report


# ---------------------------------------------------------------------------
# daily samples
# ---------------------------------------------------------------------------

@dataclass
class DaySample:
    day_index: int
    date: np.datetime64
    x: np.ndarray  # [147]
    y: np.ndarray  # [24]
    feature_names: list[str]


@dataclass
class SampleSet:
    """Vectorized view over all daily samples (one row per eligible day)."""

    x: np.ndarray       # [N, 147]
    y: np.ndarray       # [N, 24]
    dates: np.ndarray   # [N] datetime64[D]
    day_index: np.ndarray  # [N] int64, day offset within the trimmed series
    feature_names: list[str] = field(default_factory=feature_names)
    target_names: list[str] = field(default_factory=target_names)

    def __len__(self) -> int:
        return len(self.dates)

    def __getitem__(self, i: int) -> DaySample:
        return DaySample(day_index=int(self.day_index[i]), date=self.dates[i],
                         x=self.x[i], y=self.y[i], feature_names=self.feature_names)

    def subset(self, mask: np.ndarray) -> "SampleSet":
        return SampleSet(self.x[mask], self.y[mask], self.dates[mask],
                         self.day_index[mask], self.feature_names, self.target_names)

    def before(self, date) -> "SampleSet":
        return self.subset(self.dates < np.datetime64(date, "D"))

    def between(self, start, end) -> "SampleSet":
        """Samples with start <= date <= end."""
        m = (self.dates >= np.datetime64(start, "D")) & (self.dates <= np.datetime64(end, "D"))
        return self.subset(m)


def build_samples(series: HourlySeries, rejected_days=()) -> SampleSet:
    """Assemble one sample per eligible day via moving windows over the series.

    A day is eligible when the series covers it fully, its price lags at
    d-1 / d-2 / d-7 exist, and none of those source days was rejected during
    ingestion.
    """
    hours = series.timestamps.astype("datetime64[h]").astype(np.int64)
    hod = hours % 24
    first_candidates = np.flatnonzero(hod == 0)
    if first_candidates.size == 0:
        warnings.warn("series contains no full day; no samples built")
        return _empty_sample_set()
    first = int(first_candidates[0])
    n_days = (len(hours) - first) // 24
    if n_days < 8:
        warnings.warn(f"series spans only {n_days} full days; at least 8 are needed "
                      f"for the d-7 price lag")
        return _empty_sample_set()

    span = slice(first, first + n_days * 24)
    day_grid = lambda col: col[span].reshape(n_days, HORIZON)
    price_d = day_grid(series.price)
    exo_d = [day_grid(getattr(series, col)) for col in _EXO_COLUMNS]
    day_nums = hours[span][::24] // 24  # days since epoch, one per day row

    rejected = {np.datetime64(d, "D") for d in rejected_days}
    day_dates = day_nums.astype("datetime64[D]")
    bad = np.isin(day_dates, sorted(rejected)) if rejected else np.zeros(n_days, bool)

    candidates = np.arange(7, n_days)
    ok = ~(bad[candidates] | bad[candidates - 1] | bad[candidates - 2] | bad[candidates - 7])
    idx = candidates[ok]
    if idx.size == 0:
        warnings.warn("no eligible days after applying lag and rejection constraints")
        return _empty_sample_set()

    n = idx.size
    x = np.empty((n, N_FEATURES))
    x[:, 0:24] = price_d[idx - 1]
    x[:, 24:48] = price_d[idx - 2]
    x[:, 48:72] = price_d[idx - 7]
    for k, block in enumerate(exo_d):
        x[:, 72 + 24 * k: 96 + 24 * k] = block[idx]
    dow = (day_nums[idx] + 3) % 7  # epoch day 0 was a Thursday; Monday -> 0
    x[:, 144] = np.sin(2.0 * math.pi * dow / 7.0)
    x[:, 145] = np.cos(2.0 * math.pi * dow / 7.0)
    x[:, 146] = (idx - idx[0]) / 365.25
    y = price_d[idx]

    return SampleSet(x=x, y=y, dates=day_dates[idx], day_index=idx.astype(np.int64))


def _empty_sample_set() -> SampleSet:
    return SampleSet(x=np.empty((0, N_FEATURES)), y=np.empty((0, HORIZON)),
                     dates=np.empty(0, dtype="datetime64[D]"),
                     day_index=np.empty(0, dtype=np.int64))


# ---------------------------------------------------------------------------
# scaling
# ---------------------------------------------------------------------------

def _floored_std(values: np.ndarray, axis, what: str) -> np.ndarray:
    std = values.std(axis=axis)  # population (1/N) convention
    floored = np.maximum(std, SD_FLOOR)
    n_floored = int(np.count_nonzero(std < SD_FLOOR))
    if n_floored:
        warnings.warn(f"{n_floored} {what} std value(s) below {SD_FLOOR}; floored")
    return floored


@dataclass
class RevinStats:
    """Per-sample location/scale of the lagged-price block."""

    mu: np.ndarray  # [N] or scalar
    sd: np.ndarray  # [N] or scalar, >= SD_FLOOR

    def take(self, idx) -> "RevinStats":
        return RevinStats(np.asarray(self.mu)[idx], np.asarray(self.sd)[idx])

    def column(self, a: np.ndarray) -> np.ndarray:
        """Reshape a stat so it broadcasts against [N, H] panels."""
        a = np.asarray(a, dtype=np.float64)
        return a[:, None] if a.ndim == 1 else a


class ZScoreScaler:
    """Global per-feature / per-target standardization fitted on training rows."""

    kind = "zscore"

    def __init__(self):
        self.feature_mean = None
        self.feature_std = None
        self.target_mean = None
        self.target_std = None

    def fit(self, x: np.ndarray, y: np.ndarray) -> "ZScoreScaler":
        self.feature_mean = x.mean(axis=0)
        self.feature_std = _floored_std(x, 0, "feature")
        self.target_mean = y.mean(axis=0)
        self.target_std = _floored_std(y, 0, "target")
        return self

    def _check(self):
        if self.feature_mean is None:
            raise ConfigurationError("scaler used before fit")

    def transform_x(self, x: np.ndarray) -> tuple[np.ndarray, None]:
        self._check()
        return (x - self.feature_mean) / self.feature_std, None

    def inverse_x(self, xm: np.ndarray, stats=None) -> np.ndarray:
        self._check()
        return xm * self.feature_std + self.feature_mean

    def transform_y(self, y: np.ndarray, stats=None) -> np.ndarray:
        self._check()
        return (y - self.target_mean) / self.target_std

    def inverse_y(self, ym: np.ndarray, stats=None) -> np.ndarray:
        self._check()
        return ym * self.target_std + self.target_mean

    def denorm_params(self, params, stats=None):
        """Affine pushforward of model-space distribution params to price units."""
        self._check()
        return params.affine(self.target_mean, self.target_std)

    def model_space_stats(self, stats=None) -> RevinStats | None:
        """Stats to hand the model's forward pass (none: scaling is external)."""
        return None

    def to_dict(self) -> dict:
        self._check()
        return {"kind": self.kind,
                "feature_mean": self.feature_mean.tolist(),
                "feature_std": self.feature_std.tolist(),
                "target_mean": self.target_mean.tolist(),
                "target_std": self.target_std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ZScoreScaler":
        s = cls()
        s.feature_mean = np.asarray(d["feature_mean"])
        s.feature_std = np.asarray(d["feature_std"])
        s.target_mean = np.asarray(d["target_mean"])
        s.target_std = np.asarray(d["target_std"])
        return s


def revin_normalize(x: np.ndarray, lag_features: slice = LAG_FEATURES,
                    sd_floor: float = SD_FLOOR) -> tuple[np.ndarray, RevinStats]:
    """Replace the lagged-price block by its per-sample standardization.

    Works on a single sample [n_f] or a batch [N, n_f]; other columns pass
    through unchanged.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    lags = xb[:, lag_features]
    mu = lags.mean(axis=1)
    sd = lags.std(axis=1)
    n_floored = int(np.count_nonzero(sd < sd_floor))
    if n_floored:
        warnings.warn(f"{n_floored} sample(s) with lag-block std below {sd_floor}; floored")
    sd = np.maximum(sd, sd_floor)
    out = xb.copy()
    out[:, lag_features] = (lags - mu[:, None]) / sd[:, None]
    if single:
        return out[0], RevinStats(mu=float(mu[0]), sd=float(sd[0]))
    return out, RevinStats(mu=mu, sd=sd)


def revin_denorm_params(params, stats: RevinStats):
    """Map a model-space predictive distribution back to the original scale.

    Location and scale follow y = sd * x + mu; pure shape parameters
    (tailweight, skewness, degrees of freedom) are unchanged -- the affine
    pushforward stays inside each family.
    """
    mu = np.asarray(stats.mu, dtype=np.float64)
    sd = np.asarray(stats.sd, dtype=np.float64)
    if mu.ndim == 1:
        mu, sd = mu[:, None], sd[:, None]
    return params.affine(mu, sd)


class RevinScaler:
    """Per-sample normalization of price lags, global z-score elsewhere."""

    kind = "revin"

    def __init__(self, lag_features: slice = LAG_FEATURES, sd_floor: float = SD_FLOOR):
        self.lag_features = lag_features
        self.sd_floor = sd_floor
        self.other_mean = None
        self.other_std = None

    def _other_idx(self, n_features: int) -> np.ndarray:
        sel = np.ones(n_features, dtype=bool)
        sel[self.lag_features] = False
        return np.flatnonzero(sel)

    def other_feature_indices(self, n_features: int) -> np.ndarray:
        """Indices of the globally z-scored (non-lag) features."""
        return self._other_idx(n_features)

    def fit(self, x: np.ndarray, y: np.ndarray) -> "RevinScaler":
        other = x[:, self._other_idx(x.shape[1])]
        self.other_mean = other.mean(axis=0)
        self.other_std = _floored_std(other, 0, "feature")
        return self

    def _check(self):
        if self.other_mean is None:
            raise ConfigurationError("scaler used before fit")

    def transform_x(self, x: np.ndarray) -> tuple[np.ndarray, RevinStats]:
        self._check()
        xm, stats = revin_normalize(x, self.lag_features, self.sd_floor)
        idx = self._other_idx(x.shape[-1])
        if xm.ndim == 1:
            xm[idx] = (xm[idx] - self.other_mean) / self.other_std
        else:
            xm[:, idx] = (xm[:, idx] - self.other_mean) / self.other_std
        return xm, stats

    def inverse_x(self, xm: np.ndarray, stats: RevinStats) -> np.ndarray:
        self._check()
        out = np.asarray(xm, dtype=np.float64).copy()
        single = out.ndim == 1
        ob = out[None, :] if single else out
        idx = self._other_idx(ob.shape[1])
        ob[:, idx] = ob[:, idx] * self.other_std + self.other_mean
        mu = np.atleast_1d(np.asarray(stats.mu, dtype=np.float64))
        sd = np.atleast_1d(np.asarray(stats.sd, dtype=np.float64))
        ob[:, self.lag_features] = ob[:, self.lag_features] * sd[:, None] + mu[:, None]
        return ob[0] if single else ob

    def transform_y(self, y: np.ndarray, stats: RevinStats) -> np.ndarray:
        mu = stats.column(np.atleast_1d(stats.mu))
        sd = stats.column(np.atleast_1d(stats.sd))
        return (y - mu) / sd

    def inverse_y(self, ym: np.ndarray, stats: RevinStats) -> np.ndarray:
        mu = stats.column(np.atleast_1d(stats.mu))
        sd = stats.column(np.atleast_1d(stats.sd))
        return ym * sd + mu

    def denorm_params(self, params, stats: RevinStats):
        return revin_denorm_params(params, stats)

    def model_space_stats(self, stats: RevinStats) -> RevinStats:
        """Per-sample stats the model needs for its output-side pushforward."""
        return stats

    def to_dict(self) -> dict:
        self._check()
        return {"kind": self.kind,
                "lag_start": self.lag_features.start, "lag_stop": self.lag_features.stop,
                "sd_floor": self.sd_floor,
                "other_mean": self.other_mean.tolist(),
                "other_std": self.other_std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "RevinScaler":
        s = cls(lag_features=slice(d["lag_start"], d["lag_stop"]), sd_floor=d["sd_floor"])
        s.other_mean = np.asarray(d["other_mean"])
        s.other_std = np.asarray(d["other_std"])
        return s


def fit_zscore(x: np.ndarray, y: np.ndarray) -> ZScoreScaler:
    """Fit the conventional z-score scaler on training samples only."""
    return ZScoreScaler().fit(x, y)


def make_scaler(kind: str, **kwargs):
    if kind == "zscore":
        return ZScoreScaler()
    if kind == "revin":
        return RevinScaler(**kwargs)
    raise ConfigurationError(f"unknown scaler kind {kind!r}")


def scaler_from_dict(d: dict):
    if d.get("kind") == "zscore":
        return ZScoreScaler.from_dict(d)
    if d.get("kind") == "revin":
        return RevinScaler.from_dict(d)
    raise ConfigurationError(f"unknown scaler kind {d.get('kind')!r}")
