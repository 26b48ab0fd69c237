"""Training loop, weekly-recalibration backtest scheduler, and grid search.

Training minimizes the negative log-likelihood with Adam, early-stopping on a
random 20% validation subsplit and restoring the best-validation weights.
The backtest scheduler retrains a fresh model at the start of every block
(default 7 days) on an expanding window of all samples strictly before the
block, so no forecast ever conditions on same-day or later data.
"""

from __future__ import annotations

import hashlib
import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .datapipe import RevinStats, SampleSet, make_scaler
from .diffcore import Adam
from .errors import ConfigurationError, NumericError
from .model import ConstantHeadModel, DdnnConfig, DdnnModel, NbmlssConfig, NbmlssModel

__all__ = [
    "TrainConfig", "FitHistory", "fit",
    "RecalibrationPlan", "DayForecast", "BlockRecord", "RecalibrationResult",
    "CachedBlock", "ForecastPipeline", "run_recalibration",
    "GridSpec", "ddnn_grid", "nbmlss_grid", "GridCellResult", "grid_search",
    "rank_grid_results",
]

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    max_epochs: int = 800
    patience: int = 20
    batch_size: int = 128
    lr: float = 1e-3
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ConfigurationError("max_epochs must be >= 1")
        if not 0 <= self.patience < self.max_epochs:
            raise ConfigurationError("patience must satisfy 0 <= patience < max_epochs")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigurationError("val_fraction must lie strictly in (0, 1)")
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")


@dataclass
class FitHistory:
    train_nll: list[float] = field(default_factory=list)
    val_nll: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = math.inf


def _take_stats(stats: RevinStats | None, idx) -> RevinStats | None:
    return None if stats is None else stats.take(idx)


def fit(model, x: np.ndarray, y: np.ndarray, cfg: TrainConfig,
        stats: RevinStats | None = None,
        rng: np.random.Generator | None = None) -> FitHistory:
    """Train `model` in place; returns the per-epoch loss history.

    The validation subsplit is sampled uniformly at random from the provided
    rows, so callers must pass training data only.  On early stop the weights
    with the lowest recorded validation NLL are restored.
    """
    n = x.shape[0]
    if n < 2 * cfg.batch_size:
        raise ConfigurationError(
            f"need at least 2 * batch_size = {2 * cfg.batch_size} samples, got {n}")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)

    n_val = int(round(n * cfg.val_fraction))
    if n_val < 1 or n_val >= n:
        raise ConfigurationError(f"validation subsplit of {n_val} rows out of {n} is unusable")
    perm = rng.permutation(n)
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    x_val, y_val, s_val = x[val_idx], y[val_idx], _take_stats(stats, val_idx)

    optimizer = Adam(model.parameters(), lr=cfg.lr)
    history = FitHistory()
    best_state = model.state_values()
    epochs_since_best = 0

    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(train_idx))
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.batch_size):
            rows = train_idx[order[start:start + cfg.batch_size]]
            loss = model.loss(x[rows], y[rows], stats=_take_stats(stats, rows),
                              training=True, rng=rng)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite NLL at epoch {epoch}, "
                                   f"batch starting at {start}")
            loss.backward()
            optimizer.step()
            epoch_loss += value * len(rows)
        history.train_nll.append(epoch_loss / len(train_idx))

        val_loss = float(model.loss(x_val, y_val, stats=s_val, training=False).item())
        history.val_nll.append(val_loss)
        if val_loss < history.best_val:
            history.best_val = val_loss
            history.best_epoch = epoch
            best_state = model.state_values()
            epochs_since_best = 0
        else:
            epochs_since_best += 1
        if epochs_since_best >= cfg.patience:
            break

    model.load_state_values(best_state)
    return history


# ---------------------------------------------------------------------------
# recalibration backtest
# ---------------------------------------------------------------------------

@dataclass
class RecalibrationPlan:
    """Consecutive retraining blocks covering [test_start, test_end]."""

    test_start: np.datetime64
    test_end: np.datetime64  # inclusive
    cadence_days: int = 7

    def __post_init__(self):
        self.test_start = np.datetime64(self.test_start, "D")
        self.test_end = np.datetime64(self.test_end, "D")
        if self.test_end < self.test_start:
            raise ConfigurationError("test_end precedes test_start")
        if self.cadence_days < 1:
            raise ConfigurationError("cadence_days must be >= 1")

    def blocks(self) -> list[tuple[np.datetime64, np.datetime64]]:
        """(start, end-inclusive) pairs; the final block may be short."""
        out = []
        start = self.test_start
        step = np.timedelta64(self.cadence_days, "D")
        one = np.timedelta64(1, "D")
        while start <= self.test_end:
            end = min(start + step - one, self.test_end)
            out.append((start, end))
            start = end + one
        return out


@dataclass
class DayForecast:
    date: np.datetime64
    params: object        # head params, numpy arrays of length horizon, original units
    block_index: int


@dataclass
class BlockRecord:
    block_index: int
    start: np.datetime64
    end: np.datetime64
    n_train: int
    train_last_date: np.datetime64 | None
    history: FitHistory
    skipped_days: list = field(default_factory=list)


@dataclass
class RecalibrationResult:
    forecasts: list[DayForecast]
    blocks: list[BlockRecord]
    head_kind: str

    def dates(self) -> np.ndarray:
        return np.asarray([f.date for f in self.forecasts], dtype="datetime64[D]")


@dataclass
class ForecastPipeline:
    """Everything needed to train one model on one window and predict ahead."""

    build_model: Callable[[np.random.Generator], object]
    scaler_kind: str = "zscore"
    train_cfg: TrainConfig = field(default_factory=TrainConfig)

    def fit_block(self, train: SampleSet, rng: np.random.Generator):
        scaler = make_scaler(self.scaler_kind)
        scaler.fit(train.x, train.y)
        xm, stats = scaler.transform_x(train.x)
        model = self.build_model(rng)
        if model.revin != (self.scaler_kind == "revin"):
            raise ConfigurationError("model revin flag does not match scaler kind")
        if self.scaler_kind == "revin":
            # loss in original units; the model pushes params back through
            # the per-sample stats
            ym = train.y
            if hasattr(model, "init_output_bias"):
                model.init_output_bias(0.0, 1.0)
        else:
            ym = scaler.transform_y(train.y)
            if hasattr(model, "init_output_bias"):
                model.init_output_bias(ym.mean(axis=0), np.maximum(ym.std(axis=0), 1e-3))
        history = fit(model, xm, ym, self.train_cfg,
                      stats=scaler.model_space_stats(stats), rng=rng)
        return model, scaler, history

    def predict(self, model, scaler, test: SampleSet):
        xm, stats = scaler.transform_x(test.x)
        params = model.predict_params(xm, stats=scaler.model_space_stats(stats))
        if self.scaler_kind != "revin":
            params = scaler.denorm_params(params)
        return params


@dataclass
class CachedBlock:
    """One finished block as saved/loaded by a resume cache."""

    record: BlockRecord
    forecasts: list[DayForecast]
    head_kind: str


def run_recalibration(samples: SampleSet, plan: RecalibrationPlan,
                      pipeline: ForecastPipeline, seed: int = 0,
                      block_cache=None) -> RecalibrationResult:
    """Walk the plan's blocks, retraining from scratch on an expanding window.

    For each block, the training set is every sample dated strictly before
    the block start; forecasts are produced for each sample day inside the
    block.  Days absent from `samples` are recorded as skipped.  When a
    `block_cache` (load/save by block index) is given, finished blocks are
    persisted as they complete and reloaded on the next run, so interrupted
    backtests resume at block granularity.
    """
    forecasts: list[DayForecast] = []
    blocks: list[BlockRecord] = []
    head_kind = None
    one = np.timedelta64(1, "D")
    for b, (start, end) in enumerate(plan.blocks()):
        if block_cache is not None:
            cached = block_cache.load(b)
            if cached is not None:
                forecasts.extend(cached.forecasts)
                blocks.append(cached.record)
                head_kind = cached.head_kind
                continue
        rng = np.random.default_rng([seed, b])
        train = samples.before(start)
        test = samples.between(start, end)
        model, scaler, history = pipeline.fit_block(train, rng)
        head_kind = model.head.cfg.kind
        assert train.dates.size == 0 or train.dates.max() < start, "leakage guard"
        record = BlockRecord(
            block_index=b, start=start, end=end, n_train=len(train),
            train_last_date=train.dates.max() if len(train) else None,
            history=history)
        expected = set(np.arange(start, end + one, dtype="datetime64[D]"))
        record.skipped_days = sorted(expected - set(test.dates))
        if record.skipped_days:
            logger.warning("block %d: %d day(s) missing from samples",
                           b, len(record.skipped_days))
        block_forecasts = []
        if len(test):
            params = pipeline.predict(model, scaler, test)
            for i in range(len(test)):
                block_forecasts.append(DayForecast(
                    date=test.dates[i],
                    params=params.map(lambda a, i=i: np.asarray(a)[i]),
                    block_index=b))
        forecasts.extend(block_forecasts)
        blocks.append(record)
        if block_cache is not None:
            block_cache.save(b, CachedBlock(record=record, forecasts=block_forecasts,
                                            head_kind=head_kind))
    return RecalibrationResult(forecasts=forecasts, blocks=blocks, head_kind=head_kind)


# ---------------------------------------------------------------------------
# grid search
# ---------------------------------------------------------------------------

@dataclass
class GridSpec:
    """Cartesian hyperparameter grid; enumeration order is deterministic."""

    model: str  # nbmlss | ddnn
    hidden_units: tuple = ()
    n_basis: tuple = ()           # ignored for ddnn
    dropout: tuple = (0.0, 0.1, 0.3, 0.5)
    lr: tuple = (1e-3, 5e-4, 1e-4, 5e-5)
    folds: int = 4

    def __post_init__(self):
        if self.model not in ("nbmlss", "ddnn"):
            raise ConfigurationError(f"unknown model kind {self.model!r}")
        if self.folds < 1:
            raise ConfigurationError("folds must be >= 1")

    def cells(self) -> list[dict]:
        if self.model == "ddnn":
            combos = itertools.product(self.hidden_units, (None,), self.dropout, self.lr)
        else:
            combos = itertools.product(self.hidden_units, self.n_basis, self.dropout, self.lr)
        return [{"hidden_units": nu, "n_basis": nz, "dropout": dr, "lr": lr}
                for nu, nz, dr, lr in combos]


def ddnn_grid() -> GridSpec:
    return GridSpec(model="ddnn", hidden_units=(128, 512, 640, 768))


def nbmlss_grid() -> GridSpec:
    return GridSpec(model="nbmlss", hidden_units=(32, 64, 128, 256),
                    n_basis=(32, 64, 128, 256))


@dataclass
class GridCellResult:
    cell: dict
    fold_scores: list[float]
    score: float  # mean validation NLL across folds; +inf if any fold diverged


def _cell_seed(cell: dict) -> int:
    """Stable seed component derived from the cell contents (not its position),
    so partitioned/parallel grid runs reproduce the sequential trajectories."""
    digest = hashlib.sha256(repr(sorted(cell.items())).encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def _fold_blocks(tune_start, tune_end, folds: int):
    start = np.datetime64(tune_start, "D")
    end = np.datetime64(tune_end, "D")
    total = int((end - start) / np.timedelta64(1, "D")) + 1
    width = total / folds
    out = []
    for k in range(folds):
        lo = start + np.timedelta64(int(round(k * width)), "D")
        hi = start + np.timedelta64(int(round((k + 1) * width)) - 1, "D")
        out.append((lo, min(hi, end)))
    return out


def grid_search(spec: GridSpec, samples: SampleSet, tune_start, tune_end,
                train_cfg: TrainConfig, head: object = None, scaler_kind: str = "zscore",
                seed: int = 0, model_kwargs: dict | None = None) -> list[GridCellResult]:
    """Score every grid cell by mean validation NLL over sequential folds.

    The tuning window [tune_start, tune_end] is tiled by `spec.folds`
    contiguous validation blocks; each fold trains on all samples preceding
    its block.  Ranking is deterministic with ties broken toward the smaller
    model (fewer units, fewer bases, more dropout, smaller learning rate).
    """
    from .dists import LinkConfig  # local import to keep module load light

    if head is None:
        head = LinkConfig()
    model_kwargs = dict(model_kwargs or {})
    blocks = _fold_blocks(tune_start, tune_end, spec.folds)
    results: list[GridCellResult] = []
    for cell in spec.cells():
        fold_scores: list[float] = []
        for k, (lo, hi) in enumerate(blocks):
            rng = np.random.default_rng([seed, _cell_seed(cell), k])
            train = samples.before(lo)
            val = samples.between(lo, hi)
            if len(val) == 0 or len(train) < 2 * train_cfg.batch_size:
                fold_scores.append(math.inf)
                continue
            if spec.model == "ddnn":
                build = lambda r, cell=cell: DdnnModel(DdnnConfig(
                    n_features=train.x.shape[1], horizon=train.y.shape[1],
                    hidden_units=cell["hidden_units"], dropout=cell["dropout"],
                    head=head, revin=(scaler_kind == "revin"), **model_kwargs), seed=r)
            else:
                build = lambda r, cell=cell: NbmlssModel(NbmlssConfig(
                    n_features=train.x.shape[1], horizon=train.y.shape[1],
                    hidden_units=cell["hidden_units"], n_basis=cell["n_basis"],
                    dropout=cell["dropout"], head=head,
                    revin=(scaler_kind == "revin"), **model_kwargs), seed=r)
            pipeline = ForecastPipeline(build_model=build, scaler_kind=scaler_kind,
                                        train_cfg=replace(train_cfg, lr=cell["lr"]))
            try:
                model, scaler, _ = pipeline.fit_block(train, rng)
                xm, stats = scaler.transform_x(val.x)
                ym = val.y if scaler_kind == "revin" else scaler.transform_y(val.y)
                score = float(model.loss(xm, ym, stats=scaler.model_space_stats(stats),
                                         training=False).item())
                if not math.isfinite(score):
                    score = math.inf
            except NumericError as exc:
                logger.warning("grid cell %s fold %d diverged: %s", cell, k, exc)
                score = math.inf
            fold_scores.append(score)
        mean_score = math.inf if any(math.isinf(s) for s in fold_scores) \
            else float(np.mean(fold_scores))
        results.append(GridCellResult(cell=cell, fold_scores=fold_scores, score=mean_score))

    return rank_grid_results(results)


def rank_grid_results(results: list[GridCellResult]) -> list[GridCellResult]:
    """Deterministic ranking: score, then smaller/more-regularized cells first."""

    def sort_key(r: GridCellResult):
        c = r.cell
        return (r.score, c["hidden_units"], c["n_basis"] if c["n_basis"] is not None else 0,
                -c["dropout"], c["lr"])

    return sorted(results, key=sort_key)
