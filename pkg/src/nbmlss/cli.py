"""Batch command-line front end.

Subcommands
-----------
prepare        parse a market CSV, build daily samples, fit the scaler
backtest       weekly-recalibration ensemble backtest with report and forecasts
gridsearch     cross-validated hyperparameter grid search
export-shapes  tabulate fitted shape functions from a model checkpoint
evaluate       metrics (and pairwise significance tests) on forecast CSVs

Runs are driven by a declarative JSON config file; every field except the
data path and date ranges has a documented default.  See the README for the
schema.  Exit codes: 0 success, 2 configuration error, 3 data error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import dataclasses
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, datapipe, evaluation, model as model_mod, train as train_mod
from .dists import JsuParams, LinkConfig, NormalParams, StudentTParams, make_head
from .errors import ConfigurationError, DataError, NbmlssError, NumericError

_PARAMS_CLS = {"jsu": JsuParams, "normal": NormalParams, "studentt": StudentTParams}

logger = logging.getLogger("nbmlss")

_MODEL_DEFAULTS = {
    "kind": "nbmlss",        # nbmlss | ddnn
    "head": "jsu",           # jsu | normal | studentt
    "hidden_units": 64,
    "n_basis": 64,           # nbmlss only
    "dropout": 0.1,
    "mask": "full",          # full | hour
    "epsilon": 1e-3,
    "gamma": 3.0,
}
_TRAIN_DEFAULTS = {
    "max_epochs": 800,
    "patience": 20,
    "batch_size": 128,
    "lr": 5e-4,
    "val_fraction": 0.2,
}
_ENSEMBLE_DEFAULTS = {
    "members": 5,
    "mode": "p",             # p | v | both
    "n_samples": 10000,
}
_GRID_DEFAULTS = {
    "model": "nbmlss",
    "hidden_units": None,    # defaults depend on the model kind
    "n_basis": (32, 64, 128, 256),
    "dropout": (0.0, 0.1, 0.3, 0.5),
    "lr": (1e-3, 5e-4, 1e-4, 5e-5),
    "folds": 4,
}


@dataclasses.dataclass
class RunConfig:
    """Validated view over the declarative config file."""

    csv_path: Path
    test_start: np.datetime64
    test_end: np.datetime64
    train_start: np.datetime64 | None = None
    tune_start: np.datetime64 | None = None
    tune_end: np.datetime64 | None = None
    scaler: str = "revin"
    cadence_days: int = 7
    seed: int = 0
    out: Path = Path("runs/out")
    model: dict = dataclasses.field(default_factory=dict)
    train: dict = dataclasses.field(default_factory=dict)
    ensemble: dict = dataclasses.field(default_factory=dict)
    grid: dict = dataclasses.field(default_factory=dict)

    @classmethod
    def from_file(cls, path: str | Path, overrides: dict | None = None) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file is not valid JSON: {exc}") from None
        raw.update(overrides or {})
        return cls.from_dict(raw, base_dir=path.parent)

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path = Path(".")) -> "RunConfig":
        data = raw.get("data", {})
        for key in ("csv", "test_start", "test_end"):
            if key not in data:
                raise ConfigurationError(f"config is missing data.{key}")
        csv_path = Path(data["csv"])
        if not csv_path.is_absolute():
            csv_path = base_dir / csv_path

        def date(name, default=None):
            v = data.get(name, default)
            if v is None:
                return None
            try:
                return np.datetime64(v, "D")
            except ValueError:
                raise ConfigurationError(f"data.{name}: bad date {v!r}") from None

        cfg = cls(
            csv_path=csv_path,
            test_start=date("test_start"), test_end=date("test_end"),
            train_start=date("train_start"),
            tune_start=date("tune_start"), tune_end=date("tune_end"),
            scaler=raw.get("scaler", "revin"),
            cadence_days=int(raw.get("cadence_days", 7)),
            seed=int(raw.get("seed", 0)),
            out=Path(raw.get("out", "runs/out")),
            model={**_MODEL_DEFAULTS, **raw.get("model", {})},
            train={**_TRAIN_DEFAULTS, **raw.get("train", {})},
            ensemble={**_ENSEMBLE_DEFAULTS, **raw.get("ensemble", {})},
            grid={**_GRID_DEFAULTS, **raw.get("grid", {})},
        )
        if cfg.test_end < cfg.test_start:
            raise ConfigurationError("data.test_end precedes data.test_start")
        if cfg.train_start is not None and cfg.train_start >= cfg.test_start:
            raise ConfigurationError("data.train_start must precede data.test_start")
        if cfg.scaler not in ("zscore", "revin"):
            raise ConfigurationError(f"unknown scaler {cfg.scaler!r}")
        if cfg.model["kind"] not in ("nbmlss", "ddnn"):
            raise ConfigurationError(f"unknown model kind {cfg.model['kind']!r}")
        if cfg.model["mask"] not in ("full", "hour"):
            raise ConfigurationError(f"unknown mask setting {cfg.model['mask']!r}")
        if cfg.ensemble["mode"] not in ("p", "v", "both"):
            raise ConfigurationError(f"unknown aggregation mode {cfg.ensemble['mode']!r}")
        return cfg

    def head(self) -> LinkConfig:
        return LinkConfig(kind=self.model["head"], epsilon=self.model["epsilon"],
                          gamma=self.model["gamma"])

    def to_manifest_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["csv_path"] = str(self.csv_path)
        d["out"] = str(self.out)
        for k in ("test_start", "test_end", "train_start", "tune_start", "tune_end"):
            d[k] = None if d[k] is None else str(d[k])
        return d


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _data_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load_samples(cfg: RunConfig) -> datapipe.SampleSet:
    series, report = datapipe.load_csv(cfg.csv_path)
    samples = datapipe.build_samples(series, rejected_days=report.rejected_days)
    if cfg.train_start is not None:
        samples = samples.subset(samples.dates >= cfg.train_start)
    if len(samples) == 0:
        raise DataError("no usable samples in the configured range")
    return samples


def _build_model_factory(cfg: RunConfig, head: LinkConfig, n_features: int, horizon: int):
    m = cfg.model
    revin = cfg.scaler == "revin"
    if m["kind"] == "ddnn":
        if m["mask"] == "hour":
            raise ConfigurationError("the hour-aligned mask applies to the nbmlss model only")
        def build(rng):
            return model_mod.DdnnModel(model_mod.DdnnConfig(
                n_features=n_features, horizon=horizon,
                hidden_units=int(m["hidden_units"]), dropout=float(m["dropout"]),
                head=head, revin=revin), seed=rng)
    else:
        mask = None
        if m["mask"] == "hour":
            mask = model_mod.make_exogenous_mask(make_head(head).n_params, horizon, n_features)
        def build(rng):
            return model_mod.NbmlssModel(model_mod.NbmlssConfig(
                n_features=n_features, horizon=horizon,
                hidden_units=int(m["hidden_units"]), n_basis=int(m["n_basis"]),
                dropout=float(m["dropout"]), head=head, revin=revin,
                feature_mask=mask), seed=rng)
    return build


def _train_config(cfg: RunConfig) -> train_mod.TrainConfig:
    t = cfg.train
    return train_mod.TrainConfig(
        max_epochs=int(t["max_epochs"]), patience=int(t["patience"]),
        batch_size=int(t["batch_size"]), lr=float(t["lr"]),
        val_fraction=float(t["val_fraction"]), seed=cfg.seed)


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")


# ---------------------------------------------------------------------------
# prepare
# ---------------------------------------------------------------------------

def cmd_prepare(cfg: RunConfig) -> int:
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    samples = _load_samples(cfg)

    sample_path = out / "samples.csv"
    with sample_path.open("w") as fh:
        fh.write("date," + ",".join(samples.feature_names + samples.target_names) + "\n")
        for i in range(len(samples)):
            row = [str(samples.dates[i])]
            row += [repr(v) for v in samples.x[i]]
            row += [repr(v) for v in samples.y[i]]
            fh.write(",".join(row) + "\n")

    train = samples.before(cfg.test_start)
    if len(train) == 0:
        raise DataError("no training samples precede the test range")
    scaler = datapipe.make_scaler(cfg.scaler)
    scaler.fit(train.x, train.y)
    _write_json(out / "scaler.json", scaler.to_dict())

    manifest = {
        "command": "prepare",
        "config": cfg.to_manifest_dict(),
        "data_hash": _data_hash(cfg.csv_path),
        "n_samples": len(samples),
        "n_train_samples": len(train),
        "samples_sha256": hashlib.sha256(sample_path.read_bytes()).hexdigest(),
        "wall_time_s": time.time() - started,
        "version": __version__,
    }
    _write_json(out / "manifest.json", manifest)
    print(f"prepared {len(samples)} samples -> {sample_path}")
    return 0


# ---------------------------------------------------------------------------
# backtest
# ---------------------------------------------------------------------------

def _forecast_csv_path(out: Path, member: int) -> Path:
    return out / "members" / f"m{member:02d}" / "params.csv"


def _write_member_params(path: Path, result: train_mod.RecalibrationResult,
                         param_names) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        fh.write("date,hour," + ",".join(param_names) + ",block\n")
        for fc in result.forecasts:
            arrays = [np.asarray(getattr(fc.params, f))
                      for f in fc.params.__dataclass_fields__]
            for h in range(arrays[0].shape[-1]):
                vals = ",".join(repr(float(a[h])) for a in arrays)
                fh.write(f"{fc.date},{h},{vals},{fc.block_index}\n")


def _read_member_params(path: Path, head) -> dict:
    """date -> params object with [horizon] arrays, parsed from a member CSV."""
    rows: dict = {}
    with path.open() as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            rows.setdefault(row["date"], []).append(row)
    cls = _PARAMS_CLS[head.cfg.kind]
    out = {}
    for date, entries in rows.items():
        entries.sort(key=lambda r: int(r["hour"]))
        arrays = [np.asarray([float(e[pname]) for e in entries])
                  for pname in head.param_names]
        out[np.datetime64(date, "D")] = cls(*arrays)
    return out


class _JsonBlockCache:
    """Per-block JSON files enabling resume of interrupted recalibration runs."""

    def __init__(self, directory: Path, head):
        self.directory = directory
        self.head = head
        directory.mkdir(parents=True, exist_ok=True)

    def _path(self, b: int) -> Path:
        return self.directory / f"block_{b:04d}.json"

    def load(self, b: int):
        path = self._path(b)
        if not path.exists():
            return None
        d = json.loads(path.read_text())
        cls = _PARAMS_CLS[self.head.cfg.kind]
        forecasts = [
            train_mod.DayForecast(
                date=np.datetime64(f["date"], "D"),
                params=cls(*[np.asarray(f["params"][p]) for p in self.head.param_names]),
                block_index=b)
            for f in d["forecasts"]
        ]
        history = train_mod.FitHistory(
            train_nll=d["record"]["train_nll"], val_nll=d["record"]["val_nll"],
            best_epoch=d["record"]["best_epoch"], best_val=d["record"]["best_val"])
        record = train_mod.BlockRecord(
            block_index=b, start=np.datetime64(d["record"]["start"], "D"),
            end=np.datetime64(d["record"]["end"], "D"), n_train=d["record"]["n_train"],
            train_last_date=None, history=history,
            skipped_days=[np.datetime64(s, "D") for s in d["record"]["skipped_days"]])
        return train_mod.CachedBlock(record=record, forecasts=forecasts,
                                     head_kind=d["head_kind"])

    def save(self, b: int, cached) -> None:
        record = cached.record
        payload = {
            "head_kind": cached.head_kind,
            "record": {
                "start": str(record.start), "end": str(record.end),
                "n_train": record.n_train,
                "train_nll": record.history.train_nll,
                "val_nll": record.history.val_nll,
                "best_epoch": record.history.best_epoch,
                "best_val": record.history.best_val,
                "skipped_days": [str(s) for s in record.skipped_days],
            },
            "forecasts": [
                {"date": str(f.date),
                 "params": {p: np.asarray(getattr(f.params, field)).tolist()
                            for p, field in zip(self.head.param_names,
                                                f.params.__dataclass_fields__)}}
                for f in cached.forecasts
            ],
        }
        self._path(b).write_text(json.dumps(payload))


def _run_member(args) -> tuple[int, train_mod.RecalibrationResult]:
    cfg, member, n_features, horizon, cache_dir = args
    head = cfg.head()
    build = _build_model_factory(cfg, head, n_features, horizon)
    pipeline = train_mod.ForecastPipeline(
        build_model=build, scaler_kind=cfg.scaler, train_cfg=_train_config(cfg))
    plan = train_mod.RecalibrationPlan(cfg.test_start, cfg.test_end, cfg.cadence_days)
    samples = _load_samples(cfg)
    cache = _JsonBlockCache(Path(cache_dir), head) if cache_dir else None
    result = train_mod.run_recalibration(samples, plan, pipeline, seed=cfg.seed + member,
                                         block_cache=cache)
    return member, result


def cmd_backtest(cfg: RunConfig, jobs: int = 1, skip_failed: bool = False) -> int:
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    samples = _load_samples(cfg)
    head = cfg.head()
    n_features, horizon = samples.x.shape[1], samples.y.shape[1]
    members = int(cfg.ensemble["members"])

    manifest_path = out / "manifest.json"
    identity = {"config": cfg.to_manifest_dict(), "data_hash": _data_hash(cfg.csv_path)}
    if manifest_path.exists():
        previous = json.loads(manifest_path.read_text())
        if {k: previous.get(k) for k in identity} != identity:
            raise ConfigurationError(
                f"output directory {out} holds a run with a different config/seed/data; "
                f"choose a fresh --out or delete it")

    # members whose params.csv already exists are reused; unfinished members
    # resume from their per-block cache
    member_results: dict[int, train_mod.RecalibrationResult | None] = {}
    pending = []
    for m in range(members):
        if _forecast_csv_path(out, m).exists():
            logger.info("member %d: reusing existing forecasts", m)
            member_results[m] = None
        else:
            cache_dir = out / "members" / f"m{m:02d}" / "blocks"
            pending.append((cfg, m, n_features, horizon, str(cache_dir)))

    failures = []
    if pending:
        if jobs > 1:
            with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
                futures = {pool.submit(_run_member, p): p[1] for p in pending}
                for fut in concurrent.futures.as_completed(futures):
                    m = futures[fut]
                    try:
                        _, result = fut.result()
                        member_results[m] = result
                    except NbmlssError as exc:
                        failures.append((m, exc))
        else:
            for p in pending:
                try:
                    m, result = _run_member(p)
                    member_results[m] = result
                except NbmlssError as exc:
                    failures.append((p[1], exc))
    for m, exc in sorted(failures):
        logger.error("member %d failed: %s", m, exc)
    if failures and not skip_failed:
        raise NumericError(f"member {sorted(failures)[0][0]} failed: {sorted(failures)[0][1]}")

    histories = {}
    for m in sorted(member_results):
        result = member_results[m]
        if result is not None:
            _write_member_params(_forecast_csv_path(out, m), result, head.param_names)
            histories[str(m)] = [
                {"block": b.block_index, "n_train": b.n_train,
                 "train_nll": b.history.train_nll, "val_nll": b.history.val_nll,
                 "best_epoch": b.history.best_epoch}
                for b in result.blocks]

    ok_members = [m for m in range(members) if m not in dict(failures)]
    per_member = []
    for m in ok_members:
        per_member.append(_read_member_params(_forecast_csv_path(out, m), head))
    common_dates = sorted(set.intersection(*[set(d) for d in per_member])) if per_member else []
    if not common_dates:
        raise DataError("no forecast days shared by all ensemble members")

    y_lookup = {samples.dates[i]: samples.y[i] for i in range(len(samples))}
    dates = [d for d in common_dates if d in y_lookup]
    y_panel = np.asarray([y_lookup[d] for d in dates])

    modes = ("p", "v") if cfg.ensemble["mode"] == "both" else (cfg.ensemble["mode"],)
    summary = {}
    for mode in modes:
        spec = evaluation.EnsembleSpec(members=len(per_member), mode=mode,
                                       n_samples=int(cfg.ensemble["n_samples"]),
                                       seed=cfg.seed)
        forecasts = [evaluation.ForecastDistribution(date=d, members=[pm[d] for pm in per_member])
                     for d in dates]
        q_panel = evaluation.quantile_panel(forecasts, head, spec)
        _write_forecast_csv(out / f"forecasts_{mode}.csv", dates, q_panel)
        report = evaluation.build_report(y_panel, q_panel)
        _write_json(out / f"report_{mode}.json", report.to_dict())
        nominal, empirical = evaluation.calibration_curve(y_panel, q_panel)
        with (out / f"calibration_{mode}.csv").open("w") as fh:
            fh.write("nominal,empirical\n")
            for nv, ev in zip(nominal, empirical):
                fh.write(f"{nv!r},{ev!r}\n")
        summary[mode] = report.to_dict()
        print(f"[{mode}] crps={report.crps:.4f} mae={report.mae:.4f} "
              f"picp50={report.picp50:.3f} picp90={report.picp90:.3f} "
              f"picp98={report.picp98:.3f}")

    manifest = {
        **identity,
        "command": "backtest",
        "n_forecast_days": len(dates),
        "skipped_members": sorted(m for m, _ in failures),
        "histories": histories,
        "reports": summary,
        "wall_time_s": time.time() - started,
        "version": __version__,
    }
    _write_json(manifest_path, manifest)
    _save_reference_checkpoint(cfg, samples, out)
    return 0


def _save_reference_checkpoint(cfg: RunConfig, samples: datapipe.SampleSet, out: Path) -> None:
    """Fit one model on everything before the test range and checkpoint it.

    Shape-function export needs actual weights; member forecasts only persist
    distribution parameters.
    """
    ckpt = out / "model.ckpt.json"
    if ckpt.exists():
        return
    head = cfg.head()
    build = _build_model_factory(cfg, head, samples.x.shape[1], samples.y.shape[1])
    pipeline = train_mod.ForecastPipeline(build_model=build, scaler_kind=cfg.scaler,
                                          train_cfg=_train_config(cfg))
    train = samples.before(cfg.test_start)
    rng = np.random.default_rng([cfg.seed, 999])
    model, scaler, _ = pipeline.fit_block(train, rng)
    model_mod.save_model(model, ckpt)
    _write_json(out / "scaler.json", scaler.to_dict())
    x_train_model, _ = scaler.transform_x(train.x)
    np.save(out / "train_feature_range.npy",
            np.stack([x_train_model.min(axis=0), x_train_model.max(axis=0)]))


def _write_forecast_csv(path: Path, dates, q_panel: np.ndarray) -> None:
    with path.open("w") as fh:
        fh.write("date,hour," + ",".join(f"q{p:02d}" for p in evaluation.PERCENTILES) + "\n")
        for d, day_q in zip(dates, q_panel):
            for h in range(day_q.shape[0]):
                fh.write(f"{d},{h}," + ",".join(repr(v) for v in day_q[h]) + "\n")


def _read_forecast_csv(path: Path) -> tuple[list, np.ndarray]:
    dates, rows = [], {}
    with path.open() as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["date", "hour"] or len(header) != 2 + 99:
            raise DataError(f"{path}: not a forecast CSV (expected date,hour,q01..q99)")
        for row in reader:
            d = np.datetime64(row[0], "D")
            rows.setdefault(d, {})[int(row[1])] = [float(v) for v in row[2:]]
    dates = sorted(rows)
    hours = sorted(rows[dates[0]])
    panel = np.asarray([[rows[d][h] for h in hours] for d in dates])
    return dates, panel


# ---------------------------------------------------------------------------
# gridsearch
# ---------------------------------------------------------------------------

def cmd_gridsearch(cfg: RunConfig, jobs: int = 1) -> int:
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    samples = _load_samples(cfg)
    g = cfg.grid
    model_kind = g.get("model", cfg.model["kind"])
    hidden = g.get("hidden_units")
    if hidden is None:
        hidden = (128, 512, 640, 768) if model_kind == "ddnn" else (32, 64, 128, 256)
    spec = train_mod.GridSpec(
        model=model_kind, hidden_units=tuple(hidden),
        n_basis=tuple(g["n_basis"]) if model_kind == "nbmlss" else (),
        dropout=tuple(g["dropout"]), lr=tuple(g["lr"]), folds=int(g["folds"]))

    tune_end = cfg.tune_end if cfg.tune_end is not None else cfg.test_start - np.timedelta64(1, "D")
    tune_start = cfg.tune_start if cfg.tune_start is not None \
        else tune_end - np.timedelta64(364, "D")
    if tune_end >= cfg.test_start:
        raise ConfigurationError("tuning range must precede the test range")

    search_args = dict(samples=samples, tune_start=tune_start, tune_end=tune_end,
                       train_cfg=_train_config(cfg), head=cfg.head(),
                       scaler_kind=cfg.scaler, seed=cfg.seed)
    if jobs > 1:
        # one single-cell spec per worker; per-cell seeds derive from the cell
        # contents, so the partitioned run matches the sequential one exactly
        singles = [dataclasses.replace(spec, hidden_units=(c["hidden_units"],),
                                       n_basis=(c["n_basis"],) if c["n_basis"] is not None else (),
                                       dropout=(c["dropout"],), lr=(c["lr"],))
                   for c in spec.cells()]
        results = []
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            for part in pool.map(_grid_worker, [(s, search_args) for s in singles]):
                results.extend(part)
        results = train_mod.rank_grid_results(results)
    else:
        results = train_mod.grid_search(spec, **search_args)

    ranking_path = out / "grid_ranking.csv"
    with ranking_path.open("w") as fh:
        n_folds = spec.folds
        fh.write("rank,hidden_units,n_basis,dropout,lr,score,"
                 + ",".join(f"fold{k}" for k in range(n_folds)) + "\n")
        for rank, r in enumerate(results):
            c = r.cell
            folds = ",".join(repr(s) for s in r.fold_scores)
            fh.write(f"{rank},{c['hidden_units']},{c['n_basis']},"
                     f"{c['dropout']!r},{c['lr']!r},{r.score!r},{folds}\n")

    best = results[0].cell
    best_config = cfg.to_manifest_dict()
    best_config["model"] = {**cfg.model, "kind": model_kind,
                            "hidden_units": best["hidden_units"],
                            "dropout": best["dropout"]}
    if model_kind == "nbmlss":
        best_config["model"]["n_basis"] = best["n_basis"]
    best_config["train"] = {**cfg.train, "lr": best["lr"]}
    _write_json(out / "best_config.json", _manifest_to_runfile(best_config))

    manifest = {
        "command": "gridsearch",
        "config": cfg.to_manifest_dict(),
        "data_hash": _data_hash(cfg.csv_path),
        "n_cells": len(results),
        "best": best,
        "wall_time_s": time.time() - started,
        "version": __version__,
    }
    _write_json(out / "manifest.json", manifest)
    print(f"gridsearch ranked {len(results)} cells; best: {best}")
    return 0


def _grid_worker(args):
    spec, kwargs = args
    return train_mod.grid_search(spec, **kwargs)


def _manifest_to_runfile(d: dict) -> dict:
    """Reshape the manifest dict back into the runnable config file schema."""
    return {
        "data": {"csv": d["csv_path"], "train_start": d["train_start"],
                 "test_start": d["test_start"], "test_end": d["test_end"],
                 "tune_start": d["tune_start"], "tune_end": d["tune_end"]},
        "scaler": d["scaler"], "cadence_days": d["cadence_days"], "seed": d["seed"],
        "out": d["out"], "model": d["model"], "train": d["train"],
        "ensemble": d["ensemble"],
    }


# ---------------------------------------------------------------------------
# export-shapes
# ---------------------------------------------------------------------------

def cmd_export_shapes(cfg: RunConfig, checkpoint: Path, params: list[str] | None,
                      hours: list[int] | None, resolution: int = 256,
                      combined: bool = True) -> int:
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    mdl = model_mod.load_model(checkpoint)
    if not isinstance(mdl, model_mod.NbmlssModel):
        raise ConfigurationError("shape export requires an nbmlss checkpoint")
    head = mdl.head

    run_dir = Path(checkpoint).parent
    range_path = run_dir / "train_feature_range.npy"
    scaler_path = run_dir / "scaler.json"
    if range_path.exists():
        lo, hi = np.load(range_path)
    else:
        samples = _load_samples(cfg)
        train = samples.before(cfg.test_start)
        scaler = datapipe.make_scaler(cfg.scaler)
        scaler.fit(train.x, train.y)
        xm, _ = scaler.transform_x(train.x)
        lo, hi = xm.min(axis=0), xm.max(axis=0)
    if lo.shape[0] != mdl.config.n_features:
        raise ConfigurationError(
            f"training range covers {lo.shape[0]} features, checkpoint expects "
            f"{mdl.config.n_features}")

    t = np.linspace(0.0, 1.0, resolution)
    grid = lo[:, None] + (hi - lo)[:, None] * t[None, :]

    display = grid
    if scaler_path.exists():
        sd = json.loads(scaler_path.read_text())
        scaler = datapipe.scaler_from_dict(sd)
        if sd["kind"] == "zscore":
            display = grid * scaler.feature_std[:, None] + scaler.feature_mean[:, None]
        else:
            # per-sample lag normalization has no global inverse: lag columns
            # stay in model units, the rest map back through the fitted stats
            display = grid.copy()
            idx = scaler.other_feature_indices(grid.shape[0])
            display[idx] = (grid[idx] * scaler.other_std[:, None]
                            + scaler.other_mean[:, None])

    if params is None:
        param_indices = list(range(head.n_params))
    else:
        alias = {"loc": head.param_names[0], "scale": head.param_names[1]}
        wanted = [alias.get(p, p) for p in params]
        unknown = [p for p in wanted if p not in head.param_names]
        if unknown:
            raise ConfigurationError(f"unknown parameter name(s) {unknown}; "
                                     f"this head has {list(head.param_names)}")
        param_indices = [head.param_names.index(p) for p in wanted]
    hour_list = list(range(mdl.horizon)) if hours is None else hours
    bad_hours = [h for h in hour_list if not 0 <= h < mdl.horizon]
    if bad_hours:
        raise ConfigurationError(f"hour(s) {bad_hours} outside 0..{mdl.horizon - 1}")

    table = model_mod.export_shape_functions(
        mdl, grid, param_indices=param_indices, hours=hour_list,
        display_grid=display, train_range=(lo, hi))
    labels = datapipe.feature_names() if mdl.config.n_features == datapipe.N_FEATURES \
        else [f"x{i}" for i in range(mdl.config.n_features)]
    if combined:
        path = out / "shape_functions.csv"
        table.write_csv(path, labels)
        print(f"wrote {path}")
    else:
        for i in range(mdl.config.n_features):
            sel = table.feature == i
            sub = model_mod.ShapeTable(
                feature=table.feature[sel], param=table.param[sel], hour=table.hour[sel],
                x=table.x[sel], f=table.f[sel], contribution=table.contribution[sel],
                extrapolated=table.extrapolated[sel])
            sub.write_csv(out / f"shape_{labels[i]}.csv", labels)
        print(f"wrote {mdl.config.n_features} files under {out}")
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def cmd_evaluate(cfg: RunConfig, forecast_files: list[Path]) -> int:
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    samples = _load_samples(cfg)
    y_lookup = {samples.dates[i]: samples.y[i] for i in range(len(samples))}

    panels = {}
    for path in forecast_files:
        name = Path(path).stem
        dates, q_panel = _read_forecast_csv(Path(path))
        keep = [i for i, d in enumerate(dates) if d in y_lookup]
        if not keep:
            raise DataError(f"{path}: no forecast dates overlap the actuals")
        dates = [dates[i] for i in keep]
        panels[name] = (dates, q_panel[keep])

    common = sorted(set.intersection(*[set(d) for d, _ in panels.values()]))
    if not common:
        raise DataError("forecast files share no common dates")
    y_panel = np.asarray([y_lookup[d] for d in common])

    reports = {}
    losses = {}
    for name, (dates, q_panel) in panels.items():
        sel = [dates.index(d) for d in common]
        q = q_panel[sel]
        reports[name] = evaluation.build_report(y_panel, q).to_dict()
        losses[name] = evaluation.crps_panel(y_panel, q)
        _write_json(out / f"report_{name}.json", reports[name])
        print(f"{name}: crps={reports[name]['crps']:.4f} mae={reports[name]['mae']:.4f}")

    if len(panels) > 1:
        names = sorted(panels)
        with (out / "dm_matrix.csv").open("w") as fh:
            fh.write("model," + ",".join(names) + "\n")
            for a in names:
                cells = []
                for b in names:
                    if a == b:
                        cells.append("")
                        continue
                    r = evaluation.dm_test(losses[a], losses[b])
                    cells.append("degenerate" if r.degenerate else repr(r.p_value))
                fh.write(a + "," + ",".join(cells) + "\n")
        print(f"wrote {out / 'dm_matrix.csv'}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nbmlss",
        description="Probabilistic multi-horizon forecasting toolkit (batch CLI)")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="path to the JSON run config")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override output directory")

    p = sub.add_parser("prepare", help="build samples and scaler state from a market CSV")
    common(p)

    p = sub.add_parser("backtest", help="weekly-recalibration ensemble backtest")
    common(p)
    p.add_argument("--jobs", type=int, default=1, help="parallel ensemble members")
    p.add_argument("--aggregate", choices=("p", "v", "both"), default=None,
                   help="override ensemble aggregation mode")
    p.add_argument("--mask", choices=("full", "hour"), default=None,
                   help="override the exogenous feature mask")
    p.add_argument("--skip-failed", action="store_true",
                   help="continue when an ensemble member fails to train")

    p = sub.add_parser("gridsearch", help="cross-validated hyperparameter search")
    common(p)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("export-shapes", help="tabulate shape functions from a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--param", action="append", default=None,
                   help="parameter name (loc/scale or head-specific); repeatable")
    p.add_argument("--hour", action="append", type=int, default=None, help="repeatable")
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--per-feature-files", action="store_true",
                   help="one CSV per feature instead of a combined file")

    p = sub.add_parser("evaluate", help="metrics and DM tests on forecast CSVs")
    common(p)
    p.add_argument("--forecasts", nargs="+", required=True,
                   help="one or more forecast CSVs (date,hour,q01..q99)")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    if getattr(args, "aggregate", None):
        overrides.setdefault("ensemble", {})
    try:
        cfg = RunConfig.from_file(args.config, overrides)
        if getattr(args, "aggregate", None):
            cfg.ensemble["mode"] = args.aggregate
        if getattr(args, "mask", None):
            cfg.model["mask"] = args.mask
        if args.command == "prepare":
            return cmd_prepare(cfg)
        if args.command == "backtest":
            return cmd_backtest(cfg, jobs=args.jobs, skip_failed=args.skip_failed)
        if args.command == "gridsearch":
            return cmd_gridsearch(cfg, jobs=args.jobs)
        if args.command == "export-shapes":
            return cmd_export_shapes(cfg, Path(args.checkpoint), args.param, args.hour,
                                     resolution=args.resolution,
                                     combined=not args.per_feature_files)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, [Path(f) for f in args.forecasts])
        parser.error(f"unknown command {args.command}")
    except ConfigurationError as exc:
        logger.error("configuration error: %s", exc)
        return 2
    except DataError as exc:
        logger.error("data error: %s", exc)
        return 3
    except NumericError as exc:
        logger.error("numeric failure: %s", exc)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
