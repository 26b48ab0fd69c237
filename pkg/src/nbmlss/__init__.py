"""Probabilistic multi-horizon forecasting toolkit.

A neural basis model for location, scale and shape: one shared basis network
feeds per-feature shape functions whose linear projections parameterize a
full predictive distribution (Johnson's SU, Normal or Student-t) for every
step of a day-ahead horizon, next to a dense distributional baseline.
Includes the moving-window data pipeline, reversible per-sample
normalization, NLL training with early stopping, weekly-recalibration
backtesting, ensembling, and the usual probabilistic scores (CRPS via
pinball losses, PICP/Kupiec, Diebold-Mariano).
"""

__version__ = "0.1.0"

from .datapipe import (HourlySeries, RevinScaler, RevinStats, SampleSet, ZScoreScaler,
                       build_samples, load_csv, make_scaler)
from .dists import (JohnsonSUHead, JsuParams, LinkConfig, NormalHead, NormalParams,
                    StudentTHead, StudentTParams, make_head)
from .errors import (ConfigurationError, DataError, NbmlssError, NumericError,
                     StateError)
from .evaluation import (BacktestReport, EnsembleSpec, ForecastDistribution, build_report,
                         crps, dm_test, extract_quantiles, kupiec, mae, picp, pinball)
from .model import (ConstantHeadModel, DdnnConfig, DdnnModel, NbmlssConfig, NbmlssModel,
                    export_shape_functions, load_model, make_exogenous_mask, save_model)
from .train import (ForecastPipeline, GridSpec, RecalibrationPlan, TrainConfig, fit,
                    grid_search, run_recalibration)

__all__ = [
    "__version__",
    "HourlySeries", "SampleSet", "load_csv", "build_samples",
    "ZScoreScaler", "RevinScaler", "RevinStats", "make_scaler",
    "LinkConfig", "make_head", "JohnsonSUHead", "NormalHead", "StudentTHead",
    "JsuParams", "NormalParams", "StudentTParams",
    "NbmlssConfig", "NbmlssModel", "DdnnConfig", "DdnnModel", "ConstantHeadModel",
    "make_exogenous_mask", "export_shape_functions", "save_model", "load_model",
    "TrainConfig", "fit", "RecalibrationPlan", "ForecastPipeline",
    "run_recalibration", "GridSpec", "grid_search",
    "EnsembleSpec", "ForecastDistribution", "extract_quantiles",
    "pinball", "crps", "mae", "picp", "kupiec", "dm_test", "build_report",
    "BacktestReport",
    "NbmlssError", "ConfigurationError", "DataError", "NumericError", "StateError",
]
