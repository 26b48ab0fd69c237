"""Forecasting architectures.

``NbmlssModel`` is an additive distributional regressor: a single small
network, applied to every feature value independently, produces a set of
shared basis functions; per-feature linear combinations of those bases give
one shape function per feature, and per-parameter linear projections of the
shape outputs give the raw distribution parameters for every step of the
horizon.  Every raw output is therefore an affine function of the per-feature
shape values, which is what makes the fitted feature maps directly
inspectable.

``DdnnModel`` is the black-box baseline: a dense two-hidden-layer network
emitting all raw distribution parameters jointly.

``ConstantHeadModel`` fits an unconditional distribution (trainable biases
only); it doubles as a climatological baseline.

All three share the same distribution heads, the same raw-output layout and
the same optional output-side affine pushforward driven by per-sample
normalization statistics.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import datapipe
from .datapipe import RevinStats, revin_denorm_params
from .diffcore import (DropoutMask, Parameter, Tensor, as_tensor, concat,
                       dense_forward, dropout_apply, payload_to_arrays,
                       params_to_payload, softplus_inverse)
from .dists import LinkConfig, make_head
from .errors import ConfigurationError

__all__ = [
    "NbmlssConfig", "NbmlssModel", "DdnnConfig", "DdnnModel",
    "ConstantHeadModel", "make_exogenous_mask",
    "ShapeTable", "export_shape_functions", "feature_grid_from_training",
    "save_model", "load_model",
]


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


class _ModelBase:
    """Shared training/prediction plumbing for every architecture."""

    head = None
    horizon: int = 0
    revin: bool = False

    def parameters(self) -> list[Parameter]:
        return list(self._params)

    def forward(self, x, stats: RevinStats | None = None, training: bool = False,
                rng: np.random.Generator | None = None):
        raise NotImplementedError

    def _check_stats(self, stats):
        if self.revin and stats is None:
            raise ConfigurationError(
                "model was configured with per-sample normalization but no stats were passed")
        if not self.revin and stats is not None:
            raise ConfigurationError(
                "per-sample stats passed to a model configured without them")

    def _finish(self, raw, stats: RevinStats | None):
        params = self.head.transform(raw, self.horizon)
        if stats is not None:
            params = revin_denorm_params(params, stats)
        return params

    def loss(self, x, y, stats: RevinStats | None = None, training: bool = True,
             rng: np.random.Generator | None = None) -> Tensor:
        """Mean negative log-likelihood over the batch."""
        params = self.forward(x, stats=stats, training=training, rng=rng)
        return self.head.nll(np.asarray(y, dtype=np.float64), params).mean()

    def predict_params(self, x, stats: RevinStats | None = None):
        """Frozen-model forward returning plain numpy parameter arrays."""
        params = self.forward(x, stats=stats, training=False)
        return params.map(lambda t: t.values.copy() if isinstance(t, Tensor)
                          else np.asarray(t, dtype=np.float64))

    def state_values(self) -> list[np.ndarray]:
        return [p.values.copy() for p in self.parameters()]

    def load_state_values(self, values: Sequence[np.ndarray]) -> None:
        for p, v in zip(self.parameters(), values):
            p.values[...] = v


# ---------------------------------------------------------------------------
# NBMLSS
# ---------------------------------------------------------------------------

@dataclass
class NbmlssConfig:
    n_features: int = datapipe.N_FEATURES
    horizon: int = datapipe.HORIZON
    hidden_units: int = 64   # width of the shared basis network's first layer
    n_basis: int = 64        # number of shared basis functions
    dropout: float = 0.0
    head: LinkConfig = field(default_factory=LinkConfig)
    revin: bool = False
    revin_affine: bool = False
    first_layer_bias: bool = False
    feature_mask: np.ndarray | None = None  # [n_p, horizon, n_features] of {0,1}

    def __post_init__(self):
        for name in ("n_features", "horizon", "hidden_units", "n_basis"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must lie in [0, 1)")
        if self.feature_mask is not None:
            mask = np.asarray(self.feature_mask, dtype=np.float64)
            n_p = make_head(self.head).n_params
            want = (n_p, self.horizon, self.n_features)
            if mask.shape != want:
                raise ConfigurationError(f"feature mask shape {mask.shape}, expected {want}")
            if not np.isin(mask, (0.0, 1.0)).all():
                raise ConfigurationError("feature mask entries must be 0 or 1")
            if (mask.sum(axis=2) < 1).any():
                raise ConfigurationError("feature mask has an all-zero row: every "
                                         "(parameter, hour) needs at least one feature")
            self.feature_mask = mask


class NbmlssModel(_ModelBase):
    """Shared-basis additive model for all distribution parameters."""

    def __init__(self, config: NbmlssConfig, seed=0):
        rng = _as_rng(seed)
        cfg = config
        self.config = cfg
        self.head = make_head(cfg.head)
        self.horizon = cfg.horizon
        self.revin = cfg.revin
        n_u, n_z, n_f, H = cfg.hidden_units, cfg.n_basis, cfg.n_features, cfg.horizon
        n_p = self.head.n_params

        self.basis_w1 = Parameter(_he_uniform(rng, (1, n_u), fan_in=1), "basis_w1")
        self.basis_b1 = Parameter(np.zeros(n_u), "basis_b1") if cfg.first_layer_bias else None
        self.basis_w2 = Parameter(_he_uniform(rng, (n_u, n_z), fan_in=n_u), "basis_w2")
        self.basis_b2 = Parameter(np.zeros(n_z), "basis_b2")
        self.shape_w = Parameter(_he_uniform(rng, (n_f, n_z), fan_in=n_z), "shape_w")
        self.proj_v = [Parameter(_he_uniform(rng, (n_f, H), fan_in=n_f), f"proj_v{p}")
                       for p in range(n_p)]
        self.proj_b = [Parameter(np.zeros(H), f"proj_b{p}") for p in range(n_p)]
        self.revin_gain = None
        self.revin_bias = None
        if cfg.revin_affine:
            n_aff = min(datapipe.LAG_FEATURES.stop, n_f)
            self.revin_gain = Parameter(np.ones(n_aff), "revin_gain")
            self.revin_bias = Parameter(np.zeros(n_aff), "revin_bias")

        self._params = [self.basis_w1]
        if self.basis_b1 is not None:
            self._params.append(self.basis_b1)
        self._params += [self.basis_w2, self.basis_b2, self.shape_w]
        self._params += self.proj_v + self.proj_b
        if self.revin_gain is not None:
            self._params += [self.revin_gain, self.revin_bias]

        expected = n_u + n_u * n_z + n_z + n_f * n_z + n_p * H * n_f + n_p * H
        if cfg.first_layer_bias:
            expected += n_u
        if cfg.revin_affine:
            expected += 2 * min(datapipe.LAG_FEATURES.stop, n_f)
        actual = sum(p.values.size for p in self._params)
        assert actual == expected, f"parameter count {actual} != expected {expected}"

    # -- pieces --------------------------------------------------------------
    def basis_eval(self, scalars, training: bool = False,
                   rng: np.random.Generator | None = None) -> Tensor:
        """Evaluate the shared basis functions on a flat batch of scalars.

        Input [M] or [M, 1]; output [M, n_basis].  The same weights serve
        every feature, so callers stream all batch*feature scalars at once.
        """
        s = as_tensor(scalars)
        if s.ndim == 1:
            s = s.reshape(s.shape[0], 1)
        drop = self.config.dropout
        if training and drop > 0.0 and rng is None:
            raise ConfigurationError("training-mode dropout needs an rng")
        mode = "train" if training else "eval"
        h1 = dense_forward(s, self.basis_w1, self.basis_b1).relu()
        if training and drop > 0.0:
            h1 = dropout_apply(h1, DropoutMask.draw(h1.shape, 1.0 - drop, rng, mode))
        z = dense_forward(h1, self.basis_w2, self.basis_b2).relu()
        if training and drop > 0.0:
            z = dropout_apply(z, DropoutMask.draw(z.shape, 1.0 - drop, rng, mode))
        return z

    def _affine_inputs(self, x: Tensor) -> Tensor:
        if self.revin_gain is None:
            return x
        n_aff = self.revin_gain.shape[0]
        head = x[:, :n_aff] * self.revin_gain + self.revin_bias
        return concat([head, x[:, n_aff:]], axis=1)

    def shape_values(self, x, training: bool = False,
                     rng: np.random.Generator | None = None) -> Tensor:
        """Per-feature shape function outputs, [B, n_features]."""
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.config.n_features:
            raise ConfigurationError(
                f"input shape {x.shape}, expected [batch, {self.config.n_features}]")
        x = self._affine_inputs(x)
        B, n_f = x.shape
        z = self.basis_eval(x.reshape(B * n_f, 1), training=training, rng=rng)
        z3 = z.reshape(B, n_f, self.config.n_basis)
        return (z3 * self.shape_w).sum(axis=2)

    def effective_projection(self, p: int) -> Tensor:
        """Projection weights for parameter p with the feature mask applied, [n_f, H]."""
        if self.config.feature_mask is None:
            return self.proj_v[p]
        return self.proj_v[p] * self.config.feature_mask[p].T

    def raw_outputs(self, x, training: bool = False,
                    rng: np.random.Generator | None = None) -> Tensor:
        """Raw parameter vector [B, n_params * horizon] in stacked layout."""
        f = self.shape_values(x, training=training, rng=rng)
        raws = [f @ self.effective_projection(p) + self.proj_b[p]
                for p in range(self.head.n_params)]
        return concat(raws, axis=1)

    def forward(self, x, stats: RevinStats | None = None, training: bool = False,
                rng: np.random.Generator | None = None):
        self._check_stats(stats)
        raw = self.raw_outputs(x, training=training, rng=rng)
        return self._finish(raw, stats)


# ---------------------------------------------------------------------------
# DDNN baseline
# ---------------------------------------------------------------------------

@dataclass
class DdnnConfig:
    n_features: int = datapipe.N_FEATURES
    horizon: int = datapipe.HORIZON
    hidden_units: int = 512
    dropout: float = 0.0
    head: LinkConfig = field(default_factory=LinkConfig)
    revin: bool = False

    def __post_init__(self):
        for name in ("n_features", "horizon", "hidden_units"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must lie in [0, 1)")


class DdnnModel(_ModelBase):
    """Dense two-hidden-layer network emitting all raw parameters jointly."""

    def __init__(self, config: DdnnConfig, seed=0):
        rng = _as_rng(seed)
        self.config = config
        self.head = make_head(config.head)
        self.horizon = config.horizon
        self.revin = config.revin
        n_f, n_u, H = config.n_features, config.hidden_units, config.horizon
        n_out = self.head.n_params * H
        self.w1 = Parameter(_he_uniform(rng, (n_f, n_u), fan_in=n_f), "w1")
        self.b1 = Parameter(np.zeros(n_u), "b1")
        self.w2 = Parameter(_he_uniform(rng, (n_u, n_u), fan_in=n_u), "w2")
        self.b2 = Parameter(np.zeros(n_u), "b2")
        self.w3 = Parameter(_he_uniform(rng, (n_u, n_out), fan_in=n_u), "w3")
        self.b3 = Parameter(np.zeros(n_out), "b3")
        self._params = [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]

    def init_output_bias(self, target_mean: np.ndarray, target_std: np.ndarray) -> None:
        """Start the location/scale output slots at the marginal target moments."""
        H = self.horizon
        eps, gam = self.head.cfg.epsilon, self.head.cfg.gamma
        loc = np.broadcast_to(np.asarray(target_mean, dtype=np.float64), (H,))
        std = np.broadcast_to(np.asarray(target_std, dtype=np.float64), (H,))
        raw_scale = softplus_inverse(np.maximum((std - eps) / gam, 1e-6))
        self.b3.values[0:H] = loc
        self.b3.values[H:2 * H] = raw_scale

    def raw_outputs(self, x, training: bool = False,
                    rng: np.random.Generator | None = None) -> Tensor:
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.config.n_features:
            raise ConfigurationError(
                f"input shape {x.shape}, expected [batch, {self.config.n_features}]")
        drop = self.config.dropout
        if training and drop > 0.0 and rng is None:
            raise ConfigurationError("training-mode dropout needs an rng")
        h = dense_forward(x, self.w1, self.b1).relu()
        if training and drop > 0.0:
            h = dropout_apply(h, DropoutMask.draw(h.shape, 1.0 - drop, rng, "train"))
        h = dense_forward(h, self.w2, self.b2).relu()
        if training and drop > 0.0:
            h = dropout_apply(h, DropoutMask.draw(h.shape, 1.0 - drop, rng, "train"))
        return dense_forward(h, self.w3, self.b3)

    def forward(self, x, stats: RevinStats | None = None, training: bool = False,
                rng: np.random.Generator | None = None):
        self._check_stats(stats)
        raw = self.raw_outputs(x, training=training, rng=rng)
        return self._finish(raw, stats)


# ---------------------------------------------------------------------------
# constant (unconditional) baseline
# ---------------------------------------------------------------------------

class ConstantHeadModel(_ModelBase):
    """Distribution with trainable biases only: ignores every input feature."""

    def __init__(self, head: LinkConfig | str = "normal", horizon: int = datapipe.HORIZON):
        self.head = make_head(head)
        self.horizon = horizon
        self.revin = False
        self.config = None
        self.raw_bias = Parameter(np.zeros(self.head.n_params * horizon), "raw_bias")
        self._params = [self.raw_bias]

    def init_output_bias(self, target_mean, target_std) -> None:
        H = self.horizon
        eps, gam = self.head.cfg.epsilon, self.head.cfg.gamma
        self.raw_bias.values[0:H] = np.broadcast_to(np.asarray(target_mean), (H,))
        std = np.broadcast_to(np.asarray(target_std, dtype=np.float64), (H,))
        self.raw_bias.values[H:2 * H] = softplus_inverse(np.maximum((std - eps) / gam, 1e-6))

    def raw_outputs(self, x, training: bool = False,
                    rng: np.random.Generator | None = None) -> Tensor:
        n = np.asarray(x).shape[0] if np.ndim(x) else int(x)
        return self.raw_bias + np.zeros((n, 1))

    def forward(self, x, stats: RevinStats | None = None, training: bool = False,
                rng: np.random.Generator | None = None):
        self._check_stats(stats)
        return self._finish(self.raw_outputs(x), stats)


# ---------------------------------------------------------------------------
# masked-exogenous configuration
# ---------------------------------------------------------------------------

def make_exogenous_mask(n_params: int, horizon: int = datapipe.HORIZON,
                        n_features: int = datapipe.N_FEATURES) -> np.ndarray:
    """Binary mask keeping, for each target hour h, only the exogenous
    forecasts of that same hour; lagged prices and calendar features stay on.

    Layout assumption: 3 lag blocks, 3 exogenous blocks of `horizon` columns
    each, then 3 calendar columns (so n_features == 6 * horizon + 3).
    """
    if n_features != 6 * horizon + 3:
        raise ConfigurationError(
            f"hour-aligned mask requires the documented layout with "
            f"{6 * horizon + 3} features, got {n_features}")
    mask = np.zeros((n_params, horizon, n_features))
    lag_stop = 3 * horizon
    mask[:, :, :lag_stop] = 1.0          # lagged prices
    mask[:, :, 6 * horizon:] = 1.0       # calendar + temporal age
    hours = np.arange(horizon)
    for k in range(3):                   # load, wind, solar blocks
        mask[:, hours, lag_stop + k * horizon + hours] = 1.0
    return mask


# ---------------------------------------------------------------------------
# shape-function export
# ---------------------------------------------------------------------------

@dataclass
class ShapeTable:
    """Flat table of sampled shape functions and their weighted contributions."""

    feature: np.ndarray        # int feature index
    param: np.ndarray          # parameter name per row
    hour: np.ndarray           # int
    x: np.ndarray              # display-unit grid value
    f: np.ndarray              # shape function output
    contribution: np.ndarray   # projection weight * f
    extrapolated: np.ndarray   # bool

    def write_csv(self, path: str | Path, feature_labels: Sequence[str] | None = None) -> None:
        with Path(path).open("w") as fh:
            fh.write("feature,param,hour,x,f,contribution,extrapolated\n")
            for i in range(len(self.x)):
                label = (feature_labels[self.feature[i]] if feature_labels is not None
                         else str(self.feature[i]))
                fh.write(f"{label},{self.param[i]},{self.hour[i]},{self.x[i]!r},"
                         f"{self.f[i]!r},{self.contribution[i]!r},"
                         f"{int(self.extrapolated[i])}\n")


def feature_grid_from_training(x_train: np.ndarray, n_points: int = 256) -> np.ndarray:
    """Per-feature evaluation grid spanning exactly [min, max] of training data."""
    lo = x_train.min(axis=0)
    hi = x_train.max(axis=0)
    t = np.linspace(0.0, 1.0, n_points)
    return lo[:, None] + (hi - lo)[:, None] * t[None, :]


def export_shape_functions(model: NbmlssModel, grid: np.ndarray,
                           param_indices: Sequence[int] | None = None,
                           hours: Sequence[int] | None = None,
                           display_grid: np.ndarray | None = None,
                           train_range: tuple[np.ndarray, np.ndarray] | None = None) -> ShapeTable:
    """Tabulate f_i over a per-feature grid plus the weighted contribution of
    each requested (parameter, hour) pair.

    `grid` is [n_features, n_points] in model space; `display_grid` (same
    shape) supplies the x column in original units when scaling was applied.
    Rows are flagged as extrapolated when the grid value leaves
    `train_range = (per-feature min, per-feature max)` in model space.
    """
    n_f, n_pts = grid.shape
    if n_f != model.config.n_features:
        raise ConfigurationError(f"grid has {n_f} features, model expects "
                                 f"{model.config.n_features}")
    if param_indices is None:
        param_indices = range(model.head.n_params)
    if hours is None:
        hours = range(model.horizon)
    display = grid if display_grid is None else display_grid

    z = model.basis_eval(grid.reshape(-1, 1)).values.reshape(n_f, n_pts, -1)
    f_grid = np.einsum("igk,ik->ig", z, model.shape_w.values)
    if train_range is not None:
        lo, hi = train_range
        extrap = (grid < lo[:, None]) | (grid > hi[:, None])
    else:
        extrap = np.zeros_like(grid, dtype=bool)

    rows_feature, rows_param, rows_hour = [], [], []
    rows_x, rows_f, rows_c, rows_e = [], [], [], []
    for p in param_indices:
        v_eff = model.effective_projection(p).values  # [n_f, H]
        pname = model.head.param_names[p]
        for h in hours:
            rows_feature.append(np.repeat(np.arange(n_f), n_pts))
            rows_param.append(np.repeat(pname, n_f * n_pts))
            rows_hour.append(np.full(n_f * n_pts, h))
            rows_x.append(display.reshape(-1))
            rows_f.append(f_grid.reshape(-1))
            rows_c.append((v_eff[:, h][:, None] * f_grid).reshape(-1))
            rows_e.append(extrap.reshape(-1))
    return ShapeTable(
        feature=np.concatenate(rows_feature),
        param=np.concatenate(rows_param),
        hour=np.concatenate(rows_hour).astype(int),
        x=np.concatenate(rows_x),
        f=np.concatenate(rows_f),
        contribution=np.concatenate(rows_c),
        extrapolated=np.concatenate(rows_e),
    )


# ---------------------------------------------------------------------------
# model checkpointing (parameters + config header)
# ---------------------------------------------------------------------------

CKPT_FORMAT = "nbmlss-ckpt-v1"


def _mask_spec(cfg) -> tuple[str, str | None, list | None]:
    mask = getattr(cfg, "feature_mask", None)
    if mask is None:
        return "full", None, None
    digest = hashlib.sha256(np.ascontiguousarray(mask).tobytes()).hexdigest()
    hour_mask = make_exogenous_mask(mask.shape[0], cfg.horizon, cfg.n_features) \
        if cfg.n_features == 6 * cfg.horizon + 3 else None
    if hour_mask is not None and np.array_equal(mask, hour_mask):
        return "hour", digest, None
    return "custom", digest, mask.astype(int).tolist()


def save_model(model, path: str | Path) -> None:
    if isinstance(model, NbmlssModel):
        kind = "nbmlss"
        cfg = model.config
        mask_kind, mask_hash, mask_values = _mask_spec(cfg)
        config = {
            "n_features": cfg.n_features, "horizon": cfg.horizon,
            "hidden_units": cfg.hidden_units, "n_basis": cfg.n_basis,
            "dropout": cfg.dropout, "revin": cfg.revin,
            "revin_affine": cfg.revin_affine, "first_layer_bias": cfg.first_layer_bias,
            "mask": mask_kind, "mask_hash": mask_hash, "mask_values": mask_values,
        }
    elif isinstance(model, DdnnModel):
        kind = "ddnn"
        cfg = model.config
        config = {
            "n_features": cfg.n_features, "horizon": cfg.horizon,
            "hidden_units": cfg.hidden_units, "dropout": cfg.dropout,
            "revin": cfg.revin,
        }
    elif isinstance(model, ConstantHeadModel):
        kind = "constant"
        config = {"horizon": model.horizon}
    else:
        raise ConfigurationError(f"cannot checkpoint object of type {type(model).__name__}")
    payload = {
        "format": CKPT_FORMAT,
        "model": kind,
        "head": {"kind": model.head.cfg.kind, "epsilon": model.head.cfg.epsilon,
                 "gamma": model.head.cfg.gamma},
        "config": config,
        "params": params_to_payload(model.parameters())["params"],
    }
    Path(path).write_text(json.dumps(payload))


def load_model(path: str | Path):
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != CKPT_FORMAT:
        raise ConfigurationError(f"unknown checkpoint format {payload.get('format')!r}")
    head = LinkConfig(kind=payload["head"]["kind"], epsilon=payload["head"]["epsilon"],
                      gamma=payload["head"]["gamma"])
    cfg = payload["config"]
    kind = payload["model"]
    if kind == "nbmlss":
        mask = None
        if cfg["mask"] == "hour":
            mask = make_exogenous_mask(make_head(head).n_params, cfg["horizon"],
                                       cfg["n_features"])
        elif cfg["mask"] == "custom":
            mask = np.asarray(cfg["mask_values"], dtype=np.float64)
        model = NbmlssModel(NbmlssConfig(
            n_features=cfg["n_features"], horizon=cfg["horizon"],
            hidden_units=cfg["hidden_units"], n_basis=cfg["n_basis"],
            dropout=cfg["dropout"], head=head, revin=cfg["revin"],
            revin_affine=cfg["revin_affine"], first_layer_bias=cfg["first_layer_bias"],
            feature_mask=mask))
    elif kind == "ddnn":
        model = DdnnModel(DdnnConfig(
            n_features=cfg["n_features"], horizon=cfg["horizon"],
            hidden_units=cfg["hidden_units"], dropout=cfg["dropout"],
            head=head, revin=cfg["revin"]))
    elif kind == "constant":
        model = ConstantHeadModel(head=head, horizon=cfg["horizon"])
    else:
        raise ConfigurationError(f"unknown model kind {kind!r} in checkpoint")
    arrays = payload_to_arrays({"format": "nbmlss-params-v1", "params": payload["params"]})
    params = model.parameters()
    if len(arrays) != len(params):
        raise ConfigurationError(f"checkpoint holds {len(arrays)} parameters, "
                                 f"model has {len(params)}")
    for p, (name, values) in zip(params, arrays):
        if p.name != name or p.values.shape != values.shape:
            raise ConfigurationError(
                f"checkpoint field {name!r} {values.shape} does not match model "
                f"parameter {p.name!r} {p.values.shape}")
        p.values[...] = values
    return model
