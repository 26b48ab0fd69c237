"""Flat JSON parameter checkpoints.

Format (version ``nbmlss-params-v1``): an ordered list of objects
``{"name", "shape", "values"}`` where ``values`` holds the row-major float64
entries.  Floats are serialized with Python's shortest round-trip repr, so a
save/load cycle is bit-exact for finite values.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..errors import ConfigurationError, DataError, NumericError
from .tensor import Parameter

__all__ = ["params_to_payload", "payload_to_arrays", "save_params", "load_params"]

FORMAT = "nbmlss-params-v1"


def params_to_payload(params: Iterable[Parameter]) -> dict:
    entries = []
    for p in params:
        if not np.isfinite(p.values).all():
            raise NumericError(f"refusing to checkpoint non-finite parameter {p.name!r}")
        entries.append({
            "name": p.name,
            "shape": list(p.values.shape),
            "values": p.values.reshape(-1).tolist(),
        })
    return {"format": FORMAT, "params": entries}


def payload_to_arrays(payload: dict) -> list[tuple[str, np.ndarray]]:
    if payload.get("format") != FORMAT:
        raise DataError(f"unknown checkpoint format {payload.get('format')!r}")
    out = []
    for entry in payload["params"]:
        shape = tuple(entry["shape"])
        values = np.asarray(entry["values"], dtype=np.float64).reshape(shape)
        out.append((entry["name"], values))
    return out


def save_params(params: Iterable[Parameter], path: str | Path) -> None:
    Path(path).write_text(json.dumps(params_to_payload(params)))


def load_params(path: str | Path, params: Sequence[Parameter]) -> None:
    """Restore values into `params`, matched by order and name."""
    payload = json.loads(Path(path).read_text())
    arrays = payload_to_arrays(payload)
    if len(arrays) != len(params):
        raise ConfigurationError(
            f"checkpoint holds {len(arrays)} parameters, model has {len(params)}")
    for p, (name, values) in zip(params, arrays):
        if p.name != name:
            raise ConfigurationError(f"parameter order mismatch: expected {p.name!r}, got {name!r}")
        if p.values.shape != values.shape:
            raise ConfigurationError(
                f"shape mismatch for {name!r}: model {p.values.shape}, checkpoint {values.shape}")
        p.values[...] = values
