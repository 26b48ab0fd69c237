"""Shared synthetic-data helpers for the test suite."""

from __future__ import annotations

from datetime import datetime, timedelta
from pathlib import Path

import numpy as np
import pytest


def synthetic_market_frame(n_days: int, seed: int = 0, start: str = "2021-01-04",
                           level_shift: float = 0.0, shift_day: int | None = None):
    """Hourly price/load/wind/solar arrays with daily and weekly structure.

    Returns (timestamps_iso, price, load, wind, solar).  `start` defaults to a
    Monday.  If `shift_day` is given, a level step of `level_shift` is added
    to the price from that day onward.
    """
    rng = np.random.default_rng(seed)
    n = n_days * 24
    hours = np.arange(n)
    hod = hours % 24
    dow = (hours // 24) % 7

    load = 1000 + 300 * np.sin(2 * np.pi * (hod - 8) / 24) + 50 * (dow < 5) \
        + rng.normal(0, 20, n)
    wind = np.clip(400 + 200 * np.sin(2 * np.pi * hours / (24 * 3.5))
                   + rng.normal(0, 60, n), 0, None)
    solar = np.clip(np.sin(np.pi * (hod - 6) / 12), 0, None) * 500 + rng.normal(0, 5, n)
    solar = np.clip(solar, 0, None)

    price = (30 + 0.04 * (load - 1000) - 0.02 * wind - 0.015 * solar
             + 4 * np.sin(2 * np.pi * hod / 24) + rng.normal(0, 2.0, n))
    if shift_day is not None:
        price = price + level_shift * (hours // 24 >= shift_day)

    t0 = datetime.fromisoformat(start)
    stamps = [(t0 + timedelta(hours=int(h))).strftime("%Y-%m-%dT%H:00:00Z") for h in hours]
    return stamps, price, load, wind, solar


def write_market_csv(path: Path, n_days: int, seed: int = 0, start: str = "2021-01-04",
                     level_shift: float = 0.0, shift_day: int | None = None,
                     drop_rows: list[int] | None = None,
                     mutate=None) -> Path:
    """Write a synthetic market CSV; `drop_rows` removes 0-based data rows."""
    stamps, price, load, wind, solar = synthetic_market_frame(
        n_days, seed=seed, start=start, level_shift=level_shift, shift_day=shift_day)
    lines = ["timestamp,price,load_fc,wind_fc,solar_fc"]
    for i, ts in enumerate(stamps):
        if drop_rows and i in drop_rows:
            continue
        lines.append(f"{ts},{price[i]:.4f},{load[i]:.2f},{wind[i]:.2f},{solar[i]:.2f}")
    if mutate is not None:
        lines = mutate(lines)
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture
def market_csv(tmp_path):
    """A clean 60-day market CSV starting on a Monday."""
    return write_market_csv(tmp_path / "market.csv", n_days=60, seed=7)
