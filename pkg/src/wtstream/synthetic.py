"""Synthetic hourly weather / water-temperature series.

The generator stands in for the unpublished field campaign: air temperature
with a diurnal cycle and AR(1) weather noise, intermittent rainfall, and a
water temperature that responds to current and 17-hour-lagged air
temperature and to rain.
"""
from __future__ import annotations

from datetime import datetime, timedelta

import numpy as np

from .timeutil import format_instant

LAG_HOURS = 17


def air_temperature(n: int, rng: np.random.Generator, mean: float = 17.0,
                    diurnal: float = 5.0, noise: float = 6.0, phi: float = 0.97) -> np.ndarray:
    hours = np.arange(n)
    ar = np.empty(n)
    ar[0] = rng.normal(0.0, noise)
    innov = noise * np.sqrt(1.0 - phi**2)
    for t in range(1, n):
        ar[t] = phi * ar[t - 1] + rng.normal(0.0, innov)
    return mean + diurnal * np.sin(2 * np.pi * (hours - 9) / 24.0) + ar


def rainfall(n: int, rng: np.random.Generator, p_rain: float = 0.08, scale: float = 3.0) -> np.ndarray:
    wet = rng.random(n) < p_rain
    return np.where(wet, rng.exponential(scale, size=n), 0.0)


def water_temperature(tm: np.ndarray, tm_lag: np.ndarray, rf: np.ndarray) -> np.ndarray:
    return 0.8 * tm + 0.15 * tm_lag - 0.3 * np.log1p(rf) + 5.0


def wt_dataset(n: int = 1126, seed: int = 0, noise_sd: float = 0.5):
    """Rows of (TM, TM_lag17, RF) and the noisy water temperature target.

    Returns ``(columns, wt)`` where ``columns`` maps ``"TM"``, ``"TM_lag"`` and
    ``"RF"`` to arrays of length ``n``.
    """
    rng = np.random.default_rng(seed)
    tm_full = air_temperature(n + LAG_HOURS, rng)
    tm = tm_full[LAG_HOURS:]
    tm_lag = tm_full[:n]
    rf = rainfall(n, rng)
    wt = water_temperature(tm, tm_lag, rf) + rng.normal(0.0, noise_sd, size=n)
    return {"TM": tm, "TM_lag": tm_lag, "RF": rf}, wt


def lagged_pair(n: int = 1000, lag: int = LAG_HOURS, seed: int = 0, noise_sd: float = 0.1):
    """``x`` and ``y`` with ``y[t] = x[t - lag] + noise``."""
    rng = np.random.default_rng(seed)
    full = air_temperature(n + lag, rng)
    x = full[lag:]
    y = full[:n] + rng.normal(0.0, noise_sd, size=n)
    return y, x


def write_series_csv(path, start: datetime, step: timedelta, values) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("timestamp,value\n")
        for i, v in enumerate(values):
            fh.write(f"{format_instant(start + i * step)},{float(v)!r}\n")


def write_training_csv(path, columns: dict, wt) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("TM,TM_lag,RF,WT\n")
        for row in zip(columns["TM"], columns["TM_lag"], columns["RF"], wt):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
