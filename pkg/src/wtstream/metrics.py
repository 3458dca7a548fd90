"""Model evaluation statistics and lagged cross-correlation.

Implemented functions:
    rmse: root-mean-square error.
    nash: Nash-Sutcliffe efficiency.
    r_coef: correlation coefficient derived from the explained variance.
    ia: Willmott's index of agreement.
    cross_correlation: Pearson-based cross-correlation at a single shift.
    select_lag: scan shifts 0..k_max and pick the strongest positive coupling.
    evaluate: all of the above bundled into a MetricsReport.

Standard deviations use the population convention (divide by N) so that the
zero-lag autocorrelation of any non-constant series is exactly one.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import (
    ConstantObserved,
    ConstantSeries,
    DegenerateDenominator,
    EmptySeries,
    LagTooLarge,
    LengthMismatch,
    NonFiniteValue,
    UndefinedMetric,
)


def as_series(values, name: str = "series") -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        arr = arr.reshape(-1)
    if arr.size == 0:
        raise EmptySeries(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue(f"{name} contains NaN or infinite values")
    return arr


def _pair(obs, pred) -> tuple[np.ndarray, np.ndarray]:
    o = as_series(obs, "obs")
    p = as_series(pred, "pred")
    if o.size != p.size:
        raise LengthMismatch(f"obs has {o.size} values, pred has {p.size}")
    return o, p


def _sums(o: np.ndarray, p: np.ndarray) -> tuple[float, float]:
    sse = float(np.sum((o - p) ** 2))
    sst = float(np.sum((o - o.mean()) ** 2))
    return sse, sst


def rmse(obs, pred) -> float:
    o, p = _pair(obs, pred)
    return math.sqrt(float(np.sum((o - p) ** 2)) / o.size)


def nash(obs, pred) -> float:
    o, p = _pair(obs, pred)
    sse, sst = _sums(o, p)
    if sst == 0.0:
        raise ConstantObserved("observed series is constant")
    return 1.0 - sse / sst


def r_coef(obs, pred) -> float:
    """Square root of the explained-variance fraction.

    Raises UndefinedMetric when the model is worse than the observed mean
    (negative radicand).
    """
    value = nash(obs, pred)
    if value < 0.0:
        raise UndefinedMetric(f"radicand is negative (nash={value:.6g})")
    return math.sqrt(value)


def ia(obs, pred) -> float:
    o, p = _pair(obs, pred)
    mean = o.mean()
    denom = float(np.sum((np.abs(p - mean) + np.abs(o - mean)) ** 2))
    if denom == 0.0:
        raise DegenerateDenominator("all observations and predictions equal the observed mean")
    # |p - o| <= |p - mean| + |o - mean| termwise, so only rounding can leave [0, 1]
    return min(1.0, max(0.0, 1.0 - float(np.sum((p - o) ** 2)) / denom))


def cross_correlation(y, x, k: int) -> float:
    """Correlation of ``y[t]`` with ``x[t + k]``, normalized by N and population stds.

    Negative ``k`` pairs ``y[t]`` with earlier values of ``x``.
    """
    ys = as_series(y, "y")
    xs = as_series(x, "x")
    n = ys.size
    if xs.size != n:
        raise LengthMismatch(f"y has {n} values, x has {xs.size}")
    if abs(k) >= n:
        raise LagTooLarge(f"|k|={abs(k)} must be below N={n}")
    sy = ys.std()
    sx = xs.std()
    if sy == 0.0 or sx == 0.0:
        raise ConstantSeries("zero standard deviation")
    dy = ys - ys.mean()
    dx = xs - xs.mean()
    if k >= 0:
        total = float(np.dot(dy[: n - k], dx[k:]))
    else:
        total = float(np.dot(dy[-k:], dx[: n + k]))
    return total / (n * sy * sx)


@dataclass
class LagScan:
    correlations: list[float]
    chosen_lag: int

    def to_dict(self) -> dict:
        return asdict(self)


def select_lag(y, x, k_max: int) -> LagScan:
    """Find the delay ``k`` in ``0..k_max`` at which ``y[t]`` best tracks ``x[t - k]``.

    ``correlations[k]`` holds ``cross_correlation(y, x, -k)``. The maximum of
    the signed correlation wins; ties go to the smaller delay.
    """
    n = len(y)
    if k_max < 0:
        raise LagTooLarge("k_max must be non-negative")
    if k_max >= n:
        raise LagTooLarge(f"k_max={k_max} must be below N={n}")
    corr = [cross_correlation(y, x, -k) for k in range(k_max + 1)]
    best = 0
    for k in range(1, k_max + 1):
        if corr[k] > corr[best]:
            best = k
    return LagScan(correlations=corr, chosen_lag=best)


@dataclass
class MetricsReport:
    rmse: float
    nash: float
    r: float | None
    r_defined: bool
    ia: float
    n: int
    mean_obs: float
    std_obs: float
    mean_pred: float
    std_pred: float

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(obs, pred) -> MetricsReport:
    o, p = _pair(obs, pred)
    if o.size < 2:
        raise EmptySeries("evaluation needs at least two pairs")
    nse = nash(o, p)
    try:
        r = r_coef(o, p)
    except UndefinedMetric:
        r = None
    return MetricsReport(
        rmse=rmse(o, p),
        nash=nse,
        r=r,
        r_defined=r is not None,
        ia=ia(o, p),
        n=int(o.size),
        mean_obs=float(o.mean()),
        std_obs=float(o.std()),
        mean_pred=float(p.mean()),
        std_pred=float(p.std()),
    )
