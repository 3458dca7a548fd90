"""Replay recorded series through the ingestion path.

With ``speedup=math.inf`` nothing sleeps; the optional clock is moved to each
timestamp after all points carrying it are published, and ``on_advance`` is
called so scheduled work can catch up.
"""
from __future__ import annotations

import heapq
import itertools
import math
import os
import time
from typing import Callable

from .broker import DataPoint
from .errors import ParseError
from .repository import parse_csv


def read_series(path: str | os.PathLike, stream_id: str) -> list[DataPoint]:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        return parse_csv(text, stream_id)
    except ParseError as exc:
        raise ParseError(f"{os.fspath(path)}: {exc.args[0]}", **exc.details) from exc


def replay_points(series: dict[str, list[DataPoint]], publish: Callable[[DataPoint], object],
                  speedup: float = math.inf, clock=None,
                  on_advance: Callable | None = None,
                  sleep: Callable[[float], None] = time.sleep) -> int:
    """Publish several series merged by timestamp. Returns the number of points."""
    if not speedup > 0:
        raise ValueError("speedup must be positive")
    ordered = [sorted(points, key=lambda p: p.timestamp) for points in series.values()]
    merged = heapq.merge(*ordered, key=lambda p: p.timestamp)
    count = 0
    previous = None
    for ts, group in itertools.groupby(merged, key=lambda p: p.timestamp):
        if previous is not None and math.isfinite(speedup):
            sleep((ts - previous).total_seconds() / speedup)
        for point in group:
            publish(point)
            count += 1
        previous = ts
        if clock is not None and hasattr(clock, "set"):
            clock.set(ts)
        if on_advance is not None:
            on_advance(ts)
    return count


def replay(csv_path: str | os.PathLike, stream_id: str, publish: Callable[[DataPoint], object],
           speedup: float = math.inf, clock=None, on_advance: Callable | None = None,
           sleep: Callable[[float], None] = time.sleep) -> int:
    points = read_series(csv_path, stream_id)
    return replay_points({stream_id: points}, publish, speedup, clock, on_advance, sleep)
