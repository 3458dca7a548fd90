"""Instant and duration helpers. All instants are timezone-aware UTC datetimes."""
from __future__ import annotations

import re
from datetime import datetime, timedelta, timezone

EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)

_DURATION_RE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*(ms|s|sec|m|min|h|hour|hours|d|day|days)?\s*$")
_UNIT_SECONDS = {
    None: 1.0, "s": 1.0, "sec": 1.0, "ms": 1e-3,
    "m": 60.0, "min": 60.0,
    "h": 3600.0, "hour": 3600.0, "hours": 3600.0,
    "d": 86400.0, "day": 86400.0, "days": 86400.0,
}


def utc(dt: datetime) -> datetime:
    """Normalize to aware UTC; naive datetimes are taken to already be UTC."""
    if dt.tzinfo is None:
        return dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


def parse_instant(value) -> datetime:
    """Accept a datetime, epoch seconds, or an ISO-8601 string (``Z`` allowed)."""
    if isinstance(value, datetime):
        return utc(value)
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return EPOCH + timedelta(seconds=float(value))
    if isinstance(value, str):
        text = value.strip()
        if not text:
            raise ValueError("empty timestamp")
        try:
            return EPOCH + timedelta(seconds=float(text))
        except ValueError:
            pass
        if text.endswith(("Z", "z")):
            text = text[:-1] + "+00:00"
        return utc(datetime.fromisoformat(text))
    raise ValueError(f"cannot interpret {value!r} as an instant")


def format_instant(dt: datetime) -> str:
    dt = utc(dt)
    if dt.microsecond:
        return dt.strftime("%Y-%m-%dT%H:%M:%S.%fZ")
    return dt.strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_duration(value) -> timedelta:
    """Seconds as a number, a timedelta, or strings like ``"1h"``, ``"30min"``, ``"3600"``."""
    if isinstance(value, timedelta):
        return value
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return timedelta(seconds=float(value))
    if isinstance(value, str):
        m = _DURATION_RE.match(value.lower())
        if m:
            return timedelta(seconds=float(m.group(1)) * _UNIT_SECONDS[m.group(2)])
    raise ValueError(f"cannot interpret {value!r} as a duration")


def floor_to(dt: datetime, step: timedelta) -> datetime:
    """Largest multiple of ``step`` since the epoch that is <= ``dt``."""
    return EPOCH + ((utc(dt) - EPOCH) // step) * step
