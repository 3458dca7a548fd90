"""Sliding time-window aggregates that turn raw streams into model inputs.

A rule aggregates its source stream over the half-open interval
``(as_of - lag - window, as_of - lag]``. Rules either emit on every arriving
point (``as_of`` = the point's timestamp) or on snapshot boundaries that are
whole multiples of the snapshot interval since the Unix epoch.

Points more than ``lateness`` behind the newest timestamp seen on their
stream are dropped and counted in ``late_dropped``.
"""
from __future__ import annotations

import bisect
import math
import threading
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from enum import Enum
from typing import Callable

from .broker import DataPoint
from .errors import BadWindow, DuplicateIndex, DuplicateRule, UnknownRule, UnknownStream
from .timeutil import floor_to, format_instant, parse_duration, utc


class Aggregate(str, Enum):
    AVG = "avg"
    SUM = "sum"
    MIN = "min"
    MAX = "max"
    COUNT = "count"
    LAST = "last"


def aggregate(kind: Aggregate, values: list[float]) -> float:
    if kind is Aggregate.AVG:
        return math.fsum(values) / len(values)
    if kind is Aggregate.SUM:
        return math.fsum(values)
    if kind is Aggregate.MIN:
        return min(values)
    if kind is Aggregate.MAX:
        return max(values)
    if kind is Aggregate.COUNT:
        return float(len(values))
    return values[-1]


@dataclass(frozen=True)
class WindowRule:
    rule_id: str
    source_stream: str
    aggregate: Aggregate
    window: timedelta
    lag: timedelta = timedelta(0)
    snapshot: timedelta | None = None
    input_index: int | None = None
    binding: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "aggregate", Aggregate(self.aggregate))

    def validate(self) -> "WindowRule":
        if not self.rule_id:
            raise BadWindow("rule_id must be non-empty")
        if self.window <= timedelta(0):
            raise BadWindow("window must be positive")
        if self.lag < timedelta(0):
            raise BadWindow("lag must be non-negative")
        if self.snapshot is not None and self.snapshot <= timedelta(0):
            raise BadWindow("snapshot interval must be positive")
        if self.input_index is not None and self.input_index < 0:
            raise BadWindow("input_index must be >= 0")
        return self

    @property
    def span(self) -> timedelta:
        return self.lag + self.window

    def bounds(self, as_of: datetime) -> tuple[datetime, datetime]:
        """Exclusive lower and inclusive upper edge of the window ending at ``as_of``."""
        hi = utc(as_of) - self.lag
        return hi - self.window, hi

    def to_dict(self) -> dict:
        return {
            "rule_id": self.rule_id,
            "source_stream": self.source_stream,
            "aggregate": self.aggregate.value,
            "window": self.window.total_seconds(),
            "lag": self.lag.total_seconds(),
            "cadence": "per_point" if self.snapshot is None else {"snapshot": self.snapshot.total_seconds()},
            "input_index": self.input_index,
            "binding": self.binding,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "WindowRule":
        """Build from a JSON rule document; durations take seconds or strings like ``"1h"``."""
        try:
            cadence = doc.get("cadence", "per_point")
            if cadence in (None, "per_point"):
                snapshot = None
            elif isinstance(cadence, dict) and "snapshot" in cadence:
                snapshot = parse_duration(cadence["snapshot"])
            else:
                raise ValueError(f"unknown cadence {cadence!r}")
            index = doc.get("input_index")
            return cls(
                rule_id=str(doc["rule_id"]),
                source_stream=str(doc["source_stream"]),
                aggregate=Aggregate(doc.get("aggregate", "avg")),
                window=parse_duration(doc["window"]),
                lag=parse_duration(doc.get("lag", 0)),
                snapshot=snapshot,
                input_index=None if index is None else int(index),
                binding=doc.get("binding"),
            ).validate()
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, BadWindow):
                raise
            raise BadWindow(f"malformed rule document: {exc}") from exc


@dataclass(frozen=True)
class AggregateValue:
    rule_id: str
    as_of: datetime | None
    value: float | None
    sample_count: int

    @property
    def complete(self) -> bool:
        return self.sample_count > 0

    def to_dict(self) -> dict:
        return {
            "rule_id": self.rule_id,
            "as_of": None if self.as_of is None else format_instant(self.as_of),
            "value": self.value,
            "sample_count": self.sample_count,
            "complete": self.complete,
        }


@dataclass(frozen=True)
class InputVector:
    as_of: datetime | None
    values: list[float | None]
    completeness: list[bool]

    @property
    def complete(self) -> bool:
        return all(self.completeness)

    def to_dict(self) -> dict:
        return {
            "as_of": None if self.as_of is None else format_instant(self.as_of),
            "values": list(self.values),
            "completeness": list(self.completeness),
        }


@dataclass
class _Buffer:
    ts: list[datetime] = field(default_factory=list)
    vals: list[float] = field(default_factory=list)
    watermark: datetime | None = None


@dataclass
class _RuleState:
    rule: WindowRule
    latest: AggregateValue
    next_boundary: datetime | None = None


class WindowEngine:
    def __init__(self, stream_exists: Callable[[str], bool] | None = None,
                 lateness: timedelta = timedelta(minutes=5),
                 retention: timedelta = timedelta(hours=24)):
        self._stream_exists = stream_exists
        self.lateness = lateness
        self.retention = retention
        self._rules: dict[str, _RuleState] = {}
        self._buffers: dict[str, _Buffer] = {}
        self._lock = threading.RLock()
        self.late_dropped = 0

    # rules
    def register_rule(self, rule: WindowRule) -> str:
        rule.validate()
        with self._lock:
            if self._stream_exists is not None and not self._stream_exists(rule.source_stream):
                raise UnknownStream(f"no stream {rule.source_stream!r}")
            if rule.rule_id in self._rules:
                raise DuplicateRule(f"rule {rule.rule_id!r} already registered")
            if rule.binding is not None and rule.input_index is not None:
                for st in self._rules.values():
                    if st.rule.binding == rule.binding and st.rule.input_index == rule.input_index:
                        raise DuplicateIndex(
                            f"input_index {rule.input_index} already bound to {st.rule.rule_id!r}")
            state = _RuleState(rule, AggregateValue(rule.rule_id, None, None, 0))
            buf = self._buffers.setdefault(rule.source_stream, _Buffer())
            if rule.snapshot is not None and buf.watermark is not None:
                state.next_boundary = floor_to(buf.watermark, rule.snapshot) + rule.snapshot
            self._rules[rule.rule_id] = state
        return rule.rule_id

    def unregister_rule(self, rule_id: str) -> None:
        with self._lock:
            if self._rules.pop(rule_id, None) is None:
                raise UnknownRule(f"no rule {rule_id!r}")

    def get_rule(self, rule_id: str) -> WindowRule:
        return self._state(rule_id).rule

    def rules(self) -> list[WindowRule]:
        with self._lock:
            return [st.rule for st in self._rules.values()]

    def _state(self, rule_id: str) -> _RuleState:
        try:
            return self._rules[rule_id]
        except KeyError:
            raise UnknownRule(f"no rule {rule_id!r}") from None

    def _rules_on(self, stream_id: str) -> list[_RuleState]:
        return [st for st in self._rules.values() if st.rule.source_stream == stream_id]

    # evaluation
    def _compute(self, rule: WindowRule, as_of: datetime) -> AggregateValue:
        buf = self._buffers.get(rule.source_stream) or _Buffer()
        lo, hi = rule.bounds(as_of)
        i = bisect.bisect_right(buf.ts, lo)
        j = bisect.bisect_right(buf.ts, hi)
        vals = buf.vals[i:j]
        if not vals:
            return AggregateValue(rule.rule_id, utc(as_of), None, 0)
        return AggregateValue(rule.rule_id, utc(as_of), aggregate(rule.aggregate, vals), len(vals))

    def _emit(self, state: _RuleState, as_of: datetime, out: list[AggregateValue]) -> None:
        value = self._compute(state.rule, as_of)
        state.latest = value
        if value.complete:
            out.append(value)

    def _flush_snapshots(self, states: list[_RuleState], until: datetime, inclusive: bool,
                         out: list[AggregateValue]) -> None:
        for st in states:
            if st.rule.snapshot is None or st.next_boundary is None:
                continue
            while st.next_boundary < until or (inclusive and st.next_boundary == until):
                self._emit(st, st.next_boundary, out)
                st.next_boundary += st.rule.snapshot

    def on_point(self, point: DataPoint) -> list[AggregateValue]:
        """Feed one point; returns the non-empty aggregates it caused to be emitted."""
        out: list[AggregateValue] = []
        with self._lock:
            buf = self._buffers.get(point.stream_id)
            if buf is None:
                if self._stream_exists is not None and not self._stream_exists(point.stream_id):
                    return out
                buf = self._buffers[point.stream_id] = _Buffer()
            ts = point.timestamp
            if buf.watermark is not None and ts < buf.watermark - self.lateness:
                self.late_dropped += 1
                return out
            states = self._rules_on(point.stream_id)
            for st in states:
                if st.rule.snapshot is not None and st.next_boundary is None:
                    st.next_boundary = floor_to(ts, st.rule.snapshot) + st.rule.snapshot
            self._flush_snapshots(states, ts, inclusive=False, out=out)
            k = bisect.bisect_right(buf.ts, ts)
            buf.ts.insert(k, ts)
            buf.vals.insert(k, point.value)
            if buf.watermark is None or ts > buf.watermark:
                buf.watermark = ts
            for st in states:
                if st.rule.snapshot is None:
                    self._emit(st, ts, out)
            self._evict(point.stream_id, buf, states)
        return out

    def advance_to(self, now: datetime) -> list[AggregateValue]:
        """Emit every snapshot boundary at or before ``now``."""
        out: list[AggregateValue] = []
        with self._lock:
            self._flush_snapshots(list(self._rules.values()), utc(now), inclusive=True, out=out)
        return out

    def _evict(self, stream_id: str, buf: _Buffer, states: list[_RuleState]) -> None:
        keep = max([self.retention] + [st.rule.span for st in states]) + self.lateness
        horizon = buf.watermark - keep
        k = bisect.bisect_right(buf.ts, horizon)
        if k:
            del buf.ts[:k]
            del buf.vals[:k]

    def evaluate(self, rule_id: str, as_of: datetime) -> AggregateValue:
        """Aggregate of ``rule_id`` at an arbitrary instant from the retained buffer."""
        with self._lock:
            return self._compute(self._state(rule_id).rule, as_of)

    def latest(self, rule_id: str) -> AggregateValue:
        with self._lock:
            return self._state(rule_id).latest

    def buffered(self, stream_id: str) -> int:
        buf = self._buffers.get(stream_id)
        return 0 if buf is None else len(buf.ts)

    def assemble_input_vector(self, binding: list[str], as_of: datetime | None = None) -> InputVector:
        """Slot ``i`` holds the rule whose ``input_index`` is ``i``.

        With ``as_of`` every rule is evaluated at that instant; without it the
        latest emissions are used and the vector's ``as_of`` is the newest of
        theirs.
        """
        with self._lock:
            rules = [self._state(rid).rule for rid in binding]
            n = len(rules)
            slots: list[AggregateValue | None] = [None] * n
            for pos, rule in enumerate(rules):
                idx = pos if rule.input_index is None else rule.input_index
                if idx >= n:
                    raise BadWindow(f"input_index {idx} outside a {n}-slot binding")
                if slots[idx] is not None:
                    raise DuplicateIndex(f"two rules map to input_index {idx}")
                if as_of is None:
                    slots[idx] = self._rules[rule.rule_id].latest
                else:
                    slots[idx] = self._compute(rule, as_of)
        if as_of is None:
            stamps = [s.as_of for s in slots if s is not None and s.as_of is not None]
            as_of = max(stamps) if stamps else None
        return InputVector(
            as_of=None if as_of is None else utc(as_of),
            values=[s.value for s in slots],
            completeness=[s.complete for s in slots],
        )


def rule_from_any(doc) -> WindowRule:
    return doc if isinstance(doc, WindowRule) else WindowRule.from_dict(doc)

