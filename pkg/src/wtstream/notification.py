"""Threshold rules over streams with every-match, consecutive and sustained qualifiers."""
from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from enum import Enum
from typing import Callable

from .broker import DataPoint
from .errors import BadRule, DuplicateRule, UnknownRule, UnknownStream
from .timeutil import format_instant, parse_duration


class Comparator(str, Enum):
    GT = "gt"
    GE = "ge"
    LT = "lt"
    LE = "le"

    def test(self, value: float, threshold: float) -> bool:
        if self is Comparator.GT:
            return value > threshold
        if self is Comparator.GE:
            return value >= threshold
        if self is Comparator.LT:
            return value < threshold
        return value <= threshold


class Qualifier(str, Enum):
    EVERY_MATCH = "every_match"
    CONSECUTIVE = "consecutive"
    SUSTAINED = "sustained"


@dataclass(frozen=True)
class NotificationRule:
    rule_id: str
    source_stream: str
    cmp: Comparator
    threshold: float
    qualifier: Qualifier = Qualifier.EVERY_MATCH
    n: int = 1
    window: timedelta | None = None
    cooldown: timedelta = timedelta(0)
    message: str = ""

    def __post_init__(self):
        try:
            object.__setattr__(self, "cmp", Comparator(self.cmp))
            object.__setattr__(self, "qualifier", Qualifier(self.qualifier))
        except ValueError as exc:
            raise BadRule(str(exc)) from exc

    def validate(self) -> "NotificationRule":
        if not self.rule_id:
            raise BadRule("rule_id must be non-empty")
        if self.qualifier is Qualifier.CONSECUTIVE and self.n < 1:
            raise BadRule("consecutive count must be >= 1")
        if self.qualifier is Qualifier.SUSTAINED and (self.window is None or self.window <= timedelta(0)):
            raise BadRule("sustained window must be positive")
        if self.cooldown < timedelta(0):
            raise BadRule("cooldown must be >= 0")
        return self

    def matches(self, value: float) -> bool:
        return self.cmp.test(value, self.threshold)

    def to_dict(self) -> dict:
        if self.qualifier is Qualifier.CONSECUTIVE:
            qualifier = {"consecutive": self.n}
        elif self.qualifier is Qualifier.SUSTAINED:
            qualifier = {"sustained": self.window.total_seconds()}
        else:
            qualifier = "every_match"
        return {
            "rule_id": self.rule_id,
            "source_stream": self.source_stream,
            "predicate": {"cmp": self.cmp.value, "threshold": self.threshold},
            "qualifier": qualifier,
            "cooldown": self.cooldown.total_seconds(),
            "message": self.message,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "NotificationRule":
        try:
            pred = doc["predicate"]
            qual = doc.get("qualifier", "every_match")
            n, window = 1, None
            if isinstance(qual, dict):
                if "consecutive" in qual:
                    kind, n = Qualifier.CONSECUTIVE, int(qual["consecutive"])
                elif "sustained" in qual:
                    kind, window = Qualifier.SUSTAINED, parse_duration(qual["sustained"])
                else:
                    raise ValueError(f"unknown qualifier {qual!r}")
            else:
                kind = Qualifier(qual)
            return cls(
                rule_id=str(doc["rule_id"]),
                source_stream=str(doc["source_stream"]),
                cmp=Comparator(pred["cmp"]),
                threshold=float(pred["threshold"]),
                qualifier=kind,
                n=n,
                window=window,
                cooldown=parse_duration(doc.get("cooldown", 0)),
                message=str(doc.get("message", "")),
            ).validate()
        except BadRule:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise BadRule(f"malformed rule document: {exc}") from exc


@dataclass(frozen=True)
class NotificationEvent:
    rule_id: str
    triggered_at: datetime
    values: list[float]
    message: str

    def to_dict(self) -> dict:
        return {
            "rule_id": self.rule_id,
            "triggered_at": format_instant(self.triggered_at),
            "values": list(self.values),
            "message": self.message,
        }


@dataclass
class _Runtime:
    rule: NotificationRule
    run: deque = field(default_factory=deque)
    run_length: int = 0
    trail: deque = field(default_factory=deque)
    sustained: bool = False
    last_fired: datetime | None = None
    lock: threading.Lock = field(default_factory=threading.Lock)


class NotificationEngine:
    """Evaluates registered rules against points as they arrive.

    Consecutive rules fire on exactly the n-th match of a run, so one episode
    yields one event. Sustained rules fire when the trailing window turns
    all-matching. Any event inside a rule's cooldown is suppressed.
    """

    def __init__(self, stream_exists: Callable[[str], bool] | None = None, history: int = 10_000):
        self._stream_exists = stream_exists
        self._rules: dict[str, _Runtime] = {}
        self._lock = threading.Lock()
        self.events: deque[NotificationEvent] = deque(maxlen=history)

    def register_rule(self, rule: NotificationRule) -> str:
        rule.validate()
        with self._lock:
            if self._stream_exists is not None and not self._stream_exists(rule.source_stream):
                raise UnknownStream(f"no stream {rule.source_stream!r}")
            if rule.rule_id in self._rules:
                raise DuplicateRule(f"rule {rule.rule_id!r} already registered")
            self._rules[rule.rule_id] = _Runtime(rule)
        return rule.rule_id

    def unregister_rule(self, rule_id: str) -> None:
        with self._lock:
            if self._rules.pop(rule_id, None) is None:
                raise UnknownRule(f"no notification rule {rule_id!r}")

    def get_rule(self, rule_id: str) -> NotificationRule:
        try:
            return self._rules[rule_id].rule
        except KeyError:
            raise UnknownRule(f"no notification rule {rule_id!r}") from None

    def rules(self) -> list[NotificationRule]:
        return [rt.rule for rt in self._rules.values()]

    def evaluate(self, point: DataPoint) -> list[NotificationEvent]:
        with self._lock:
            runtimes = [rt for rt in self._rules.values() if rt.rule.source_stream == point.stream_id]
        out = []
        for rt in runtimes:
            with rt.lock:
                event = self._step(rt, point)
            if event is not None:
                out.append(event)
                self.events.append(event)
        return out

    def _step(self, rt: _Runtime, point: DataPoint) -> NotificationEvent | None:
        rule = rt.rule
        hit = rule.matches(point.value)
        values: list[float] | None = None
        if rule.qualifier is Qualifier.EVERY_MATCH:
            if hit:
                values = [point.value]
        elif rule.qualifier is Qualifier.CONSECUTIVE:
            if hit:
                rt.run_length += 1
                rt.run.append(point.value)
                if len(rt.run) > rule.n:
                    rt.run.popleft()
                if rt.run_length == rule.n:
                    values = list(rt.run)
            else:
                rt.run.clear()
                rt.run_length = 0
        else:
            rt.trail.append((point.timestamp, hit, point.value))
            while rt.trail and rt.trail[0][0] <= point.timestamp - rule.window:
                rt.trail.popleft()
            now_sustained = all(h for _, h, _ in rt.trail)
            if now_sustained and not rt.sustained:
                values = [v for _, _, v in rt.trail]
            rt.sustained = now_sustained
        if values is None:
            return None
        if rt.last_fired is not None and point.timestamp - rt.last_fired < rule.cooldown:
            return None
        rt.last_fired = point.timestamp
        message = rule.message or (
            f"{rule.source_stream} {rule.cmp.value} {rule.threshold:g} ({rule.qualifier.value})"
        )
        return NotificationEvent(rule.rule_id, point.timestamp, values, message)
