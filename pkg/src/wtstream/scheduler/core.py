"""Prediction scheduling: when to run a model, and what a cycle does.

A cycle pulls the model's input vector from the window engine at ``as_of``,
runs the executor, and publishes the result on the model's prediction
stream. Cycles whose inputs are not all present are skipped and counted,
never imputed.
"""
from __future__ import annotations

import logging
import shutil
import tempfile
import threading
import time
from collections import deque
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from enum import IntEnum
from pathlib import Path

from ..broker import Broker, DataPoint, StreamKind
from ..errors import (
    AlreadyRunning,
    BadArchive,
    BadConfig,
    ConflictError,
    DuplicateEngine,
    DuplicateModel,
    ExecutorFailure,
    IncompleteInputs,
    InvalidSchedule,
    NotRunning,
    StaleCycle,
    UnknownEngine,
    UnknownModel,
    WtError,
)
from ..notification import NotificationEvent
from ..timeutil import format_instant, utc
from ..windowing import InputVector, WindowEngine
from .archive import PredictionModelArchive, load_pma
from .executor import EngineRecord, ExternalExecutor, NativeAnnExecutor

logger = logging.getLogger(__name__)

DEFAULT_MAX_CATCH_UP = 24


class ScheduleKind(IntEnum):
    ON_DEMAND = 1
    TIME_SCHEDULED = 2
    DATA_DRIVEN = 3
    EVENT_DRIVEN = 4


@dataclass(frozen=True)
class ScheduleMode:
    """How a model is triggered.

    A time schedule fires at ``start + i * interval``. It ends after ``count``
    cycles or past ``end``; with neither it runs until stopped. A single
    registered instant is ``count=1`` with no interval.
    """

    mode: ScheduleKind = ScheduleKind.ON_DEMAND
    start: datetime | None = None
    interval: timedelta | None = None
    count: int | None = None
    end: datetime | None = None
    trigger_rule: str | None = None
    trigger_streams: tuple[str, ...] = ()

    def validate(self) -> "ScheduleMode":
        try:
            mode = ScheduleKind(self.mode)
        except ValueError:
            raise InvalidSchedule(f"unknown mode {self.mode!r}") from None
        if mode is ScheduleKind.TIME_SCHEDULED:
            if self.count is not None and self.end is not None:
                raise InvalidSchedule("give either count or end, not both")
            if self.count is not None and self.count < 1:
                raise InvalidSchedule("count must be >= 1")
            if self.interval is None:
                if self.count != 1:
                    raise InvalidSchedule("interval is required unless count=1")
            elif self.interval <= timedelta(0):
                raise InvalidSchedule("interval must be positive")
        if mode is ScheduleKind.EVENT_DRIVEN and not self.trigger_rule:
            raise InvalidSchedule("event-driven mode needs a trigger rule")
        return replace(self, mode=mode)

    def boundary(self, i: int) -> datetime:
        return self.start + i * (self.interval or timedelta(0))

    def last_index(self) -> int | None:
        """Index of the final boundary, or None for an unbounded schedule."""
        if self.count is not None:
            return self.count - 1
        if self.end is not None:
            if self.end < self.start:
                return -1
            return (self.end - self.start) // self.interval
        return None

    def to_dict(self) -> dict:
        return {
            "mode": int(self.mode),
            "mode_name": ScheduleKind(self.mode).name.lower(),
            "start": None if self.start is None else format_instant(self.start),
            "interval": None if self.interval is None else self.interval.total_seconds(),
            "count": self.count,
            "end": None if self.end is None else format_instant(self.end),
            "trigger_rule": self.trigger_rule,
            "trigger_streams": list(self.trigger_streams),
        }


@dataclass(frozen=True)
class PredictionRecord:
    mid: str
    as_of: datetime
    inputs: InputVector
    value: float
    latency: float

    def to_dict(self) -> dict:
        return {
            "mid": self.mid,
            "as_of": format_instant(self.as_of),
            "inputs": self.inputs.to_dict(),
            "value": self.value,
            "latency": self.latency,
        }


@dataclass
class ModelStats:
    cycles: int = 0
    skipped_incomplete: int = 0
    failures: int = 0
    missed: int = 0
    last_error: str | None = None


@dataclass
class _Model:
    archive: PredictionModelArchive
    directory: Path
    executor: object
    rule_ids: list[str]
    schedule: ScheduleMode = field(default_factory=ScheduleMode)
    running: bool = False
    next_index: int = 0
    last_as_of: datetime | None = None
    stats: ModelStats = field(default_factory=ModelStats)
    records: deque = field(default_factory=lambda: deque(maxlen=1000))
    lock: threading.RLock = field(default_factory=threading.RLock)


class Scheduler:
    def __init__(self, windowing: WindowEngine, broker: Broker, clock,
                 storage_dir: str | Path | None = None,
                 max_catch_up: int = DEFAULT_MAX_CATCH_UP):
        self.windowing = windowing
        self.broker = broker
        self.clock = clock
        if storage_dir is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="wtstream-models-")
            storage_dir = self._tmp.name
        self.storage_dir = Path(storage_dir)
        self.storage_dir.mkdir(parents=True, exist_ok=True)
        self.max_catch_up = max_catch_up
        self._models: dict[str, _Model] = {}
        self._engines: dict[str, EngineRecord] = {}
        self._lock = threading.RLock()

    # engines
    def register_engine(self, engine: EngineRecord) -> str:
        engine.validate()
        with self._lock:
            if engine.eid in self._engines:
                raise DuplicateEngine(f"engine {engine.eid!r} already registered")
            self._engines[engine.eid] = engine
        return engine.eid

    def get_engine(self, eid: str) -> EngineRecord:
        try:
            return self._engines[eid]
        except KeyError:
            raise UnknownEngine(f"no engine {eid!r}") from None

    def delete_engine(self, eid: str) -> None:
        with self._lock:
            self.get_engine(eid)
            users = [m.archive.mid for m in self._models.values() if m.archive.manifest.get("engine") == eid]
            if users:
                raise ConflictError(f"engine {eid!r} is used by {', '.join(users)}")
            del self._engines[eid]

    def list_engines(self) -> list[EngineRecord]:
        return list(self._engines.values())

    # models
    def register_pma(self, data: bytes) -> str:
        pma = load_pma(data)
        mid = pma.mid
        with self._lock:
            if mid in self._models:
                raise DuplicateModel(f"model {mid!r} already registered")
            engine = None
            if pma.executor == "external":
                eid = pma.manifest.get("engine")
                if eid:
                    engine = self.get_engine(eid)
                else:
                    engine = EngineRecord(
                        eid=f"{mid}.inline",
                        command_template=pma.manifest["command_template"],
                        timeout=float(pma.manifest.get("timeout", 60.0)),
                    )
                    try:
                        engine.validate()
                    except BadConfig as exc:
                        raise BadArchive(str(exc)) from exc
            out = pma.output_stream
            if self.broker.has_stream(out):
                if self.broker.get_stream(out).kind is not StreamKind.PREDICTION:
                    raise BadArchive(f"output stream {out!r} exists and is not a prediction stream")
            directory = self.storage_dir / mid
            if directory.exists():
                shutil.rmtree(directory)
            directory.mkdir(parents=True)
            registered: list[str] = []
            try:
                pma.extract(directory)
                (directory / "archive.pma").write_bytes(data)
                if engine is None:
                    executor = NativeAnnExecutor(pma.native_model())
                else:
                    executor = ExternalExecutor(engine, directory)
                rules = sorted(pma.input_rules(), key=lambda r: r.input_index)
                for rule in rules:
                    scoped = replace(rule, rule_id=f"{mid}.{rule.rule_id}", binding=mid)
                    registered.append(self.windowing.register_rule(scoped))
                if not self.broker.has_stream(out):
                    self.broker.create_stream(out, StreamKind.PREDICTION)
            except Exception:
                for rid in registered:
                    self.windowing.unregister_rule(rid)
                shutil.rmtree(directory, ignore_errors=True)
                raise
            self._models[mid] = _Model(pma, directory, executor, registered)
        logger.info("registered model %s (%s)", mid, pma.executor)
        return mid

    def _model(self, mid: str) -> _Model:
        try:
            return self._models[mid]
        except KeyError:
            raise UnknownModel(f"no model {mid!r}") from None

    def has_model(self, mid: str) -> bool:
        return mid in self._models

    def model_ids(self) -> list[str]:
        return list(self._models)

    def archive_bytes(self, mid: str) -> bytes:
        return (self._model(mid).directory / "archive.pma").read_bytes()

    def describe(self, mid: str) -> dict:
        m = self._model(mid)
        return {
            "mid": mid,
            "manifest": m.archive.manifest,
            "rules": list(m.rule_ids),
            "schedule": m.schedule.to_dict(),
            "running": m.running,
            "next_index": m.next_index,
            "last_as_of": None if m.last_as_of is None else format_instant(m.last_as_of),
            "stats": vars(m.stats).copy(),
        }

    def unregister(self, mid: str) -> None:
        with self._lock:
            m = self._model(mid)
            with m.lock:
                m.running = False
                for rid in m.rule_ids:
                    self.windowing.unregister_rule(rid)
                del self._models[mid]
            shutil.rmtree(m.directory, ignore_errors=True)

    def records(self, mid: str) -> list[PredictionRecord]:
        return list(self._model(mid).records)

    def stats(self, mid: str) -> ModelStats:
        return self._model(mid).stats

    # schedule control
    def set_mode(self, mid: str, schedule: ScheduleMode) -> ScheduleMode:
        m = self._model(mid)
        schedule = schedule.validate()
        if schedule.mode is ScheduleKind.DATA_DRIVEN and not schedule.trigger_streams:
            sources = sorted({self.windowing.get_rule(r).source_stream for r in m.rule_ids})
            schedule = replace(schedule, trigger_streams=tuple(sources))
        with m.lock:
            if m.running:
                raise AlreadyRunning(f"stop {mid!r} before changing its mode")
            m.schedule = schedule
            m.next_index = 0
        return schedule

    def start(self, mid: str) -> None:
        m = self._model(mid)
        with m.lock:
            if m.running:
                raise AlreadyRunning(f"model {mid!r} is already running")
            if m.schedule.mode is ScheduleKind.TIME_SCHEDULED and m.schedule.start is None:
                m.schedule = replace(m.schedule, start=utc(self.clock.now()))
            m.running = True

    def stop(self, mid: str) -> None:
        m = self._model(mid)
        with m.lock:
            if not m.running:
                raise NotRunning(f"model {mid!r} is not running")
            m.running = False

    def is_running(self, mid: str) -> bool:
        return self._model(mid).running

    # cycles
    def run_once(self, mid: str, as_of: datetime | None = None) -> PredictionRecord:
        """One prediction cycle: inputs at ``as_of``, execute, publish."""
        m = self._model(mid)
        as_of = utc(as_of or self.clock.now())
        with m.lock:
            if m.last_as_of is not None and as_of < m.last_as_of:
                raise StaleCycle(f"as_of {format_instant(as_of)} precedes the last cycle")
            vector = self.windowing.assemble_input_vector(m.rule_ids, as_of)
            if not vector.complete:
                m.stats.skipped_incomplete += 1
                missing = [i for i, ok in enumerate(vector.completeness) if not ok]
                raise IncompleteInputs(f"empty input slots {missing} at {format_instant(as_of)}",
                                       slots=missing)
            t0 = time.perf_counter()
            try:
                value = m.executor.run(vector.values)
            except ExecutorFailure as exc:
                m.stats.failures += 1
                m.stats.last_error = str(exc)
                raise
            latency = time.perf_counter() - t0
            record = PredictionRecord(mid, as_of, vector, value, latency)
            m.last_as_of = as_of
            m.stats.cycles += 1
            m.records.append(record)
            self.broker.publish(DataPoint(m.archive.output_stream, as_of, value))
        return record

    def _guarded(self, mid: str, as_of: datetime) -> PredictionRecord | None:
        try:
            return self.run_once(mid, as_of)
        except (IncompleteInputs, ExecutorFailure, StaleCycle) as exc:
            logger.info("cycle %s@%s skipped: %s", mid, format_instant(as_of), exc)
        except WtError as exc:
            self._models[mid].stats.failures += 1
            self._models[mid].stats.last_error = str(exc)
            logger.warning("cycle %s@%s failed: %s", mid, format_instant(as_of), exc)
        return None

    def due(self, mid: str, now: datetime) -> list[tuple[int, datetime]]:
        """``(index, boundary)`` pairs of a running time schedule due at ``now`` and not yet fired."""
        m = self._model(mid)
        s = m.schedule
        if not m.running or s.mode is not ScheduleKind.TIME_SCHEDULED or now < s.start:
            return []
        last = s.last_index()
        if s.interval is None:
            upto = 0
        else:
            upto = (now - s.start) // s.interval
        if last is not None:
            upto = min(upto, last)
        return [(i, s.boundary(i)) for i in range(m.next_index, upto + 1)]

    def tick(self, now: datetime | None = None) -> list[PredictionRecord]:
        """Fire every due time-scheduled cycle, oldest first, at most ``max_catch_up`` per model."""
        now = utc(now or self.clock.now())
        out = []
        for mid in list(self._models):
            m = self._models.get(mid)
            if m is None:
                continue
            with m.lock:
                due = self.due(mid, now)
                if not due:
                    continue
                if len(due) > self.max_catch_up:
                    m.stats.missed += len(due) - self.max_catch_up
                    due = due[-self.max_catch_up:]
                for _, b in due:
                    record = self._guarded(mid, b)
                    if record is not None:
                        out.append(record)
                m.next_index = due[-1][0] + 1
                last = m.schedule.last_index()
                if last is not None and m.next_index > last:
                    m.running = False
        return out

    def on_data(self, point: DataPoint) -> list[PredictionRecord]:
        out = []
        for mid, m in list(self._models.items()):
            s = m.schedule
            if m.running and s.mode is ScheduleKind.DATA_DRIVEN and point.stream_id in s.trigger_streams:
                record = self._guarded(mid, point.timestamp)
                if record is not None:
                    out.append(record)
        return out

    def on_event(self, event: NotificationEvent) -> list[PredictionRecord]:
        out = []
        for mid, m in list(self._models.items()):
            s = m.schedule
            if m.running and s.mode is ScheduleKind.EVENT_DRIVEN and s.trigger_rule == event.rule_id:
                record = self._guarded(mid, event.triggered_at)
                if record is not None:
                    out.append(record)
        return out
