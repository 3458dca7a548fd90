"""One prediction node: broker, store, window engine, scheduler and notifier wired together.

Every published point flows, in order, to the store, the window engine, the
notification rules and finally data-driven schedules. Notification events
are published on the ``notifications`` stream and offered to event-driven
schedules.
"""
from __future__ import annotations

import json
import logging
import math
import threading
from datetime import datetime, timedelta
from pathlib import Path

from .broker import Broker, DataPoint, StreamKind, StreamTopic, DEFAULT_HIGH_WATER
from .clock import ManualClock, SystemClock
from .errors import DuplicateStream, UnknownStream, WrongStreamKind, WtError
from .notification import NotificationEngine, NotificationEvent, NotificationRule
from .replay import read_series, replay_points
from .repository import Repository, Sensor, Site, Source, Unit, Variable
from .scheduler import EngineRecord, PredictionRecord, Scheduler, ScheduleMode
from .timeutil import utc
from .weather import DEFAULT_CATEGORIES, WeatherFetch, WeatherRequest, fetch_weather
from .windowing import WindowEngine, WindowRule

logger = logging.getLogger(__name__)

NOTIFICATION_STREAM = "notifications"
LOCAL_SITE = "local"
LOCAL_SOURCE = "wtstream"
NO_UNIT = "none"
UNSPECIFIED = "unspecified"


class Node:
    def __init__(self, data_dir: str | Path | None = None, clock=None,
                 high_water: int = DEFAULT_HIGH_WATER,
                 lateness: timedelta = timedelta(minutes=5),
                 max_catch_up: int = 24):
        self.data_dir = Path(data_dir) if data_dir is not None else None
        self.clock = clock or SystemClock()
        self.repository = Repository(self.data_dir / "store" if self.data_dir else None)
        self.broker = Broker(high_water, now=self.clock.now)
        self.windowing = WindowEngine(stream_exists=self.broker.has_stream, lateness=lateness)
        self.notifications = NotificationEngine(stream_exists=self.broker.has_stream)
        self.scheduler = Scheduler(
            self.windowing, self.broker, self.clock,
            storage_dir=self.data_dir / "models" if self.data_dir else None,
            max_catch_up=max_catch_up,
        )
        self.weather_ignored = 0
        self._tick_lock = threading.Lock()
        self._default_metadata()
        for record in self.repository.list_streams():
            self.broker.create_stream(record.stream_id, record.kind, record.created_at)
        self.broker.add_topic_listener(self._on_topic)
        self.broker.add_listener(self._on_point)
        if not self.broker.has_stream(NOTIFICATION_STREAM):
            self.broker.create_stream(NOTIFICATION_STREAM, StreamKind.NOTIFICATION)
        self._restore()

    # wiring
    def _default_metadata(self) -> None:
        repo = self.repository
        if not any(u.unit_id == NO_UNIT for u in repo.list_metadata("units")):
            repo.upsert_metadata(Unit(NO_UNIT, "-", "dimensionless"))
        if not any(s.site_id == LOCAL_SITE for s in repo.list_metadata("sites")):
            repo.upsert_metadata(Site(LOCAL_SITE, "local node"))
        if not any(s.source_id == LOCAL_SOURCE for s in repo.list_metadata("sources")):
            repo.upsert_metadata(Source(LOCAL_SOURCE, "node operator"))
        if not any(v.variable_id == UNSPECIFIED for v in repo.list_metadata("variables")):
            repo.upsert_metadata(Variable(UNSPECIFIED, "unspecified", NO_UNIT))

    def _virtual_sensor(self, stream_id: str) -> str:
        sensor_id = f"virtual.{stream_id}"
        self.repository.upsert_metadata(Sensor(sensor_id, LOCAL_SITE, LOCAL_SOURCE, f"virtual sensor for {stream_id}"))
        return sensor_id

    def _on_topic(self, topic: StreamTopic, event: str) -> None:
        if event == "created" and not self.repository.has_stream(topic.stream_id):
            self.repository.create(topic.stream_id, self._virtual_sensor(topic.stream_id), UNSPECIFIED,
                                   kind=topic.kind, created_at=topic.created_at)
        elif event == "deleted" and self.repository.has_stream(topic.stream_id):
            self.repository.delete(topic.stream_id)

    def _on_point(self, point: DataPoint, offset: int) -> None:
        try:
            self.repository.append(point.stream_id, [point])
        except WtError as exc:
            logger.warning("not stored: %s", exc)
        self.windowing.on_point(point)
        for event in self.notifications.evaluate(point):
            self._publish_event(event)
        self.scheduler.on_data(point)

    def _publish_event(self, event: NotificationEvent) -> None:
        self.broker.publish(DataPoint(NOTIFICATION_STREAM, event.triggered_at, event.values[-1]))
        self.scheduler.on_event(event)

    def _engines_path(self) -> Path | None:
        return self.data_dir / "engines.json" if self.data_dir else None

    def _save_engines(self) -> None:
        path = self._engines_path()
        if path is not None:
            path.write_text(json.dumps([e.to_dict() for e in self.scheduler.list_engines()], indent=1))

    def _restore(self) -> None:
        path = self._engines_path()
        if path is not None and path.exists():
            for doc in json.loads(path.read_text()):
                self.scheduler.register_engine(EngineRecord(**doc))
        if self.data_dir is None:
            return
        models = self.data_dir / "models"
        if not models.exists():
            return
        for archive in sorted(models.glob("*/archive.pma")):
            try:
                self.scheduler.register_pma(archive.read_bytes())
            except WtError as exc:
                logger.error("cannot restore %s: %s", archive, exc)
        # refill window buffers so lagged inputs survive a restart
        for record in self.repository.list_streams():
            rows = self.repository.retrieve(record.stream_id)
            if not rows:
                continue
            horizon = rows[-1].timestamp - self.windowing.retention
            for row in rows:
                if row.timestamp >= horizon:
                    self.windowing.on_point(row)

    # streams
    def create_stream(self, stream_id: str, kind: StreamKind | str = StreamKind.SENSOR,
                      sensor_id: str | None = None, variable_id: str | None = None) -> StreamTopic:
        """Create a stream; without explicit metadata it is filed under a virtual sensor."""
        kind = StreamKind(kind)
        if sensor_id is None and variable_id is None:
            return self.broker.create_stream(stream_id, kind)
        if self.broker.has_stream(stream_id):
            raise DuplicateStream(f"stream {stream_id!r} already exists")
        self.repository.create(stream_id, sensor_id or self._virtual_sensor(stream_id),
                               variable_id or UNSPECIFIED, kind=kind)
        try:
            return self.broker.create_stream(stream_id, kind)
        except WtError:
            self.repository.delete(stream_id)
            raise

    def delete_stream(self, stream_id: str) -> None:
        self.broker.delete_stream(stream_id)

    def ingest_line(self, line: bytes | str) -> DataPoint:
        return self.broker.ingest_line(line)

    def publish_sensor(self, point: DataPoint) -> int:
        """Publish through the ingestion contract: only sensor and derived streams accept input."""
        topic = self.broker.get_stream(point.stream_id)
        if topic.kind not in (StreamKind.SENSOR, StreamKind.DERIVED):
            raise WrongStreamKind(f"{point.stream_id!r} is a {topic.kind.value} stream")
        return self.broker.publish(point)

    # rules
    def register_window_rule(self, rule: WindowRule) -> str:
        return self.windowing.register_rule(rule)

    def register_notification_rule(self, rule: NotificationRule) -> str:
        return self.notifications.register_rule(rule)

    # models
    def register_engine(self, engine: EngineRecord) -> str:
        eid = self.scheduler.register_engine(engine)
        self._save_engines()
        return eid

    def delete_engine(self, eid: str) -> None:
        self.scheduler.delete_engine(eid)
        self._save_engines()

    def register_model(self, archive: bytes) -> str:
        return self.scheduler.register_pma(archive)

    def delete_model(self, mid: str) -> None:
        self.scheduler.unregister(mid)

    def set_mode(self, mid: str, schedule: ScheduleMode) -> ScheduleMode:
        return self.scheduler.set_mode(mid, schedule)

    def start(self, mid: str) -> None:
        self.scheduler.start(mid)
        self.tick()

    def stop(self, mid: str) -> None:
        self.scheduler.stop(mid)

    def run_once(self, mid: str, as_of: datetime | None = None) -> PredictionRecord:
        return self.scheduler.run_once(mid, as_of)

    # time
    def tick(self, now: datetime | None = None) -> list[PredictionRecord]:
        """Flush snapshot windows and fire due scheduled cycles up to ``now``."""
        now = utc(now or self.clock.now())
        with self._tick_lock:
            self.windowing.advance_to(now)
            return self.scheduler.tick(now)

    def advance_to(self, when: datetime) -> list[PredictionRecord]:
        if isinstance(self.clock, ManualClock):
            self.clock.set(when)
        return self.tick(when)

    # ingestion helpers
    def replay(self, sources: dict[str, str | Path], speedup: float = math.inf) -> int:
        series = {}
        for sid, path in sources.items():
            if not self.broker.has_stream(sid):
                raise UnknownStream(f"no stream {sid!r}")
            series[sid] = read_series(path, sid)
        return self.replay_series(series, speedup)

    def replay_series(self, series: dict[str, list[DataPoint]], speedup: float = math.inf) -> int:
        for sid in series:
            if not self.broker.has_stream(sid):
                raise UnknownStream(f"no stream {sid!r}")
        virtual = isinstance(self.clock, ManualClock)
        return replay_points(series, self.publish_sensor, speedup,
                             clock=self.clock if virtual else None,
                             on_advance=self.tick if virtual else None)

    def fetch_weather(self, endpoint: str, request: WeatherRequest, streams: dict[str, str] | None = None,
                      client=None) -> WeatherFetch:
        streams = streams or {code: code for code in DEFAULT_CATEGORIES}
        for sid in streams.values():
            if not self.broker.has_stream(sid):
                raise UnknownStream(f"no stream {sid!r}")
        result = fetch_weather(endpoint, request, streams, client=client)
        self.weather_ignored += result.ignored
        for point in result.points:
            self.publish_sensor(point)
        return result
