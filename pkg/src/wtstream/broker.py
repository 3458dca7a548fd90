"""In-process publish/subscribe broker where every sensor is a logical stream.

Each stream keeps an in-memory log so subscribers can attach from any offset.
Subscribers get bounded queues; one that falls more than ``high_water``
points behind is cut off instead of stalling publishers. Synchronous
listeners run inside ``publish`` and are how the node wires windowing,
storage and notification into the data path.

Wire format for line ingestion (TCP or direct): one JSON object per line,
``{"sid": "<stream>", "ts": "<ISO-8601>", "v": <number>}``.
"""
from __future__ import annotations

import json
import logging
import math
import queue
import socketserver
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from typing import Callable

from .errors import (
    DuplicateStream,
    InvalidId,
    NonFiniteValue,
    ParseError,
    SubscriberOverflow,
    UnknownStream,
    WrongStreamKind,
    WtError,
)
from .timeutil import format_instant, parse_instant, utc

logger = logging.getLogger(__name__)

DEFAULT_HIGH_WATER = 65_536
DEFAULT_TCP_PORT = 7070


class StreamKind(str, Enum):
    SENSOR = "sensor"
    DERIVED = "derived"
    PREDICTION = "prediction"
    NOTIFICATION = "notification"


@dataclass(frozen=True)
class DataPoint:
    stream_id: str
    timestamp: datetime
    value: float

    def __post_init__(self):
        object.__setattr__(self, "timestamp", utc(self.timestamp))
        try:
            value = float(self.value)
        except (TypeError, ValueError) as exc:
            raise NonFiniteValue(f"value {self.value!r} is not a number") from exc
        if not math.isfinite(value):
            raise NonFiniteValue(f"value {self.value!r} is not finite")
        object.__setattr__(self, "value", value)

    def to_wire(self) -> dict:
        return {"sid": self.stream_id, "ts": format_instant(self.timestamp), "v": self.value}


@dataclass(frozen=True)
class StreamTopic:
    stream_id: str
    created_at: datetime
    kind: StreamKind


def validate_stream_id(stream_id: str) -> str:
    if not isinstance(stream_id, str) or not stream_id:
        raise InvalidId("stream id must be a non-empty string")
    if any(ch.isspace() for ch in stream_id) or "/" in stream_id:
        raise InvalidId(f"stream id {stream_id!r} contains whitespace or '/'")
    return stream_id


def parse_line(line: bytes | str) -> DataPoint:
    """Decode one wire record. Raises ParseError or NonFiniteValue."""
    if isinstance(line, bytes):
        try:
            line = line.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"not UTF-8: {exc}") from exc
    try:
        doc = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON: {exc.msg}") from exc
    if not isinstance(doc, dict) or not {"sid", "ts", "v"} <= doc.keys():
        raise ParseError("record must be an object with sid, ts and v")
    sid, ts, v = doc["sid"], doc["ts"], doc["v"]
    if not isinstance(sid, str):
        raise ParseError("sid must be a string")
    try:
        timestamp = parse_instant(ts)
    except (ValueError, OverflowError) as exc:
        raise ParseError(f"bad timestamp {ts!r}") from exc
    if isinstance(v, bool) or not isinstance(v, (int, float, str)):
        raise ParseError("v must be a number")
    if isinstance(v, str):
        try:
            v = float(v)
        except ValueError as exc:
            raise ParseError(f"v {v!r} is not numeric") from exc
    return DataPoint(sid, timestamp, v)


class Subscription:
    """Ordered delivery of one stream from an attach offset onwards."""

    def __init__(self, broker: "Broker", stream_id: str, start_offset: int, high_water: int):
        self.stream_id = stream_id
        self.start_offset = start_offset
        self.last_offset: int | None = None
        self._broker = broker
        self._queue: queue.Queue = queue.Queue(maxsize=high_water)
        self._overflowed = False
        self.closed = False

    def _offer(self, offset: int, point: DataPoint) -> bool:
        try:
            self._queue.put_nowait((offset, point))
            return True
        except queue.Full:
            self._overflowed = True
            return False

    def get(self, timeout: float | None = None) -> DataPoint:
        """Next point; raises ``queue.Empty`` on timeout, SubscriberOverflow once cut off."""
        if self._overflowed and self._queue.empty():
            raise SubscriberOverflow(f"subscriber on {self.stream_id!r} exceeded its buffer")
        offset, point = self._queue.get(timeout=timeout)
        self.last_offset = offset
        return point

    def drain(self) -> list[DataPoint]:
        out = []
        while True:
            try:
                out.append(self._get_nowait())
            except queue.Empty:
                return out

    def _get_nowait(self) -> DataPoint:
        offset, point = self._queue.get_nowait()
        self.last_offset = offset
        return point

    @property
    def overflowed(self) -> bool:
        return self._overflowed

    def pending(self) -> int:
        return self._queue.qsize()

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self._broker._detach(self)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class _Topic:
    info: StreamTopic
    log: list[DataPoint] = field(default_factory=list)
    subscribers: list[Subscription] = field(default_factory=list)
    lock: threading.RLock = field(default_factory=threading.RLock)


PointListener = Callable[[DataPoint, int], None]
TopicListener = Callable[[StreamTopic, str], None]


class Broker:
    def __init__(self, high_water: int = DEFAULT_HIGH_WATER, now: Callable[[], datetime] | None = None):
        if high_water < 1:
            raise ValueError("high_water must be positive")
        self.high_water = high_water
        self._now = now or (lambda: datetime.now(timezone.utc))
        self._topics: dict[str, _Topic] = {}
        self._lock = threading.Lock()
        self._listeners: list[tuple[str | None, PointListener]] = []
        self._topic_listeners: list[TopicListener] = []

    # topology
    def create_stream(self, stream_id: str, kind: StreamKind | str = StreamKind.SENSOR,
                      created_at: datetime | None = None) -> StreamTopic:
        validate_stream_id(stream_id)
        kind = StreamKind(kind)
        with self._lock:
            if stream_id in self._topics:
                raise DuplicateStream(f"stream {stream_id!r} already exists")
            info = StreamTopic(stream_id, utc(created_at or self._now()), kind)
            self._topics[stream_id] = _Topic(info)
            listeners = list(self._topic_listeners)
        for fn in listeners:
            fn(info, "created")
        return info

    def delete_stream(self, stream_id: str) -> None:
        with self._lock:
            topic = self._topics.pop(stream_id, None)
            listeners = list(self._topic_listeners)
        if topic is None:
            raise UnknownStream(f"no stream {stream_id!r}")
        with topic.lock:
            for sub in topic.subscribers:
                sub.closed = True
            topic.subscribers.clear()
        for fn in listeners:
            fn(topic.info, "deleted")

    def get_stream(self, stream_id: str) -> StreamTopic:
        return self._topic(stream_id).info

    def has_stream(self, stream_id: str) -> bool:
        return stream_id in self._topics

    def list_streams(self) -> list[StreamTopic]:
        with self._lock:
            return [t.info for t in self._topics.values()]

    def _topic(self, stream_id: str) -> _Topic:
        try:
            return self._topics[stream_id]
        except KeyError:
            raise UnknownStream(f"no stream {stream_id!r}") from None

    # data path
    def publish(self, point: DataPoint) -> int:
        """Append ``point`` to its stream and fan it out; returns the offset."""
        topic = self._topic(point.stream_id)
        with topic.lock:
            offset = len(topic.log)
            topic.log.append(point)
            for sub in list(topic.subscribers):
                if not sub._offer(offset, point):
                    logger.warning("dropping slow subscriber on %s at offset %d", point.stream_id, offset)
                    topic.subscribers.remove(sub)
            for sid, fn in list(self._listeners):
                if sid is None or sid == point.stream_id:
                    try:
                        fn(point, offset)
                    except WtError:
                        logger.exception("listener failed on %s", point.stream_id)
        return offset

    def ingest_line(self, line: bytes | str) -> DataPoint:
        """Parse a wire record and publish it to its sensor stream."""
        point = parse_line(line)
        topic = self._topic(point.stream_id)
        if topic.info.kind is not StreamKind.SENSOR:
            raise WrongStreamKind(f"{point.stream_id!r} is a {topic.info.kind.value} stream")
        self.publish(point)
        return point

    def subscribe(self, stream_id: str, from_offset: int | None = None) -> Subscription:
        """Attach a subscriber; ``from_offset=None`` means only future points."""
        topic = self._topic(stream_id)
        with topic.lock:
            start = len(topic.log) if from_offset is None else max(0, int(from_offset))
            sub = Subscription(self, stream_id, start, self.high_water)
            for offset in range(start, len(topic.log)):
                if not sub._offer(offset, topic.log[offset]):
                    return sub
            topic.subscribers.append(sub)
        return sub

    def _detach(self, sub: Subscription) -> None:
        topic = self._topics.get(sub.stream_id)
        if topic is None:
            return
        with topic.lock:
            if sub in topic.subscribers:
                topic.subscribers.remove(sub)

    def read(self, stream_id: str, from_offset: int = 0) -> list[DataPoint]:
        topic = self._topic(stream_id)
        with topic.lock:
            return topic.log[from_offset:]

    def size(self, stream_id: str) -> int:
        return len(self._topic(stream_id).log)

    def add_listener(self, fn: PointListener, stream_id: str | None = None) -> None:
        """Register a synchronous callback for one stream, or all when ``stream_id`` is None."""
        self._listeners.append((stream_id, fn))

    def add_topic_listener(self, fn: TopicListener) -> None:
        self._topic_listeners.append(fn)


class _LineHandler(socketserver.StreamRequestHandler):
    def handle(self):
        ingest = self.server.ingest
        for raw in self.rfile:
            raw = raw.strip()
            if not raw:
                continue
            try:
                point = ingest(raw)
                reply = f"ok {point.stream_id} {format_instant(point.timestamp)}\n"
            except WtError as exc:
                reply = f"error {type(exc).__name__}: {exc}\n"
            self.wfile.write(reply.encode("utf-8"))


class IngestServer(socketserver.ThreadingTCPServer):
    """Newline-delimited JSON listener; replies ``ok ...`` or ``error ...`` per line."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, ingest: Callable[[bytes], DataPoint], host: str = "127.0.0.1",
                 port: int = DEFAULT_TCP_PORT):
        self.ingest = ingest
        super().__init__((host, port), _LineHandler)
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self.server_address[1]

    def start(self) -> "IngestServer":
        self._thread = threading.Thread(target=self.serve_forever, name="wtstream-ingest", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
