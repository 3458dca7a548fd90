"""Durable stream store with a small sensor metadata catalog.

Layout under the data directory::

    metadata.json          catalog (units, variables, sites, sources, sensors, streams)
    values/<stream>.csv    append-only ``timestamp,value`` log per stream

Values are written with ``repr(float)`` so a download parses back to the
identical doubles. A torn final line from a crash is ignored at load time.
"""
from __future__ import annotations

import bisect
import csv
import io
import json
import os
import threading
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable
from urllib.parse import quote

from .broker import DataPoint, StreamKind, validate_stream_id
from .errors import (
    BadRange,
    ClosedStream,
    DanglingReference,
    DuplicateStream,
    InvalidMetadata,
    ParseError,
    UnknownStream,
)
from .timeutil import format_instant, parse_instant, utc

ValueRow = DataPoint

CSV_HEADER = "timestamp,value"


@dataclass
class Unit:
    unit_id: str
    symbol: str
    name: str = ""


@dataclass
class Variable:
    variable_id: str
    name: str
    unit_id: str


@dataclass
class Site:
    site_id: str
    name: str
    latitude: float | None = None
    longitude: float | None = None


@dataclass
class Source:
    source_id: str
    responsible_party: str = ""
    name: str = ""


@dataclass
class Sensor:
    sensor_id: str
    site_id: str
    source_id: str
    description: str = ""


@dataclass
class StreamRecord:
    stream_id: str
    sensor_id: str
    variable_id: str
    created_at: datetime
    closed: bool = False
    kind: str = StreamKind.SENSOR.value

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["created_at"] = format_instant(self.created_at)
        return doc


ENTITY_TYPES = {
    "units": Unit,
    "variables": Variable,
    "sites": Site,
    "sources": Source,
    "sensors": Sensor,
}
_ID_FIELD = {cls: fields(cls)[0].name for cls in ENTITY_TYPES.values()}
_COLLECTION = {cls: name for name, cls in ENTITY_TYPES.items()}


def entity_from_dict(collection: str, doc: dict):
    try:
        cls = ENTITY_TYPES[collection]
    except KeyError:
        raise InvalidMetadata(f"unknown metadata collection {collection!r}") from None
    try:
        return cls(**doc)
    except TypeError as exc:
        raise InvalidMetadata(str(exc)) from exc


def format_rows(rows: Iterable[DataPoint]) -> str:
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    for row in rows:
        buf.write(f"{format_instant(row.timestamp)},{row.value!r}\n")
    return buf.getvalue()


def parse_csv(text: str, stream_id: str = "") -> list[DataPoint]:
    """Parse the ``timestamp,value`` download format. Line numbers in errors are 1-based."""
    lines = text.splitlines()
    if not lines or lines[0].strip().lower() != CSV_HEADER:
        raise ParseError(f"expected header {CSV_HEADER!r}", line=1)
    rows = []
    for lineno, row in enumerate(csv.reader(lines[1:]), start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != 2:
            raise ParseError(f"expected 2 columns, got {len(row)}", line=lineno)
        try:
            ts = parse_instant(row[0])
            value = float(row[1])
            rows.append(DataPoint(stream_id, ts, value))
        except (ValueError, OverflowError) as exc:
            raise ParseError(str(exc), line=lineno) from exc
    return rows


class _Series:
    """In-memory mirror of one stream's value log."""

    def __init__(self):
        self.rows: list[DataPoint] = []
        self.monotone = True
        self.lock = threading.Lock()

    def add(self, point: DataPoint) -> None:
        if self.rows and point.timestamp < self.rows[-1].timestamp:
            self.monotone = False
        self.rows.append(point)

    def sorted_rows(self) -> list[DataPoint]:
        rows = self.rows[: len(self.rows)]
        if self.monotone:
            return rows
        return sorted(rows, key=lambda r: r.timestamp)


class Repository:
    """Stream values plus catalog. ``root=None`` keeps everything in memory."""

    def __init__(self, root: str | os.PathLike | None = None):
        self.root = Path(root) if root is not None else None
        self._meta: dict[str, dict] = {name: {} for name in ENTITY_TYPES}
        self._streams: dict[str, StreamRecord] = {}
        self._series: dict[str, _Series] = {}
        self._lock = threading.RLock()
        if self.root is not None:
            (self.root / "values").mkdir(parents=True, exist_ok=True)
            self._load()

    # persistence
    def _meta_path(self) -> Path:
        return self.root / "metadata.json"

    def _values_path(self, stream_id: str) -> Path:
        return self.root / "values" / (quote(stream_id, safe="") + ".csv")

    def _load(self) -> None:
        path = self._meta_path()
        if not path.exists():
            return
        doc = json.loads(path.read_text(encoding="utf-8"))
        for name, cls in ENTITY_TYPES.items():
            for key, item in doc.get(name, {}).items():
                self._meta[name][key] = cls(**item)
        for key, item in doc.get("streams", {}).items():
            item = dict(item)
            item["created_at"] = parse_instant(item["created_at"])
            self._streams[key] = StreamRecord(**item)
            series = _Series()
            vpath = self._values_path(key)
            if vpath.exists():
                # lines are written newline-terminated; anything after the last newline is torn
                complete = vpath.read_text(encoding="utf-8").split("\n")[:-1]
                for line in complete:
                    ts, sep, value = line.partition(",")
                    if not sep or not value:
                        continue
                    try:
                        series.add(DataPoint(key, parse_instant(ts), float(value)))
                    except ValueError:
                        continue
            self._series[key] = series

    def _save_meta(self) -> None:
        if self.root is None:
            return
        doc = {name: {k: asdict(v) for k, v in items.items()} for name, items in self._meta.items()}
        doc["streams"] = {k: r.to_dict() for k, r in self._streams.items()}
        tmp = self._meta_path().with_suffix(".tmp")
        tmp.write_text(json.dumps(doc, indent=1, sort_keys=True), encoding="utf-8")
        os.replace(tmp, self._meta_path())

    # metadata
    def upsert_metadata(self, entity) -> str:
        cls = type(entity)
        if cls not in _COLLECTION:
            raise InvalidMetadata(f"unsupported entity type {cls.__name__}")
        key = getattr(entity, _ID_FIELD[cls])
        if not key:
            raise InvalidMetadata("entity id must be non-empty")
        with self._lock:
            if isinstance(entity, Variable) and entity.unit_id not in self._meta["units"]:
                raise DanglingReference(f"unknown unit {entity.unit_id!r}")
            if isinstance(entity, Sensor):
                if entity.site_id not in self._meta["sites"]:
                    raise DanglingReference(f"unknown site {entity.site_id!r}")
                if entity.source_id not in self._meta["sources"]:
                    raise DanglingReference(f"unknown source {entity.source_id!r}")
            if isinstance(entity, Site):
                if entity.latitude is not None and not -90 <= entity.latitude <= 90:
                    raise InvalidMetadata("latitude must be within [-90, 90]")
                if entity.longitude is not None and not -180 <= entity.longitude <= 180:
                    raise InvalidMetadata("longitude must be within [-180, 180]")
            self._meta[_COLLECTION[cls]][key] = entity
            self._save_meta()
        return key

    def get_metadata(self, collection: str, key: str):
        try:
            return self._meta[collection][key]
        except KeyError:
            raise DanglingReference(f"no {collection} entry {key!r}") from None

    def list_metadata(self, collection: str) -> list:
        if collection not in self._meta:
            raise InvalidMetadata(f"unknown metadata collection {collection!r}")
        return list(self._meta[collection].values())

    # streams
    def create(self, stream_id: str, sensor_id: str, variable_id: str,
               kind: StreamKind | str = StreamKind.SENSOR,
               created_at: datetime | None = None) -> StreamRecord:
        validate_stream_id(stream_id)
        with self._lock:
            if stream_id in self._streams:
                raise DuplicateStream(f"stream {stream_id!r} already exists")
            if sensor_id not in self._meta["sensors"]:
                raise DanglingReference(f"unknown sensor {sensor_id!r}")
            if variable_id not in self._meta["variables"]:
                raise DanglingReference(f"unknown variable {variable_id!r}")
            record = StreamRecord(stream_id, sensor_id, variable_id,
                                  utc(created_at or datetime.now(timezone.utc)),
                                  kind=StreamKind(kind).value)
            self._streams[stream_id] = record
            self._series[stream_id] = _Series()
            self._save_meta()
        return record

    def get_stream(self, stream_id: str) -> StreamRecord:
        try:
            return self._streams[stream_id]
        except KeyError:
            raise UnknownStream(f"no stream {stream_id!r}") from None

    def has_stream(self, stream_id: str) -> bool:
        return stream_id in self._streams

    def list_streams(self) -> list[StreamRecord]:
        return list(self._streams.values())

    def close_stream(self, stream_id: str) -> StreamRecord:
        with self._lock:
            record = self.get_stream(stream_id)
            record.closed = True
            self._save_meta()
        return record

    def append(self, stream_id: str, points: Iterable[DataPoint]) -> int:
        record = self.get_stream(stream_id)
        if record.closed:
            raise ClosedStream(f"stream {stream_id!r} is closed")
        series = self._series[stream_id]
        batch = [p if p.stream_id == stream_id else DataPoint(stream_id, p.timestamp, p.value)
                 for p in points]
        if not batch:
            return 0
        with series.lock:
            if self.root is not None:
                with open(self._values_path(stream_id), "a", encoding="utf-8") as fh:
                    fh.write("".join(f"{format_instant(p.timestamp)},{p.value!r}\n" for p in batch))
                    fh.flush()
                    os.fsync(fh.fileno())
            for p in batch:
                series.add(p)
        return len(batch)

    def retrieve(self, stream_id: str, t0: datetime | None = None, t1: datetime | None = None,
                 limit: int | None = None) -> list[ValueRow]:
        """Rows with ``t0 <= ts < t1`` in timestamp order (ties keep append order)."""
        self.get_stream(stream_id)
        if t0 is not None and t1 is not None and t0 > t1:
            raise BadRange(f"t0 {t0} is after t1 {t1}")
        if limit is not None and limit < 0:
            raise BadRange("limit must be non-negative")
        rows = self._series[stream_id].sorted_rows()
        keys = [r.timestamp for r in rows]
        lo = 0 if t0 is None else bisect.bisect_left(keys, utc(t0))
        hi = len(rows) if t1 is None else bisect.bisect_left(keys, utc(t1))
        out = rows[lo:hi]
        return out if limit is None else out[:limit]

    def search(self, variable_id: str | None = None, site_id: str | None = None,
               t0: datetime | None = None, t1: datetime | None = None) -> list[StreamRecord]:
        """Streams matching every given filter; a time range keeps streams with a value in it."""
        out = []
        for record in self.list_streams():
            if variable_id is not None and record.variable_id != variable_id:
                continue
            if site_id is not None:
                sensor = self._meta["sensors"].get(record.sensor_id)
                if sensor is None or sensor.site_id != site_id:
                    continue
            if (t0 is not None or t1 is not None) and not self.retrieve(record.stream_id, t0, t1, limit=1):
                continue
            out.append(record)
        return out

    def delete(self, stream_id: str) -> None:
        with self._lock:
            self.get_stream(stream_id)
            series = self._series.pop(stream_id)
            del self._streams[stream_id]
            with series.lock:
                if self.root is not None:
                    self._values_path(stream_id).unlink(missing_ok=True)
            self._save_meta()

    def download(self, stream_id: str, t0: datetime | None = None, t1: datetime | None = None) -> str:
        return format_rows(self.retrieve(stream_id, t0, t1))
