from __future__ import annotations

from typing import Any

from pydantic import BaseModel, Field


class StreamCreate(BaseModel):
    stream_id: str
    kind: str = "sensor"
    sensor_id: str | None = None
    variable_id: str | None = None


class StreamOut(BaseModel):
    stream_id: str
    kind: str
    created_at: str
    sensor_id: str | None = None
    variable_id: str | None = None
    closed: bool = False
    size: int = 0


class PointIn(BaseModel):
    ts: str | float
    v: float


class PointsIn(BaseModel):
    points: list[PointIn]


class ValueOut(BaseModel):
    timestamp: str
    value: float


class IngestOut(BaseModel):
    sid: str
    ts: str
    v: float


class MidOut(BaseModel):
    mid: str


class EidOut(BaseModel):
    eid: str


class IdOut(BaseModel):
    id: str


class EngineIn(BaseModel):
    eid: str
    kind: str = "external"
    command_template: str = ""
    timeout: float = 60.0
    description: str = ""


class EngineOut(EngineIn):
    pass


class PredictionOut(BaseModel):
    mid: str
    as_of: str
    inputs: dict[str, Any]
    value: float
    latency: float


class PredictionControlOut(BaseModel):
    mid: str
    running: bool
    schedule: dict[str, Any]
    records: list[PredictionOut] = Field(default_factory=list)


class WeatherFetchIn(BaseModel):
    endpoint: str
    base_date: str
    base_time: str
    nx: int
    ny: int
    streams: dict[str, str] | None = None


class WeatherFetchOut(BaseModel):
    resultCode: str
    resultMsg: str
    published: list[IngestOut]
    ignored: int


class ReplayIn(BaseModel):
    sources: dict[str, str] = Field(description="stream id -> CSV text in the download format")
    speedup: float | None = Field(default=None, description="omit for as-fast-as-possible")


class ReplayOut(BaseModel):
    published: int


class ErrorOut(BaseModel):
    error: str
    detail: str
