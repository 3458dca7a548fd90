"""Client for a gridded weather observation service, plus a fixture server.

Request parameters: ``base_date`` (YYYYMMDD), ``base_time`` (HHMM), ``nx``,
``ny``. The response is a flat JSON object::

    {"resultCode": "0", "resultMsg": "OK", "numOfRows": 10, "pageNo": 1,
     "totalCount": 3, "items": [{"category": "TM", "obsrValue": -1.0}, ...]}

Only mapped categories become data points; everything else is counted and
ignored.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from datetime import datetime, timezone

import httpx
from fastapi import FastAPI, Query
from pydantic import BaseModel, Field, ValidationError, field_validator

from .broker import DataPoint
from .errors import BadStatus, ParseError, TransportError

DEFAULT_CATEGORIES = {"TM": "air temperature", "RF": "rainfall"}


class WeatherRequest(BaseModel):
    base_date: str = Field(pattern=r"^\d{8}$")
    base_time: str = Field(pattern=r"^\d{4}$")
    nx: int = Field(ge=1)
    ny: int = Field(ge=1)

    @field_validator("base_date")
    @classmethod
    def _date_parses(cls, v: str) -> str:
        datetime.strptime(v, "%Y%m%d")
        return v

    @field_validator("base_time")
    @classmethod
    def _time_parses(cls, v: str) -> str:
        datetime.strptime(v, "%H%M")
        return v

    def observed_at(self) -> datetime:
        return datetime.strptime(self.base_date + self.base_time, "%Y%m%d%H%M").replace(tzinfo=timezone.utc)


class WeatherItem(BaseModel):
    category: str
    obsrValue: float

    @field_validator("obsrValue")
    @classmethod
    def _finite(cls, v: float) -> float:
        if not math.isfinite(v):
            raise ValueError("obsrValue must be finite")
        return v


class WeatherResponse(BaseModel):
    resultCode: str
    resultMsg: str
    numOfRows: int = 10
    pageNo: int = 1
    totalCount: int = 0
    items: list[WeatherItem] = Field(default_factory=list)


@dataclass
class WeatherFetch:
    response: WeatherResponse
    points: list[DataPoint]
    ignored: int


def to_points(request: WeatherRequest, response: WeatherResponse,
              streams: dict[str, str]) -> tuple[list[DataPoint], int]:
    when = request.observed_at()
    points, ignored = [], 0
    for item in response.items:
        sid = streams.get(item.category)
        if sid is None:
            ignored += 1
            continue
        points.append(DataPoint(sid, when, item.obsrValue))
    return points, ignored


def fetch_weather(endpoint: str, request: WeatherRequest, streams: dict[str, str],
                  client: httpx.Client | None = None, timeout: float = 10.0) -> WeatherFetch:
    """Query ``endpoint`` and convert mapped categories (e.g. TM, RF) to points.

    ``streams`` maps a category code to the stream id that receives it.
    """
    params = request.model_dump()
    own = client is None
    client = client or httpx.Client(timeout=timeout)
    try:
        resp = client.get(endpoint, params=params)
    except httpx.HTTPError as exc:
        raise TransportError(f"cannot reach {endpoint}: {exc}") from exc
    finally:
        if own:
            client.close()
    if resp.status_code != 200:
        raise TransportError(f"{endpoint} answered HTTP {resp.status_code}")
    try:
        body = WeatherResponse.model_validate_json(resp.content)
    except ValidationError as exc:
        raise ParseError(f"unexpected response body: {exc.errors()[0]['msg']}") from exc
    if body.resultCode != "0":
        raise BadStatus(body.resultMsg, result_code=body.resultCode)
    points, ignored = to_points(request, body, streams)
    return WeatherFetch(body, points, ignored)


def _fixture_values(req: WeatherRequest) -> list[WeatherItem]:
    digest = hashlib.sha256(f"{req.base_date}|{req.base_time}|{req.nx}|{req.ny}".encode()).digest()
    u = [b / 255.0 for b in digest[:4]]
    hour = int(req.base_time[:2]) + int(req.base_time[2:]) / 60.0
    tm = round(15.0 + 8.0 * math.sin(2 * math.pi * (hour - 9) / 24.0) + 4.0 * (u[0] - 0.5), 1)
    rf = round(20.0 * u[2], 1) if u[1] < 0.1 else 0.0
    return [
        WeatherItem(category="TM", obsrValue=tm),
        WeatherItem(category="RF", obsrValue=rf),
        WeatherItem(category="LGT", obsrValue=0.0),
    ]


def create_fixture_app(fixtures: dict[tuple, list[dict]] | None = None,
                       failures: dict[tuple, str] | None = None) -> FastAPI:
    """A stand-in weather service with deterministic answers.

    ``fixtures`` pins the items for a ``(base_date, base_time, nx, ny)`` key;
    ``failures`` makes a key answer with result code ``"99"`` and the given
    message. Unpinned keys get values derived from a hash of the key.
    """
    fixtures = dict(fixtures or {})
    failures = dict(failures or {})
    app = FastAPI(title="weather fixture")

    @app.get("/ForecastGrib", response_model=WeatherResponse)
    def forecast(base_date: str = Query(...), base_time: str = Query(...),
                 nx: int = Query(...), ny: int = Query(...)):
        try:
            req = WeatherRequest(base_date=base_date, base_time=base_time, nx=nx, ny=ny)
        except ValidationError as exc:
            return WeatherResponse(resultCode="10", resultMsg=f"INVALID_REQUEST_PARAMETER: {exc.errors()[0]['msg']}")
        key = (req.base_date, req.base_time, req.nx, req.ny)
        if key in failures:
            return WeatherResponse(resultCode="99", resultMsg=failures[key])
        if key in fixtures:
            items = [WeatherItem(**it) for it in fixtures[key]]
        else:
            items = _fixture_values(req)
        return WeatherResponse(resultCode="0", resultMsg="OK", numOfRows=10, pageNo=1,
                               totalCount=len(items), items=items)

    return app
