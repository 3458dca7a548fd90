"""REST front end for a :class:`~wtstream.node.Node`."""
from __future__ import annotations

import logging
import threading
from contextlib import asynccontextmanager
from datetime import datetime

from fastapi import Body, FastAPI, Query, Request, Response
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, PlainTextResponse
from pydantic import ValidationError

from ..broker import DataPoint, IngestServer, StreamKind
from ..errors import BadConfig, InvalidSchedule, ParseError, UnknownModel, WtError
from ..node import Node
from ..notification import NotificationRule
from ..repository import entity_from_dict, parse_csv
from ..scheduler import EngineRecord, ScheduleKind, ScheduleMode
from ..timeutil import format_instant, parse_duration, parse_instant
from ..weather import WeatherRequest
from ..windowing import WindowRule
from . import schemas

logger = logging.getLogger(__name__)


def _instant(value: str | None, name: str) -> datetime | None:
    if value is None or value == "":
        return None
    try:
        return parse_instant(value)
    except (ValueError, TypeError) as exc:
        raise ParseError(f"bad {name}: {value!r}") from exc


def _stream_out(node: Node, stream_id: str) -> schemas.StreamOut:
    topic = node.broker.get_stream(stream_id)
    record = node.repository.get_stream(stream_id) if node.repository.has_stream(stream_id) else None
    return schemas.StreamOut(
        stream_id=topic.stream_id,
        kind=topic.kind.value,
        created_at=format_instant(topic.created_at),
        sensor_id=record.sensor_id if record else None,
        variable_id=record.variable_id if record else None,
        closed=record.closed if record else False,
        size=len(node.repository.retrieve(stream_id)) if record else node.broker.size(stream_id),
    )


def _values(points) -> list[schemas.ValueOut]:
    return [schemas.ValueOut(timestamp=format_instant(p.timestamp), value=p.value) for p in points]


def _ingested(point: DataPoint) -> schemas.IngestOut:
    return schemas.IngestOut(sid=point.stream_id, ts=format_instant(point.timestamp), v=point.value)


class Ticker:
    """Background thread that drives ``node.tick()`` on wall-clock time."""

    def __init__(self, node: Node, interval: float):
        self.node = node
        self.interval = interval
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, name="wtstream-ticker", daemon=True)

    def _run(self) -> None:
        while not self._stop.wait(self.interval):
            try:
                self.node.tick()
            except Exception:
                logger.exception("tick failed")

    def start(self) -> "Ticker":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        self._thread.join(timeout=5)


def create_app(node: Node | None = None, *, tick_interval: float | None = 1.0,
               tcp_port: int | None = None, tcp_host: str = "127.0.0.1") -> FastAPI:
    """Build the service.

    ``tick_interval=None`` disables the background ticker, which is what a
    virtual-clock node wants: time then advances only through ``POST /node/tick``
    or replay. ``tcp_port`` (0 for any free port) also starts the line ingestion
    listener for the app's lifetime.
    """
    node = node or Node()

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        ticker = Ticker(node, tick_interval).start() if tick_interval else None
        server = IngestServer(node.ingest_line, tcp_host, tcp_port).start() if tcp_port is not None else None
        app.state.ingest_server = server
        try:
            yield
        finally:
            if server is not None:
                server.stop()
            if ticker is not None:
                ticker.stop()

    app = FastAPI(title="wtstream", lifespan=lifespan)
    app.state.node = node
    app.state.ingest_server = None

    @app.exception_handler(WtError)
    async def _wt_error(request: Request, exc: WtError):
        return JSONResponse(status_code=exc.status_code,
                            content={"error": type(exc).__name__, "detail": str(exc), **_jsonable(exc.details)})

    @app.exception_handler(RequestValidationError)
    async def _bad_request(request: Request, exc: RequestValidationError):
        first = exc.errors()[0] if exc.errors() else {}
        where = ".".join(str(p) for p in first.get("loc", ()))
        return JSONResponse(status_code=400,
                            content={"error": "ValidationError", "detail": f"{where}: {first.get('msg', 'invalid')}"})

    @app.exception_handler(ValidationError)
    async def _bad_model(request: Request, exc: ValidationError):
        first = exc.errors()[0]
        where = ".".join(str(p) for p in first.get("loc", ()))
        return JSONResponse(status_code=400, content={"error": "ValidationError", "detail": f"{where}: {first['msg']}"})

    @app.get("/health")
    def health():
        return {"status": "ok", "now": format_instant(node.clock.now())}

    # streams
    @app.get("/streams", response_model=list[schemas.StreamOut])
    def list_streams():
        return [_stream_out(node, t.stream_id) for t in node.broker.list_streams()]

    @app.post("/streams", response_model=schemas.StreamOut, status_code=201)
    def create_stream(body: schemas.StreamCreate):
        try:
            kind = StreamKind(body.kind)
        except ValueError:
            raise BadConfig(f"unknown stream kind {body.kind!r}") from None
        node.create_stream(body.stream_id, kind, body.sensor_id, body.variable_id)
        return _stream_out(node, body.stream_id)

    @app.get("/streams/search", response_model=list[schemas.StreamOut])
    def search_streams(variable: str | None = None, site: str | None = None,
                       t0: str | None = Query(None, alias="from"), t1: str | None = Query(None, alias="to")):
        records = node.repository.search(variable, site, _instant(t0, "from"), _instant(t1, "to"))
        return [_stream_out(node, r.stream_id) for r in records if node.broker.has_stream(r.stream_id)]

    @app.get("/streams/{stream_id}", response_model=schemas.StreamOut)
    def get_stream(stream_id: str):
        return _stream_out(node, stream_id)

    @app.delete("/streams/{stream_id}")
    def delete_stream(stream_id: str):
        node.delete_stream(stream_id)
        return {"deleted": stream_id}

    @app.post("/streams/{stream_id}/close", response_model=schemas.StreamOut)
    def close_stream(stream_id: str):
        node.broker.get_stream(stream_id)
        node.repository.close_stream(stream_id)
        return _stream_out(node, stream_id)

    @app.post("/streams/{stream_id}/values", response_model=list[schemas.IngestOut])
    def post_values(stream_id: str, body: schemas.PointsIn):
        node.broker.get_stream(stream_id)
        points = [DataPoint(stream_id, _instant(str(p.ts), "ts"), p.v) for p in body.points]
        for point in points:
            node.publish_sensor(point)
        return [_ingested(p) for p in points]

    @app.get("/streams/{stream_id}/values", response_model=list[schemas.ValueOut])
    def get_values(stream_id: str, t0: str | None = Query(None, alias="from"),
                   t1: str | None = Query(None, alias="to"), limit: int | None = Query(None, ge=0)):
        return _values(node.repository.retrieve(stream_id, _instant(t0, "from"), _instant(t1, "to"), limit))

    @app.get("/streams/{stream_id}/download", response_class=PlainTextResponse)
    def download(stream_id: str, t0: str | None = Query(None, alias="from"),
                 t1: str | None = Query(None, alias="to")):
        text = node.repository.download(stream_id, _instant(t0, "from"), _instant(t1, "to"))
        return PlainTextResponse(text, media_type="text/csv")

    @app.post("/ingest", response_model=list[schemas.IngestOut])
    def ingest(body: str = Body(..., media_type="text/plain")):
        """Newline-delimited JSON points, the same format the TCP listener accepts."""
        out = []
        for line in body.splitlines():
            if line.strip():
                out.append(_ingested(node.ingest_line(line)))
        return out

    # metadata
    @app.put("/metadata/{collection}", response_model=schemas.IdOut)
    def put_metadata(collection: str, doc: dict = Body(...)):
        return schemas.IdOut(id=node.repository.upsert_metadata(entity_from_dict(collection, doc)))

    @app.get("/metadata/{collection}")
    def list_metadata(collection: str):
        return [vars(e) for e in node.repository.list_metadata(collection)]

    @app.get("/metadata/{collection}/{key}")
    def get_metadata(collection: str, key: str):
        return vars(node.repository.get_metadata(collection, key))

    # window rules
    @app.post("/rules", status_code=201)
    def create_rule(doc: dict = Body(...)):
        rule_id = node.register_window_rule(WindowRule.from_dict(doc))
        return node.windowing.get_rule(rule_id).to_dict()

    @app.get("/rules")
    def list_rules():
        return [r.to_dict() for r in node.windowing.rules()]

    @app.get("/rules/{rule_id}")
    def get_rule(rule_id: str):
        return node.windowing.get_rule(rule_id).to_dict()

    @app.delete("/rules/{rule_id}")
    def delete_rule(rule_id: str):
        node.windowing.unregister_rule(rule_id)
        return {"deleted": rule_id}

    @app.get("/rules/{rule_id}/latest")
    def latest(rule_id: str, as_of: str | None = None):
        when = _instant(as_of, "as_of")
        value = node.windowing.latest(rule_id) if when is None else node.windowing.evaluate(rule_id, when)
        return value.to_dict()

    # notifications
    @app.post("/notifications/rules", status_code=201)
    def create_notification_rule(doc: dict = Body(...)):
        rule_id = node.register_notification_rule(NotificationRule.from_dict(doc))
        return node.notifications.get_rule(rule_id).to_dict()

    @app.get("/notifications/rules")
    def list_notification_rules():
        return [r.to_dict() for r in node.notifications.rules()]

    @app.delete("/notifications/rules/{rule_id}")
    def delete_notification_rule(rule_id: str):
        node.notifications.unregister_rule(rule_id)
        return {"deleted": rule_id}

    @app.get("/notifications")
    def list_events(rule: str | None = None):
        return [e.to_dict() for e in list(node.notifications.events) if rule is None or e.rule_id == rule]

    # engines
    @app.put("/node/engines", response_model=schemas.EidOut)
    def put_engine(body: schemas.EngineIn):
        return schemas.EidOut(eid=node.register_engine(EngineRecord(**body.model_dump())))

    @app.get("/node/engines", response_model=list[schemas.EngineOut])
    def list_engines():
        return [e.to_dict() for e in node.scheduler.list_engines()]

    @app.get("/node/engines/{eid}", response_model=schemas.EngineOut)
    def get_engine(eid: str):
        return node.scheduler.get_engine(eid).to_dict()

    @app.delete("/node/engines/{eid}")
    def delete_engine(eid: str):
        node.delete_engine(eid)
        return {"deleted": eid}

    # models
    @app.put("/node/models", response_model=schemas.MidOut)
    async def put_model(request: Request):
        """Register a prediction model archive sent as the raw request body."""
        data = await request.body()
        return schemas.MidOut(mid=node.register_model(data))

    @app.get("/node/models")
    def list_models():
        return [node.scheduler.describe(mid) for mid in node.scheduler.model_ids()]

    @app.get("/node/models/{mid}")
    def get_model(mid: str):
        return node.scheduler.describe(mid)

    @app.get("/node/models/{mid}/archive")
    def get_archive(mid: str):
        return Response(node.scheduler.archive_bytes(mid), media_type="application/zip")

    @app.get("/node/models/{mid}/records", response_model=list[schemas.PredictionOut])
    def get_records(mid: str, limit: int | None = Query(None, ge=0)):
        records = node.scheduler.records(mid)
        if limit is not None:
            records = records[-limit:] if limit else []
        return [r.to_dict() for r in records]

    @app.delete("/node/models/{mid}")
    def delete_model(mid: str):
        node.delete_model(mid)
        return {"deleted": mid}

    # prediction control
    @app.post("/node/prediction", response_model=schemas.PredictionControlOut)
    def prediction(mid: str | None = None, mode: int | None = None, time: str | None = None,
                   interval: str | None = None, count: int | None = None, end: str | None = None,
                   trigger: str | None = None, streams: str | None = None,
                   action: str | None = Query(None, pattern="^(start|stop|run)$")):
        """Set the mode of a model and/or start, stop or run it.

        ``mid`` may be omitted when exactly one model is registered. ``time``
        is the first boundary for mode 2 and the as-of instant for ``run``.
        """
        if mid is None:
            ids = node.scheduler.model_ids()
            if len(ids) != 1:
                raise UnknownModel("mid is required unless exactly one model is registered")
            mid = ids[0]
        node.scheduler.describe(mid)
        records = []
        if mode is not None:
            try:
                kind = ScheduleKind(mode)
            except ValueError:
                raise InvalidSchedule(f"unknown mode {mode}") from None
            try:
                step = parse_duration(interval) if interval not in (None, "") else None
            except (ValueError, TypeError) as exc:
                raise InvalidSchedule(f"bad interval: {interval!r}") from exc
            schedule = ScheduleMode(
                mode=kind,
                start=_instant(time, "time") if kind is ScheduleKind.TIME_SCHEDULED else None,
                interval=step,
                count=count,
                end=_instant(end, "end"),
                trigger_rule=trigger,
                trigger_streams=tuple(s for s in (streams or "").split(",") if s),
            )
            node.set_mode(mid, schedule)
        if action == "start":
            node.scheduler.start(mid)
            records = node.tick()
        elif action == "stop":
            node.stop(mid)
        elif action == "run":
            records = [node.run_once(mid, _instant(time, "time"))]
        desc = node.scheduler.describe(mid)
        return schemas.PredictionControlOut(
            mid=mid, running=desc["running"], schedule=desc["schedule"],
            records=[r.to_dict() for r in records if r.mid == mid],
        )

    @app.post("/node/tick", response_model=list[schemas.PredictionOut])
    def tick(now: str | None = None):
        """Advance the node to ``now`` (default: the clock) and fire due cycles."""
        when = _instant(now, "now")
        records = node.advance_to(when) if when is not None else node.tick()
        return [r.to_dict() for r in records]

    # ingestion helpers
    @app.post("/weather/fetch", response_model=schemas.WeatherFetchOut)
    def weather_fetch(body: schemas.WeatherFetchIn):
        request = WeatherRequest(base_date=body.base_date, base_time=body.base_time, nx=body.nx, ny=body.ny)
        result = node.fetch_weather(body.endpoint, request, body.streams)
        return schemas.WeatherFetchOut(
            resultCode=result.response.resultCode, resultMsg=result.response.resultMsg,
            published=[_ingested(p) for p in result.points], ignored=result.ignored,
        )

    @app.post("/replay", response_model=schemas.ReplayOut)
    def replay(body: schemas.ReplayIn):
        series = {}
        for sid, text in body.sources.items():
            node.broker.get_stream(sid)
            try:
                series[sid] = parse_csv(text, sid)
            except ParseError as exc:
                raise ParseError(f"{sid}: {exc.args[0]}", **exc.details) from exc
        speed = body.speedup if body.speedup is not None else float("inf")
        return schemas.ReplayOut(published=node.replay_series(series, speed))

    return app


def _jsonable(details: dict) -> dict:
    out = {}
    for key, value in details.items():
        if isinstance(value, (str, int, float, bool, list, type(None))):
            out[key] = value
        else:
            out[key] = str(value)
    return out
