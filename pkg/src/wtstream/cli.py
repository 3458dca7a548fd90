"""Command line: offline training and analysis, plus a thin client for the service."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import replace
from datetime import datetime, timedelta, timezone
from pathlib import Path

import httpx
import numpy as np

from . import ann, metrics, synthetic
from .errors import WtError
from .repository import parse_csv
from .scheduler import default_input_rules, native_pma

DEFAULT_URL = "http://127.0.0.1:8080"
TRAINING_COLUMNS = ("TM", "TM_lag", "RF", "WT")


class CliError(Exception):
    pass


def _emit(doc) -> None:
    print(json.dumps(doc, indent=2))


# offline commands

def read_training_csv(path: str) -> tuple[np.ndarray, np.ndarray]:
    """Rows of ``TM,TM_lag,RF,WT``; inputs come back in model order (TM, RF, TM_lag)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in TRAINING_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise CliError(f"{path}: missing columns {', '.join(missing)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append([float(row[c]) for c in TRAINING_COLUMNS])
            except (TypeError, ValueError):
                raise CliError(f"{path}: line {lineno}: non-numeric value") from None
    if not rows:
        raise CliError(f"{path}: no data rows")
    data = np.array(rows)
    return data[:, [0, 2, 1]], data[:, 3]


def cmd_train(args) -> int:
    inputs, target = read_training_csv(args.csv)
    train_set, test_set = ann.split_rows(inputs, target, args.train_rows)
    base = ann.AnnConfig(n_inputs=3, n_hidden=args.hidden[0], learning_rate=args.lr[0],
                         max_epochs=args.epochs, seed=args.seed).validate()
    grid = None
    if len(args.hidden) > 1 or len(args.lr) > 1:
        n_val = max(1, int(round(len(train_set) * args.val_fraction)))
        if n_val >= len(train_set):
            raise CliError("not enough training rows for a validation split")
        fit, val = ann.split_rows(train_set.inputs, train_set.targets, len(train_set) - n_val)
        grid = ann.grid_search(ann.GridSearchSpace(list(args.hidden), list(args.lr)), fit, val, base)
        base = replace(base, n_hidden=grid.best.n_hidden, learning_rate=grid.best.learning_rate)
    model = ann.train(base, train_set)
    summary = {
        "output": args.output,
        "n_hidden": model.config.n_hidden,
        "learning_rate": model.config.learning_rate,
        "epochs": len(model.history),
        "train_rows": len(train_set),
        "train_mse": ann.mse(model, train_set),
    }
    if grid is not None:
        summary["grid"] = grid.rows()
    if len(test_set) >= 2:
        summary["test"] = metrics.evaluate(test_set.targets, ann.predict_batch(model, test_set.inputs)).to_dict()
    data = native_pma(model, args.mid, default_input_rules(args.tm_stream, args.rf_stream, args.lag_hours),
                      args.output_stream, name=args.name or args.mid)
    Path(args.output).write_bytes(data)
    _emit(summary)
    return 0


def _read_values(path: str) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        return np.array([p.value for p in parse_csv(fh.read(), Path(path).stem)])


def read_pair_csv(path: str) -> tuple[np.ndarray, np.ndarray]:
    """Two numeric columns (observed, predicted); a non-numeric first row is taken as a header."""
    obs, pred = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if len(row) != 2:
                raise CliError(f"{path}: line {lineno}: expected 2 columns, got {len(row)}")
            try:
                o, p = float(row[0]), float(row[1])
            except ValueError:
                if lineno == 1:
                    continue
                raise CliError(f"{path}: line {lineno}: non-numeric value") from None
            obs.append(o)
            pred.append(p)
    return np.array(obs), np.array(pred)


def cmd_evaluate(args) -> int:
    if args.pred is None:
        obs, pred = read_pair_csv(args.obs)
    else:
        obs, pred = _read_values(args.obs), _read_values(args.pred)
    _emit(metrics.evaluate(obs, pred).to_dict())
    return 0


def cmd_lagscan(args) -> int:
    scan = metrics.select_lag(_read_values(args.y), _read_values(args.x), args.kmax)
    if args.json:
        _emit(scan.to_dict())
        return 0
    print("lag  correlation")
    for k, rho in enumerate(scan.correlations):
        mark = "  <-" if k == scan.chosen_lag else ""
        print(f"{k:>3}  {rho: .6f}{mark}")
    print(f"chosen lag: {scan.chosen_lag}")
    return 0


def cmd_synth(args) -> int:
    out = Path(args.directory)
    out.mkdir(parents=True, exist_ok=True)
    start = datetime.fromisoformat(args.start).replace(tzinfo=timezone.utc)
    hour = timedelta(hours=1)
    if args.kind == "training":
        columns, wt = synthetic.wt_dataset(args.rows, args.seed)
        synthetic.write_training_csv(out / "training.csv", columns, wt)
        written = ["training.csv"]
    elif args.kind == "lagpair":
        y, x = synthetic.lagged_pair(args.rows, args.lag, args.seed)
        synthetic.write_series_csv(out / "y.csv", start, hour, y)
        synthetic.write_series_csv(out / "x.csv", start, hour, x)
        written = ["y.csv", "x.csv"]
    else:
        rng = np.random.default_rng(args.seed)
        synthetic.write_series_csv(out / "TM.csv", start, hour, synthetic.air_temperature(args.rows, rng))
        synthetic.write_series_csv(out / "RF.csv", start, hour, synthetic.rainfall(args.rows, rng))
        written = ["TM.csv", "RF.csv"]
    _emit({"directory": str(out), "files": written})
    return 0


# service client

def _client(args) -> httpx.Client:
    return httpx.Client(base_url=args.url, timeout=args.timeout)


def _call(args, method: str, path: str, **kwargs):
    with _client(args) as client:
        resp = client.request(method, path, **kwargs)
    if resp.status_code >= 400:
        try:
            body = resp.json()
            detail = f"{body.get('error', 'error')}: {body.get('detail', '')}"
        except ValueError:
            detail = resp.text
        raise CliError(f"HTTP {resp.status_code} {detail}")
    if resp.headers.get("content-type", "").startswith("application/json"):
        return resp.json()
    return resp.content


def cmd_model(args) -> int:
    if args.action == "register":
        _emit(_call(args, "PUT", "/node/models", content=Path(args.target).read_bytes(),
                    headers={"content-type": "application/zip"}))
    elif args.action == "list":
        _emit(_call(args, "GET", "/node/models"))
    elif args.action == "get":
        _emit(_call(args, "GET", f"/node/models/{args.target}"))
    elif args.action == "records":
        _emit(_call(args, "GET", f"/node/models/{args.target}/records"))
    else:
        _emit(_call(args, "DELETE", f"/node/models/{args.target}"))
    return 0


def cmd_engine(args) -> int:
    if args.action == "register":
        body = {"eid": args.eid, "command_template": args.command, "timeout": args.engine_timeout}
        _emit(_call(args, "PUT", "/node/engines", json=body))
    elif args.action == "list":
        _emit(_call(args, "GET", "/node/engines"))
    elif args.action == "get":
        _emit(_call(args, "GET", f"/node/engines/{args.eid}"))
    else:
        _emit(_call(args, "DELETE", f"/node/engines/{args.eid}"))
    return 0


def cmd_predict(args) -> int:
    params = {k: v for k, v in {
        "mid": args.mid, "mode": args.mode, "time": args.time, "interval": args.interval,
        "count": args.count, "end": args.end, "trigger": args.trigger, "streams": args.streams,
        "action": args.action,
    }.items() if v is not None}
    _emit(_call(args, "POST", "/node/prediction", params=params))
    return 0


def cmd_streams(args) -> int:
    sid = args.stream_id
    if args.action == "list":
        _emit(_call(args, "GET", "/streams"))
        return 0
    if sid is None:
        raise CliError(f"streams {args.action} needs a stream id")
    if args.action == "create":
        _emit(_call(args, "POST", "/streams", json={"stream_id": sid, "kind": args.kind}))
    elif args.action == "get":
        _emit(_call(args, "GET", f"/streams/{sid}"))
    elif args.action == "delete":
        _emit(_call(args, "DELETE", f"/streams/{sid}"))
    else:
        params = {k: v for k, v in {"from": args.t0, "to": args.t1}.items() if v}
        if args.action == "values":
            _emit(_call(args, "GET", f"/streams/{sid}/values", params=params))
        else:
            sys.stdout.write(_call(args, "GET", f"/streams/{sid}/download", params=params).decode())
    return 0


def cmd_replay(args) -> int:
    sources = {}
    for pair in args.sources:
        sid, sep, path = pair.partition("=")
        if not sep or not sid or not path:
            raise CliError(f"expected STREAM=PATH, got {pair!r}")
        sources[sid] = Path(path).read_text(encoding="utf-8")
    body = {"sources": sources, "speedup": None if math.isinf(args.speedup) else args.speedup}
    _emit(_call(args, "POST", "/replay", json=body))
    return 0


# processes

def cmd_serve(args) -> int:
    import uvicorn

    from .api import create_app
    from .clock import ManualClock
    from .node import Node

    clock = ManualClock(datetime.fromisoformat(args.virtual_clock).replace(tzinfo=timezone.utc)) \
        if args.virtual_clock else None
    node = Node(args.data_dir, clock=clock)
    app = create_app(node, tick_interval=None if clock else args.tick,
                     tcp_port=args.tcp_port, tcp_host=args.host)
    uvicorn.run(app, host=args.host, port=args.port, log_level=args.log_level)
    return 0


def cmd_fixture_server(args) -> int:
    import uvicorn

    from .weather import create_fixture_app

    uvicorn.run(create_fixture_app(), host=args.host, port=args.port, log_level=args.log_level)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wtstream", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def client(sp):
        sp.add_argument("--url", default=DEFAULT_URL, help="service base URL")
        sp.add_argument("--timeout", type=float, default=30.0)
        return sp

    t = sub.add_parser("train", help="fit a network on TM,TM_lag,RF,WT rows and write a model archive")
    t.add_argument("csv")
    t.add_argument("-o", "--output", default="model.pma")
    t.add_argument("--hidden", type=int, nargs="+", default=[10])
    t.add_argument("--lr", type=float, nargs="+", default=[0.55])
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--epochs", type=int, default=2000)
    t.add_argument("--train-rows", type=int, default=790)
    t.add_argument("--val-fraction", type=float, default=0.2,
                   help="share of training rows held out when several cells are searched")
    t.add_argument("--mid", default="wt")
    t.add_argument("--name", default="")
    t.add_argument("--tm-stream", default="TM")
    t.add_argument("--rf-stream", default="RF")
    t.add_argument("--lag-hours", type=int, default=synthetic.LAG_HOURS)
    t.add_argument("--output-stream", default="wt.pred")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="skill scores of predictions against observations")
    e.add_argument("obs", help="observed series, or a two-column obs,pred CSV when PRED is omitted")
    e.add_argument("pred", nargs="?", help="predicted series in the stream download format")
    e.set_defaults(func=cmd_evaluate)

    lg = sub.add_parser("lagscan", help="cross-correlation of y against delayed x")
    lg.add_argument("y")
    lg.add_argument("x")
    lg.add_argument("--kmax", type=int, default=24)
    lg.add_argument("--json", action="store_true")
    lg.set_defaults(func=cmd_lagscan)

    sy = sub.add_parser("synth", help="write synthetic data sets")
    sy.add_argument("kind", choices=["training", "lagpair", "weather"])
    sy.add_argument("directory")
    sy.add_argument("--rows", type=int, default=1126)
    sy.add_argument("--lag", type=int, default=synthetic.LAG_HOURS)
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--start", default="2024-01-01T00:00:00")
    sy.set_defaults(func=cmd_synth)

    m = client(sub.add_parser("model", help="manage model archives on a running node"))
    m.add_argument("action", choices=["register", "list", "get", "records", "delete"])
    m.add_argument("target", nargs="?", help="archive path for register, model id otherwise")
    m.set_defaults(func=cmd_model)

    en = client(sub.add_parser("engine", help="manage external execution engines"))
    en.add_argument("action", choices=["register", "list", "get", "delete"])
    en.add_argument("eid", nargs="?")
    en.add_argument("--command", default="", help="template using {input_file} and {output_file}")
    en.add_argument("--engine-timeout", type=float, default=60.0)
    en.set_defaults(func=cmd_engine)

    pr = client(sub.add_parser("predict", help="set a model's mode, start/stop it or run one cycle"))
    pr.add_argument("--mid")
    pr.add_argument("--mode", type=int, choices=[1, 2, 3, 4])
    pr.add_argument("--time")
    pr.add_argument("--interval")
    pr.add_argument("--count", type=int)
    pr.add_argument("--end")
    pr.add_argument("--trigger", help="notification rule id for mode 4")
    pr.add_argument("--streams", help="comma separated trigger streams for mode 3")
    pr.add_argument("--action", choices=["start", "stop", "run"])
    pr.set_defaults(func=cmd_predict)

    st = client(sub.add_parser("streams", help="list, create and read streams"))
    st.add_argument("action", choices=["list", "create", "get", "delete", "values", "download"])
    st.add_argument("stream_id", nargs="?")
    st.add_argument("--kind", default="sensor")
    st.add_argument("--from", dest="t0")
    st.add_argument("--to", dest="t1")
    st.set_defaults(func=cmd_streams)

    rp = client(sub.add_parser("replay", help="publish recorded CSV series through a node"))
    rp.add_argument("sources", nargs="+", metavar="STREAM=PATH")
    rp.add_argument("--speedup", type=float, default=math.inf)
    rp.set_defaults(func=cmd_replay)

    sv = sub.add_parser("serve", help="run a node with its REST service")
    sv.add_argument("--host", default="127.0.0.1")
    sv.add_argument("--port", type=int, default=8080)
    sv.add_argument("--tcp-port", type=int, default=None, help="line ingestion port (e.g. 7070)")
    sv.add_argument("--data-dir", default=None)
    sv.add_argument("--virtual-clock", metavar="START", default=None,
                    help="drive time only by replay and /node/tick, starting at START")
    sv.add_argument("--tick", type=float, default=1.0, help="seconds between schedule checks")
    sv.add_argument("--log-level", default="info")
    sv.set_defaults(func=cmd_serve)

    fx = sub.add_parser("fixture-server", help="run the stand-in weather service")
    fx.add_argument("--host", default="127.0.0.1")
    fx.add_argument("--port", type=int, default=8081)
    fx.add_argument("--log-level", default="info")
    fx.set_defaults(func=cmd_fixture_server)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (WtError, CliError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except httpx.HTTPError as exc:
        print(f"error: cannot reach service: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
