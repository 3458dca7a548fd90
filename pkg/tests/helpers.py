"""Builders shared by the scheduler, node, API and acceptance tests."""
import json
from pathlib import Path

from wtstream.ann import AnnConfig, init_model
from wtstream.scheduler import build_pma, native_pma

STUBS = Path(__file__).parent / "stubs"

ONE_INPUT = [{"rule_id": "x_1h", "source_stream": "x", "aggregate": "avg", "window": 3600, "input_index": 0}]


def tiny_model(n_inputs=1, seed=0):
    return init_model(AnnConfig(n_inputs=n_inputs, n_hidden=3, seed=seed))


def tiny_pma(mid="m", output="pred", inputs=ONE_INPUT, seed=0):
    return native_pma(tiny_model(len(inputs), seed), mid, inputs, output)


def stub_pma(mid, script, inputs=ONE_INPUT, output="pred", extra_args="", model=None, timeout=None):
    """External PMA whose engine runs ``tests/stubs/<script>``."""
    manifest = {
        "mid": mid,
        "executor": "external",
        "command_template": f"{{python}} {STUBS / script} {{input_file}} {{output_file}} {extra_args}".strip(),
        "inputs": inputs,
        "output_stream": output,
    }
    if timeout is not None:
        manifest["timeout"] = timeout
    files = {"model/README": b"stub engine"}
    if model is not None:
        files["model/model.json"] = json.dumps(model.to_dict()).encode()
    return build_pma(manifest, files)


def diurnal_series(t0, hours=48, step_minutes=10, spike=(30, 35), spike_size=12.0):
    """TM and RF every ``step_minutes`` from ``t0 + step`` to ``t0 + hours``.

    TM follows a daily cycle around 17 degrees and jumps by ``spike_size``
    during the hours in ``spike``; RF stays dry.
    """
    import math
    from datetime import timedelta

    from wtstream.broker import DataPoint

    series = {"TM": [], "RF": []}
    per_hour = 60 // step_minutes
    for i in range(1, hours * per_hour + 1):
        ts = t0 + timedelta(minutes=step_minutes * i)
        hour = i / per_hour
        tm = 17 + 5 * math.sin(2 * math.pi * (hour - 9) / 24)
        if spike and spike[0] <= hour < spike[1]:
            tm += spike_size
        series["TM"].append(DataPoint("TM", ts, tm))
        series["RF"].append(DataPoint("RF", ts, 0.0))
    return series
