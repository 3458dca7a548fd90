import io
import json
import zipfile
from datetime import timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import ONE_INPUT, stub_pma, tiny_model, tiny_pma
from wtstream.ann import predict
from wtstream.broker import Broker, DataPoint, StreamKind
from wtstream.clock import ManualClock
from wtstream.errors import (
    AlreadyRunning,
    BadArchive,
    ConflictError,
    DuplicateModel,
    ExecutorFailure,
    IncompleteInputs,
    InvalidSchedule,
    NotRunning,
    StaleCycle,
    UnknownEngine,
    UnknownModel,
)
from wtstream.notification import NotificationEvent
from wtstream.scheduler import (
    EngineRecord,
    ScheduleKind,
    ScheduleMode,
    Scheduler,
    build_pma,
    execute_external,
    load_pma,
)
from wtstream.windowing import WindowEngine

H = timedelta(hours=1)
TEN = timedelta(minutes=10)


class Harness:
    def __init__(self, t0, storage=None, max_catch_up=24):
        self.t0 = t0
        self.clock = ManualClock(t0)
        self.broker = Broker(now=self.clock.now)
        for sid in ("x", "y"):
            self.broker.create_stream(sid)
        self.windowing = WindowEngine(stream_exists=self.broker.has_stream)
        self.scheduler = Scheduler(self.windowing, self.broker, self.clock, storage, max_catch_up)

    def feed(self, sid, start, end, step=TEN, value=lambda i: float(i % 7)):
        """Points at ``start, start+step, ...`` strictly before ``end``; returns records fired by arrivals."""
        records, t, i = [], start, 0
        while t < end:
            p = DataPoint(sid, t, value(i))
            self.windowing.on_point(p)
            records += self.scheduler.on_data(p)
            t, i = t + step, i + 1
        return records

    def published(self, sid="pred"):
        return self.broker.read(sid)


@pytest.fixture
def h(t0):
    return Harness(t0)


class TestArchive:
    def test_round_trip(self):
        pma = load_pma(tiny_pma())
        assert pma.mid == "m" and pma.executor == "native_ann"
        assert pma.native_model().config.n_inputs == 1

    def test_not_a_zip(self):
        with pytest.raises(BadArchive):
            load_pma(b"plain bytes")

    def test_missing_manifest(self):
        buf = io.BytesIO()
        with zipfile.ZipFile(buf, "w") as zf:
            zf.writestr("model/x", b"")
        with pytest.raises(BadArchive):
            load_pma(buf.getvalue())

    def test_missing_model_dir(self):
        with pytest.raises(BadArchive):
            load_pma(build_pma({"mid": "m", "executor": "native_ann", "inputs": ONE_INPUT,
                                "output_stream": "p"}))

    @pytest.mark.parametrize("drop", ["mid", "executor", "inputs", "output_stream"])
    def test_manifest_keys_required(self, drop):
        manifest = {"mid": "m", "executor": "external", "command_template": "{input_file} {output_file}",
                    "inputs": ONE_INPUT, "output_stream": "p"}
        del manifest[drop]
        with pytest.raises(BadArchive):
            load_pma(build_pma(manifest, {"model/a": b""}))

    def test_index_gap(self):
        inputs = [dict(ONE_INPUT[0], input_index=1)]
        with pytest.raises(BadArchive):
            load_pma(build_pma({"mid": "m", "executor": "external", "command_template": "{input_file} {output_file}",
                                "inputs": inputs, "output_stream": "p"}, {"model/a": b""}))

    def test_arity_mismatch(self):
        model = tiny_model(n_inputs=2)
        files = {"model/model.json": json.dumps(model.to_dict()).encode()}
        with pytest.raises(BadArchive):
            load_pma(build_pma({"mid": "m", "executor": "native_ann", "inputs": ONE_INPUT,
                                "output_stream": "p"}, files))

    def test_path_traversal(self):
        with pytest.raises(BadArchive):
            load_pma(build_pma({"mid": "m"}, {"../evil": b""}))


class TestRegistry:
    def test_register_creates_prediction_stream(self, h):
        assert h.scheduler.register_pma(tiny_pma()) == "m"
        assert h.broker.get_stream("pred").kind is StreamKind.PREDICTION
        assert h.scheduler.describe("m")["rules"] == ["m.x_1h"]

    def test_duplicate(self, h):
        h.scheduler.register_pma(tiny_pma())
        with pytest.raises(DuplicateModel):
            h.scheduler.register_pma(tiny_pma())

    def test_output_must_be_prediction_stream(self, h):
        with pytest.raises(BadArchive):
            h.scheduler.register_pma(tiny_pma(output="y"))
        assert h.windowing.rules() == []

    def test_unregister_frees_rules(self, h):
        h.scheduler.register_pma(tiny_pma())
        h.scheduler.unregister("m")
        assert h.windowing.rules() == []
        with pytest.raises(UnknownModel):
            h.scheduler.describe("m")

    def test_archive_bytes_kept(self, h):
        data = tiny_pma()
        h.scheduler.register_pma(data)
        assert h.scheduler.archive_bytes("m") == data

    def test_named_engine(self, h):
        manifest = {"mid": "e", "executor": "external", "engine": "copy", "inputs": ONE_INPUT,
                    "output_stream": "pred"}
        with pytest.raises(UnknownEngine):
            h.scheduler.register_pma(build_pma(manifest, {"model/a": b""}))
        h.scheduler.register_engine(EngineRecord("copy", command_template="cp {input_file} {output_file}"))
        h.scheduler.register_pma(build_pma(manifest, {"model/a": b""}))
        with pytest.raises(ConflictError):
            h.scheduler.delete_engine("copy")


class TestModes:
    def test_default_on_demand(self, h):
        h.scheduler.register_pma(tiny_pma())
        assert h.scheduler.describe("m")["schedule"]["mode"] == 1

    @pytest.mark.parametrize("kwargs", [
        {"mode": 2, "interval": timedelta(0)},
        {"mode": 2, "interval": -H},
        {"mode": 2},
        {"mode": 2, "interval": H, "count": 0},
        {"mode": 4},
        {"mode": 9},
    ])
    def test_invalid(self, h, kwargs):
        h.scheduler.register_pma(tiny_pma())
        with pytest.raises(InvalidSchedule):
            h.scheduler.set_mode("m", ScheduleMode(**kwargs))

    def test_count_and_end_conflict(self, h, t0):
        h.scheduler.register_pma(tiny_pma())
        with pytest.raises(InvalidSchedule):
            h.scheduler.set_mode("m", ScheduleMode(2, t0, H, count=2, end=t0 + 5 * H))

    def test_single_instant(self, h, t0):
        h.scheduler.register_pma(tiny_pma())
        h.scheduler.set_mode("m", ScheduleMode(2, t0 + H, count=1))

    def test_start_stop(self, h):
        h.scheduler.register_pma(tiny_pma())
        h.scheduler.start("m")
        with pytest.raises(AlreadyRunning):
            h.scheduler.start("m")
        with pytest.raises(AlreadyRunning):
            h.scheduler.set_mode("m", ScheduleMode(3))
        h.scheduler.stop("m")
        with pytest.raises(NotRunning):
            h.scheduler.stop("m")

    def test_data_driven_defaults_to_input_streams(self, h):
        h.scheduler.register_pma(tiny_pma())
        assert h.scheduler.set_mode("m", ScheduleMode(3)).trigger_streams == ("x",)

    def test_start_without_time_uses_clock(self, h, t0):
        h.scheduler.register_pma(tiny_pma())
        h.scheduler.set_mode("m", ScheduleMode(2, interval=H))
        h.scheduler.start("m")
        assert h.scheduler.describe("m")["schedule"]["start"] == "2024-07-01T00:00:00Z"


class TestOnDemand:
    def test_equals_direct_forward(self, h, t0):
        h.scheduler.register_pma(tiny_pma())
        h.feed("x", t0, t0 + 2 * H)
        rec = h.scheduler.run_once("m", t0 + 2 * H)
        expected = predict(tiny_model(), [rec.inputs.values[0]])
        assert rec.value == expected
        assert h.published()[-1].value == expected
        assert h.published()[-1].timestamp == t0 + 2 * H

    def test_incomplete_skipped(self, h, t0):
        h.scheduler.register_pma(tiny_pma())
        with pytest.raises(IncompleteInputs) as info:
            h.scheduler.run_once("m", t0 + H)
        assert info.value.details["slots"] == [0]
        assert h.scheduler.stats("m").skipped_incomplete == 1
        assert h.published() == []

    def test_stale(self, h, t0):
        h.scheduler.register_pma(tiny_pma())
        h.feed("x", t0, t0 + 3 * H)
        h.scheduler.run_once("m", t0 + 2 * H)
        with pytest.raises(StaleCycle):
            h.scheduler.run_once("m", t0 + H)


class TestTimeScheduled:
    def setup_schedule(self, h, t0, **kw):
        h.scheduler.register_pma(tiny_pma())
        h.feed("x", t0, t0 + 10 * H)
        h.scheduler.set_mode("m", ScheduleMode(ScheduleKind.TIME_SCHEDULED, t0 + H, H, **kw))
        h.scheduler.start("m")

    def test_tick_before_start(self, h, t0):
        self.setup_schedule(h, t0, count=3)
        assert h.scheduler.tick(t0 + 30 * timedelta(minutes=1)) == []

    def test_three_exact_boundaries(self, h, t0):
        self.setup_schedule(h, t0, count=3)
        fired = []
        for k in range(1, 7):
            fired += h.scheduler.tick(t0 + k * H + timedelta(seconds=1))
        assert [r.as_of for r in fired] == [t0 + H, t0 + 2 * H, t0 + 3 * H]
        assert not h.scheduler.is_running("m")

    def test_repeated_tick_is_empty(self, h, t0):
        self.setup_schedule(h, t0)
        assert len(h.scheduler.tick(t0 + H)) == 1
        assert h.scheduler.tick(t0 + H) == []
        assert h.scheduler.tick(t0 + H + timedelta(minutes=59)) == []

    def test_catch_up_two(self, h, t0):
        self.setup_schedule(h, t0)
        h.scheduler.tick(t0 + H)
        fired = h.scheduler.tick(t0 + 3 * H)
        assert [r.as_of for r in fired] == [t0 + 2 * H, t0 + 3 * H]

    def test_catch_up_cap_counts_missed(self, t0):
        h = Harness(t0, max_catch_up=2)
        self.setup_schedule(h, t0)
        fired = h.scheduler.tick(t0 + 5 * H)
        assert [r.as_of for r in fired] == [t0 + 4 * H, t0 + 5 * H]
        assert h.scheduler.stats("m").missed == 3

    def test_end_bound(self, h, t0):
        h.scheduler.register_pma(tiny_pma())
        h.feed("x", t0, t0 + 10 * H)
        h.scheduler.set_mode("m", ScheduleMode(2, t0 + H, H, end=t0 + 3 * H + timedelta(minutes=30)))
        h.scheduler.start("m")
        assert len(h.scheduler.tick(t0 + 9 * H)) == 3
        assert not h.scheduler.is_running("m")

    def test_stopped_does_not_fire(self, h, t0):
        self.setup_schedule(h, t0)
        h.scheduler.stop("m")
        assert h.scheduler.tick(t0 + 5 * H) == []

    def test_warm_up_cycles_skipped_not_fatal(self, h, t0):
        h.scheduler.register_pma(tiny_pma())
        h.feed("x", t0 + 2 * H + TEN, t0 + 5 * H)
        h.scheduler.set_mode("m", ScheduleMode(2, t0 + H, H))
        h.scheduler.start("m")
        fired = h.scheduler.tick(t0 + 4 * H)
        assert [r.as_of for r in fired] == [t0 + 3 * H, t0 + 4 * H]
        assert h.scheduler.stats("m").skipped_incomplete == 2
        assert h.scheduler.is_running("m")


class TestDataDriven:
    def test_once_per_arrival(self, h, t0):
        h.scheduler.register_pma(tiny_pma())
        h.scheduler.set_mode("m", ScheduleMode(3))
        h.scheduler.start("m")
        fired = h.feed("x", t0, t0 + 5 * TEN)
        assert [r.as_of for r in fired] == [t0 + i * TEN for i in range(5)]

    def test_other_streams_ignored(self, h, t0):
        h.scheduler.register_pma(tiny_pma())
        h.feed("x", t0, t0 + H)
        h.scheduler.set_mode("m", ScheduleMode(3))
        h.scheduler.start("m")
        assert h.feed("y", t0 + H, t0 + 2 * H) == []

    def test_not_running_ignored(self, h, t0):
        h.scheduler.register_pma(tiny_pma())
        h.scheduler.set_mode("m", ScheduleMode(3))
        assert h.feed("x", t0, t0 + H) == []


class TestEventDriven:
    def event(self, t, rule="hot"):
        return NotificationEvent(rule, t, [30.0], "hot")

    def test_bound_rule_fires(self, h, t0):
        h.scheduler.register_pma(tiny_pma())
        h.feed("x", t0, t0 + H)
        h.scheduler.set_mode("m", ScheduleMode(4, trigger_rule="hot"))
        h.scheduler.start("m")
        assert [r.as_of for r in h.scheduler.on_event(self.event(t0 + H))] == [t0 + H]

    def test_unbound_rule(self, h, t0):
        h.scheduler.register_pma(tiny_pma())
        h.feed("x", t0, t0 + H)
        h.scheduler.set_mode("m", ScheduleMode(4, trigger_rule="hot"))
        h.scheduler.start("m")
        assert h.scheduler.on_event(self.event(t0 + H, "cold")) == []

    def test_stopped(self, h, t0):
        h.scheduler.register_pma(tiny_pma())
        h.feed("x", t0, t0 + H)
        h.scheduler.set_mode("m", ScheduleMode(4, trigger_rule="hot"))
        assert h.scheduler.on_event(self.event(t0 + H)) == []


class TestExternal:
    def engine(self, script, extra="", timeout=10.0):
        from helpers import STUBS

        return EngineRecord("e", command_template=f"{{python}} {STUBS / script} {{input_file}} {{output_file}} {extra}",
                            timeout=timeout)

    def test_copy_first(self):
        assert execute_external(self.engine("copy_first.py"), [2.5, 7.0]) == 2.5

    def test_non_finite(self):
        with pytest.raises(ExecutorFailure) as info:
            execute_external(self.engine("nan_writer.py"), [1.0])
        assert info.value.details["reason"] == "non_finite"

    def test_timeout(self):
        with pytest.raises(ExecutorFailure) as info:
            execute_external(self.engine("sleeper.py", "5", timeout=0.3), [1.0])
        assert info.value.details["reason"] == "timeout"

    def test_exit_status(self):
        with pytest.raises(ExecutorFailure) as info:
            execute_external(self.engine("failing.py"), [1.0])
        assert info.value.details["reason"] == "exit_status"
        assert "deliberate failure" in info.value.details["stderr"]

    def test_no_output(self):
        eng = EngineRecord("e", command_template="true {input_file} {output_file}")
        with pytest.raises(ExecutorFailure) as info:
            execute_external(eng, [1.0])
        assert info.value.details["reason"] == "no_output"

    def test_launch_failure(self):
        eng = EngineRecord("e", command_template="/no/such/binary {input_file} {output_file}")
        with pytest.raises(ExecutorFailure) as info:
            execute_external(eng, [1.0])
        assert info.value.details["reason"] == "launch"

    def test_template_needs_placeholders(self):
        from wtstream.errors import BadConfig

        with pytest.raises(BadConfig):
            EngineRecord("e", command_template="echo {input_file}").validate()

    def test_crash_is_isolated(self, h, t0):
        h.scheduler.register_pma(stub_pma("bad", "failing.py"))
        h.scheduler.register_pma(tiny_pma(output="pred2"))
        h.feed("x", t0, t0 + 2 * H)
        for mid in ("bad", "m"):
            h.scheduler.set_mode(mid, ScheduleMode(2, t0 + H, H))
            h.scheduler.start(mid)
        fired = h.scheduler.tick(t0 + 2 * H)
        assert [r.mid for r in fired] == ["m", "m"]
        assert h.scheduler.stats("bad").failures == 2
        assert h.scheduler.is_running("bad")

    def test_stub_forward_matches_native(self, h, t0):
        model = tiny_model()
        h.scheduler.register_pma(tiny_pma())
        h.scheduler.register_pma(stub_pma("ext", "ann_forward.py", output="pred2", extra_args="{model_dir}",
                                          model=model))
        h.feed("x", t0, t0 + 2 * H, value=lambda i: 3.0 * i - 1.0)
        a = h.scheduler.run_once("m", t0 + 2 * H)
        b = h.scheduler.run_once("ext", t0 + 2 * H)
        assert abs(a.value - b.value) <= 1e-9 * max(1.0, abs(a.value))


class TestProperties:
    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(0, 5), min_size=1, max_size=8))
    def test_no_lost_cycles(self, jumps):
        """Whatever the tick pattern, every boundary up to the last tick fires exactly once, in order."""
        from conftest import T0

        h = Harness(T0)
        h.scheduler.register_pma(tiny_pma())
        h.scheduler.set_mode("m", ScheduleMode(2, T0 + H, H))
        h.scheduler.start("m")
        now, fed, fired = T0 + H, T0, []
        for j in jumps:
            now += j * H
            h.feed("x", fed, now + TEN)
            fed = now + TEN
            fired += h.scheduler.tick(now)
        assert [r.as_of for r in fired] == [T0 + k * H for k in range(1, (now - T0) // H + 1)]

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-20, 40), min_size=1, max_size=40))
    def test_prediction_stream_monotone(self, values):
        from conftest import T0

        h = Harness(T0)
        h.scheduler.register_pma(tiny_pma())
        h.scheduler.set_mode("m", ScheduleMode(3))
        h.scheduler.start("m")
        h.feed("x", T0, T0 + len(values) * TEN, value=lambda i: values[i])
        stamps = [p.timestamp for p in h.published()]
        assert stamps == sorted(stamps) and len(stamps) == len(values)
        assert all(np.isfinite(p.value) for p in h.published())
