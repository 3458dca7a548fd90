"""Model executors: the in-process network and an external-process contract.

External engines are launched from a command template. Placeholders:

    {input_file}   CSV written before launch, header ``idx,value``, one row per slot
    {output_file}  file the process must leave holding one finite number
    {model_dir}    directory the archive was unpacked into
    {python}       the interpreter running this service

The template is split shell-style before substitution, so substituted paths
never need quoting. No shell is involved.
"""
from __future__ import annotations

import math
import shlex
import subprocess
import sys
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path

from ..ann import AnnModel, predict
from ..errors import BadConfig, ExecutorFailure

DEFAULT_TIMEOUT = 60.0
REQUIRED_PLACEHOLDERS = ("{input_file}", "{output_file}")


@dataclass(frozen=True)
class EngineRecord:
    eid: str
    kind: str = "external"
    command_template: str = ""
    timeout: float = DEFAULT_TIMEOUT
    description: str = ""

    def validate(self) -> "EngineRecord":
        if not self.eid or "/" in self.eid:
            raise BadConfig("eid must be a non-empty string without '/'")
        if self.kind not in ("native_ann", "external"):
            raise BadConfig(f"unknown engine kind {self.kind!r}")
        if self.kind == "external":
            missing = [p for p in REQUIRED_PLACEHOLDERS if p not in self.command_template]
            if missing:
                raise BadConfig(f"command_template lacks {', '.join(missing)}")
        if not self.timeout > 0:
            raise BadConfig("timeout must be positive")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def write_input_csv(path: Path, values) -> None:
    lines = ["idx,value"] + [f"{i},{float(v)!r}" for i, v in enumerate(values)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_output_file(path: Path) -> float:
    try:
        text = path.read_text(encoding="utf-8").strip()
    except FileNotFoundError:
        raise ExecutorFailure("engine produced no output file", reason="no_output") from None
    if not text or len(text.splitlines()) != 1:
        raise ExecutorFailure(f"output must be a single line, got {text[:80]!r}", reason="unparseable")
    try:
        value = float(text)
    except ValueError:
        raise ExecutorFailure(f"output {text[:80]!r} is not a number", reason="unparseable") from None
    if not math.isfinite(value):
        raise ExecutorFailure(f"output {text!r} is not finite", reason="non_finite")
    return value


def execute_external(engine: EngineRecord, values, workdir: str | Path | None = None,
                     model_dir: str | Path | None = None, timeout: float | None = None) -> float:
    """Run one prediction through an external process and return its output."""
    if engine.kind != "external":
        raise ExecutorFailure(f"engine {engine.eid!r} is not external", reason="kind")
    timeout = engine.timeout if timeout is None else timeout
    with tempfile.TemporaryDirectory(dir=workdir, prefix="run-") as tmp:
        tmp = Path(tmp)
        input_file = tmp / "input.csv"
        output_file = tmp / "output.txt"
        write_input_csv(input_file, values)
        subs = {
            "input_file": str(input_file),
            "output_file": str(output_file),
            "model_dir": str(model_dir or tmp),
            "python": sys.executable,
        }
        try:
            args = [token.format(**subs) for token in shlex.split(engine.command_template)]
        except (KeyError, ValueError, IndexError) as exc:
            raise ExecutorFailure(f"bad command template: {exc}", reason="template") from exc
        try:
            proc = subprocess.run(args, cwd=tmp, capture_output=True, text=True, timeout=timeout)
        except subprocess.TimeoutExpired as exc:
            raise ExecutorFailure(f"engine {engine.eid!r} timed out after {timeout}s", reason="timeout") from exc
        except OSError as exc:
            raise ExecutorFailure(f"cannot launch {args[0]!r}: {exc}", reason="launch") from exc
        if proc.returncode != 0:
            raise ExecutorFailure(
                f"engine {engine.eid!r} exited with status {proc.returncode}",
                reason="exit_status", returncode=proc.returncode,
                stderr=proc.stderr[-2000:], stdout=proc.stdout[-2000:],
            )
        return read_output_file(output_file)


class NativeAnnExecutor:
    kind = "native_ann"

    def __init__(self, model: AnnModel):
        self.model = model

    def run(self, values) -> float:
        value = predict(self.model, values)
        if not math.isfinite(value):
            raise ExecutorFailure("network produced a non-finite value", reason="non_finite")
        return value


class ExternalExecutor:
    kind = "external"

    def __init__(self, engine: EngineRecord, model_dir: Path, workdir: Path | None = None):
        self.engine = engine
        self.model_dir = Path(model_dir)
        self.workdir = workdir

    def run(self, values) -> float:
        return execute_external(self.engine, values, self.workdir, self.model_dir)
