"""Prediction Model Archive: a zip bundling a model with its input wiring.

Layout::

    manifest.json     pma_version, mid, name, executor, inputs, output_stream, ...
    model/...         payload (``model/model.json`` for the native network, or scripts)
    data/...          optional sample inputs

``inputs`` is a list of window-rule documents, each with an ``input_index``;
the indices must cover ``0..n-1`` exactly.
"""
from __future__ import annotations

import io
import json
import posixpath
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

from ..ann import AnnModel
from ..errors import BadArchive, BadConfig, BadWindow
from ..windowing import WindowRule

PMA_VERSION = 1
NATIVE_PAYLOAD = "model/model.json"
EXECUTORS = ("native_ann", "external")


@dataclass
class PredictionModelArchive:
    manifest: dict
    files: dict[str, bytes] = field(default_factory=dict)

    @property
    def mid(self) -> str:
        return self.manifest["mid"]

    @property
    def executor(self) -> str:
        return self.manifest["executor"]

    @property
    def output_stream(self) -> str:
        return self.manifest["output_stream"]

    def input_rules(self) -> list[WindowRule]:
        return [WindowRule.from_dict(doc) for doc in self.manifest["inputs"]]

    def native_model(self) -> AnnModel:
        payload = self.manifest.get("payload", NATIVE_PAYLOAD)
        try:
            return AnnModel.from_dict(json.loads(self.files[payload]))
        except KeyError:
            raise BadArchive(f"payload {payload!r} missing from archive") from None
        except (ValueError, BadConfig) as exc:
            raise BadArchive(f"payload does not hold a valid network: {exc}") from exc

    def extract(self, directory: Path) -> None:
        for name, data in self.files.items():
            target = directory / name
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(data)

    def to_bytes(self) -> bytes:
        return build_pma(self.manifest, self.files)


def _safe_name(name: str) -> str:
    norm = posixpath.normpath(name)
    if name.startswith("/") or norm.startswith("..") or "\\" in name:
        raise BadArchive(f"unsafe path in archive: {name!r}")
    return norm


def validate_manifest(manifest: dict) -> None:
    if not isinstance(manifest, dict):
        raise BadArchive("manifest must be a JSON object")
    if manifest.get("pma_version", PMA_VERSION) != PMA_VERSION:
        raise BadArchive(f"unsupported pma_version {manifest.get('pma_version')!r}")
    for key in ("mid", "executor", "inputs", "output_stream"):
        if key not in manifest:
            raise BadArchive(f"manifest lacks {key!r}")
    if not isinstance(manifest["mid"], str) or not manifest["mid"] or "/" in manifest["mid"]:
        raise BadArchive("mid must be a non-empty string without '/'")
    if manifest["executor"] not in EXECUTORS:
        raise BadArchive(f"executor must be one of {EXECUTORS}")
    if manifest["executor"] == "external" and not (manifest.get("engine") or manifest.get("command_template")):
        raise BadArchive("external models need an engine id or a command_template")
    inputs = manifest["inputs"]
    if not isinstance(inputs, list) or not inputs:
        raise BadArchive("inputs must be a non-empty list of rule documents")
    try:
        rules = [WindowRule.from_dict(doc) for doc in inputs]
    except BadWindow as exc:
        raise BadArchive(f"bad input rule: {exc}") from exc
    indices = sorted(r.input_index for r in rules if r.input_index is not None)
    if len(indices) != len(rules) or indices != list(range(len(rules))):
        raise BadArchive("input indices must be exactly 0..n-1")


def load_pma(data: bytes) -> PredictionModelArchive:
    try:
        zf = zipfile.ZipFile(io.BytesIO(data))
    except zipfile.BadZipFile as exc:
        raise BadArchive(f"not a zip archive: {exc}") from exc
    files = {}
    with zf:
        for info in zf.infolist():
            if info.is_dir():
                continue
            files[_safe_name(info.filename)] = zf.read(info)
    if "manifest.json" not in files:
        raise BadArchive("manifest.json missing at archive root")
    if not any(name.startswith("model/") for name in files):
        raise BadArchive("model/ directory missing")
    try:
        manifest = json.loads(files.pop("manifest.json"))
    except ValueError as exc:
        raise BadArchive(f"manifest.json is not valid JSON: {exc}") from exc
    validate_manifest(manifest)
    pma = PredictionModelArchive(manifest, files)
    if pma.executor == "native_ann":
        model = pma.native_model()
        if model.config.n_inputs != len(manifest["inputs"]):
            raise BadArchive(
                f"network takes {model.config.n_inputs} inputs, manifest binds {len(manifest['inputs'])}")
    return pma


def build_pma(manifest: dict, files: dict[str, bytes] | None = None) -> bytes:
    manifest = dict(manifest)
    manifest.setdefault("pma_version", PMA_VERSION)
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=2))
        for name, data in (files or {}).items():
            zf.writestr(_safe_name(name), data)
    return buf.getvalue()


def default_input_rules(tm_stream: str, rf_stream: str, lag_hours: int = 17) -> list[dict]:
    """The three water-temperature inputs: hourly air temperature, hourly rainfall,
    and the hourly air temperature ``lag_hours`` earlier (indices 0, 1, 2)."""
    return [
        {"rule_id": "tm_1h", "source_stream": tm_stream, "aggregate": "avg",
         "window": 3600, "lag": 0, "input_index": 0},
        {"rule_id": "rf_1h", "source_stream": rf_stream, "aggregate": "avg",
         "window": 3600, "lag": 0, "input_index": 1},
        {"rule_id": f"tm_1h_lag{lag_hours}h", "source_stream": tm_stream, "aggregate": "avg",
         "window": 3600, "lag": lag_hours * 3600, "cadence": {"snapshot": 3600}, "input_index": 2},
    ]


def native_pma(model: AnnModel, mid: str, inputs: list[dict], output_stream: str,
               name: str = "", data_files: dict[str, bytes] | None = None) -> bytes:
    manifest = {
        "pma_version": PMA_VERSION,
        "mid": mid,
        "name": name or mid,
        "executor": "native_ann",
        "payload": NATIVE_PAYLOAD,
        "inputs": inputs,
        "output_stream": output_stream,
    }
    files = {NATIVE_PAYLOAD: json.dumps(model.to_dict()).encode("utf-8")}
    for fname, data in (data_files or {}).items():
        files[f"data/{fname}"] = data
    return build_pma(manifest, files)
