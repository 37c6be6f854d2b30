"""Experiment configuration: a TOML file with model/train/task/sampler/output/eval sections.

Relative paths in a config file resolve against the file's own directory.
A ``manifest.json`` written by the CLI is also accepted; it carries the fully
resolved configuration, so any run can be repeated from its manifest alone.
"""

from __future__ import annotations

import copy
import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib
except ImportError:  # Python 3.10
    import tomli as tomllib

from .errors import FMPSError

__all__ = ["ConfigError", "MissingInputError", "ExperimentConfig", "load_config", "parse_config", "SCHEMA"]


class ConfigError(FMPSError, ValueError):
    """Bad configuration; the message names the file and line where possible."""


class MissingInputError(FMPSError, FileNotFoundError):
    pass


# value kinds
INT, FLOAT, STR, BOOL, INTS, FLOATS, PATH, PATH_OR_LIST = "int", "float", "str", "bool", "ints", "floats", "path", "path|list"

SCHEMA: dict[str, dict[str, tuple]] = {
    "model": {
        "kind": (STR, "mlp", {"mlp", "gaussian"}),
        "schedule": (STR, "rectified-linear", {"rectified-linear", "variance-preserving-cosine"}),
        "t_min": (FLOAT, 1e-3),
        "t_max": (FLOAT, 1 - 1e-3),
        "hidden": (INTS, [128, 128, 128]),
        "time_embed": (INT, 32),
        "activation": (STR, "gelu", {"gelu", "tanh", "softplus"}),
        "init_seed": (INT, 0),
        "checkpoint": (STR, ""),
        "dim": (INT, 2),
        "mean": (FLOATS, None),
        "var": (FLOATS, None),
    },
    "train": {
        "dataset": (STR, "gauss-mixture-8",
                    {"two-moons", "gauss-mixture-8", "checkerboard", "synthetic-patterns-8x8", "external-idx"}),
        "batch_size": (INT, 256),
        "steps": (INT, 5000),
        "lr": (FLOAT, 1e-3),
        "optimizer": (STR, "adam", {"adam", "sgd"}),
        "seed": (INT, 0),
        "checkpoint_every": (INT, 0),
        "noise": (FLOAT, 0.05),
        "idx_path": (PATH, None),
        "labels_path": (PATH, None),
    },
    "task": {
        "energy": (STR, "none",
                   {"none", "identity", "inpaint-mask", "downsample", "gaussian-blur", "classifier-logit"}),
        "condition": (PATH_OR_LIST, None),
        "mask": (PATH_OR_LIST, None),
        "truth": (PATH_OR_LIST, None),
        "factor": (INT, 2),
        "kernel_size": (INT, 5),
        "sigma": (FLOAT, 1.0),
        "classifier": (PATH, None),
        "target_class": (INT, 1),
        "classifier_hidden": (INTS, [64, 64]),
        "classifier_steps": (INT, 2000),
        "classifier_seed": (INT, 0),
    },
    "sampler": {
        "variant": (STR, "unconditional", {"unconditional", "fmps-gradient", "fmps-free"}),
        "steps": (INT, 100),
        "r": (FLOAT, 0.0),
        "normalization": (BOOL, True),
        "seed": (INT, 0),
        "chains": (INT, 256),
        "correction_cap": (FLOAT, 10.0),
        "r_values": (FLOATS, [0.0, 0.3, 0.5, 1.0, 1.5, 2.0]),
    },
    "output": {
        "dir": (STR, "out"),
        "figures": (BOOL, True),
    },
    "eval": {
        "samples": (PATH, None),
        "reference": (STR, "dataset"),
        "reference_count": (INT, 1024),
        "seed": (INT, 11),
        "bandwidth": (FLOAT, 1.0),
        "projections": (INT, 128),
        "label": (STR, "samples"),
    },
}


def _locate(text: str, section: str, key: str | None = None) -> int | None:
    """Line number of ``[section]`` (or of ``key`` inside it) in TOML source."""
    current = None
    header = re.compile(r"^\s*\[\s*([A-Za-z0-9_.-]+)\s*\]")
    for n, line in enumerate(text.splitlines(), start=1):
        m = header.match(line)
        if m:
            current = m.group(1)
            if key is None and current == section:
                return n
            continue
        if key is not None and current == section and re.match(rf"^\s*\"?{re.escape(key)}\"?\s*=", line):
            return n
    return None


def _where(source: str, line: int | None) -> str:
    return f"{source}:{line}" if line else source


def _coerce(kind: str, value, name: str):
    if kind == INT:
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError(f"{name} must be an integer")
        return value
    if kind == FLOAT:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError(f"{name} must be a number")
        return float(value)
    if kind == STR:
        if not isinstance(value, str):
            raise TypeError(f"{name} must be a string")
        return value
    if kind == BOOL:
        if not isinstance(value, bool):
            raise TypeError(f"{name} must be true or false")
        return value
    if kind == INTS:
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise TypeError(f"{name} must be a list of integers")
        return list(value)
    if kind == FLOATS:
        if not isinstance(value, list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
        ):
            raise TypeError(f"{name} must be a list of numbers")
        return [float(v) for v in value]
    if kind == PATH:
        if not isinstance(value, str):
            raise TypeError(f"{name} must be a path string")
        return value
    if kind == PATH_OR_LIST:
        if isinstance(value, str):
            return value
        if isinstance(value, list):
            return json.loads(json.dumps(value))
        raise TypeError(f"{name} must be a path or an inline list")
    raise AssertionError(kind)


@dataclass
class ExperimentConfig:
    sections: dict
    source: str = "<config>"
    checkpoint_explicit: bool = False

    def __getitem__(self, section: str) -> dict:
        return self.sections[section]

    def to_dict(self) -> dict:
        return copy.deepcopy(self.sections)

    def digest(self) -> str:
        blob = json.dumps(self.sections, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    def with_overrides(self, seed: int | None = None, out: str | None = None) -> "ExperimentConfig":
        sec = self.to_dict()
        if seed is not None:
            sec["train"]["seed"] = int(seed)
            sec["sampler"]["seed"] = int(seed)
        if out is not None:
            sec["output"]["dir"] = str(Path(out).resolve())
            if not self.checkpoint_explicit:
                sec["model"]["checkpoint"] = str(Path(out).resolve() / "model.ckpt")
        return ExperimentConfig(sec, self.source, self.checkpoint_explicit)

    @property
    def out_dir(self) -> Path:
        return Path(self.sections["output"]["dir"])


def parse_config(data: dict, text: str = "", source: str = "<config>", base: Path | None = None) -> ExperimentConfig:
    """Validate a decoded TOML table, fill defaults and resolve paths."""
    base = base or Path.cwd()
    sections: dict = {}
    for name in data:
        if name not in SCHEMA:
            raise ConfigError(f"{_where(source, _locate(text, name))}: unknown section [{name}]")
        if not isinstance(data[name], dict):
            raise ConfigError(f"{_where(source, _locate(text, name))}: [{name}] must be a table")
    for name, fields in SCHEMA.items():
        given = data.get(name, {})
        out = {}
        for key, value in given.items():
            line = _locate(text, name, key)
            if key not in fields:
                raise ConfigError(f"{_where(source, line)}: unknown key '{key}' in [{name}]")
            spec = fields[key]
            if value is None and spec[1] is None:
                # manifests carry unset optional keys as null
                out[key] = None
                continue
            try:
                value = _coerce(spec[0], value, f"{name}.{key}")
            except TypeError as exc:
                raise ConfigError(f"{_where(source, line)}: {exc}") from None
            if len(spec) > 2 and value not in spec[2]:
                choices = ", ".join(sorted(spec[2]))
                raise ConfigError(f"{_where(source, line)}: {name}.{key} = {value!r} is not one of {choices}")
            out[key] = value
        for key, spec in fields.items():
            out.setdefault(key, copy.deepcopy(spec[1]))
        sections[name] = out

    explicit_ckpt = bool(sections["model"]["checkpoint"])
    sections["output"]["dir"] = str((base / sections["output"]["dir"]).resolve())
    if explicit_ckpt:
        sections["model"]["checkpoint"] = str((base / sections["model"]["checkpoint"]).resolve())
    else:
        sections["model"]["checkpoint"] = str(Path(sections["output"]["dir"]) / "model.ckpt")
    # references to inputs must exist now; the checkpoint is checked by the command that reads it
    for name, fields in SCHEMA.items():
        for key, spec in fields.items():
            value = sections[name][key]
            if spec[0] in (PATH, PATH_OR_LIST) and isinstance(value, str):
                p = (base / value).resolve()
                if not p.is_file():
                    line = _locate(text, name, key)
                    raise ConfigError(f"{_where(source, line)}: {name}.{key} refers to missing file {value}")
                sections[name][key] = str(p)
    ref = sections["eval"]["reference"]
    if ref not in ("dataset", "posterior"):
        p = (base / ref).resolve()
        if not p.is_file():
            line = _locate(text, "eval", "reference")
            raise ConfigError(f"{_where(source, line)}: eval.reference refers to missing file {ref}")
        sections["eval"]["reference"] = str(p)
    _check_ranges(sections, text, source)
    return ExperimentConfig(sections, source, explicit_ckpt)


def _check_ranges(s: dict, text: str, source: str) -> None:
    def fail(section, key, msg):
        raise ConfigError(f"{_where(source, _locate(text, section, key))}: {section}.{key} {msg}")

    m, tr, sp = s["model"], s["train"], s["sampler"]
    if not 0 <= m["t_min"] < m["t_max"] <= 1:
        fail("model", "t_min", "and t_max must satisfy 0 <= t_min < t_max <= 1")
    if m["dim"] < 1:
        fail("model", "dim", "must be positive")
    if m["kind"] == "gaussian":
        for key in ("mean", "var"):
            if m[key] is not None and len(m[key]) != m["dim"]:
                fail("model", key, f"needs {m['dim']} entries")
        if m["var"] is not None and min(m["var"]) <= 0:
            fail("model", "var", "entries must be positive")
    if not 0 < tr["lr"] < 1:
        fail("train", "lr", "must lie in (0, 1)")
    if tr["batch_size"] < 1 or tr["steps"] < 0:
        fail("train", "steps", "and batch_size must be non-negative / positive")
    if tr["dataset"] == "external-idx" and tr["idx_path"] is None:
        fail("train", "idx_path", "is required for the external-idx dataset")
    if sp["steps"] < 1:
        fail("sampler", "steps", "must be at least 1")
    if sp["variant"] == "fmps-free" and sp["steps"] < 2:
        fail("sampler", "steps", "must be at least 2 for fmps-free")
    if sp["r"] < 0 or any(r < 0 for r in sp["r_values"]):
        fail("sampler", "r", "must be non-negative")
    if sp["chains"] < 1:
        fail("sampler", "chains", "must be positive")
    if s["eval"]["bandwidth"] <= 0:
        fail("eval", "bandwidth", "must be positive")
    if s["eval"]["reference_count"] < 2:
        fail("eval", "reference_count", "must be at least 2")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise MissingInputError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".json":
        try:
            manifest = json.loads(text)
            data = manifest["config"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ConfigError(f"{path}: not a run manifest ({exc})") from None
        # the manifest's checkpoint path is absolute and pins the model it was run with
        return parse_config(data, "", str(path), path.parent)
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(data, text, str(path), path.parent)
