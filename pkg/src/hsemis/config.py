"""Flat ``key=value`` run configuration with typed, range-checked keys."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .errors import ConfigError


@dataclass(frozen=True)
class Key:
    default: Any
    parse: Callable[[str], Any]
    check: Callable[[Any], bool] = lambda v: True
    rule: str = ""


def _int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _opt_int(text: str):
    return None if text.strip().lower() in ("", "none", "auto") else int(text)


def _choice(*options):
    return Key(options[0], str, lambda v: v in options, f"one of {', '.join(options)}")


_pos = (lambda v: v > 0, "> 0")
_unit_open = (lambda v: 0.0 < v < 1.0, "in (0, 1)")
_unit_closed = (lambda v: 0.0 <= v <= 1.0, "in [0, 1]")
_nonneg = (lambda v: v >= 0, ">= 0")


def _k(default, parse, rule=(lambda v: True, "")):
    return Key(default, parse, rule[0], rule[1])


SCHEMA: dict[str, Key] = {
    "seed": _k(42, int, _nonneg),
    # synthetic data
    "data.image_size": _k(32, int, (lambda v: v >= 16 and v % 8 == 0, "a multiple of 8, >= 16")),
    "data.counts": _k((493, 226, 329, 164, 38), _int_tuple, (lambda v: len(v) >= 2 and min(v) >= 0, "two or more counts >= 0")),
    "data.noise_sigma": _k(0.08, float, _nonneg),
    "split.label_fraction": _k(0.20, float, (lambda v: v in (0.01, 0.05, 0.10, 0.20), "one of 0.01, 0.05, 0.10, 0.20")),
    "split.test_fraction": _k(0.20, float, _unit_open),
    "split.val_fraction": _k(0.20, float, (lambda v: 0.0 <= v < 1.0, "in [0, 1)")),
    # reconstruction
    "mirec.mask_ratio": _k(0.75, float, _unit_open),
    "mirec.alpha": _k(1.0, float, _nonneg),
    "mirec.steps": _k(2000, int, _pos),
    "mirec.batch": _k(8, int, _pos),
    "mirec.patch_size": _k(8, int, _pos),
    "mirec.lr": _k(3e-4, float, _pos),
    "mirec.weight_decay": _k(3e-4, float, _nonneg),
    # proxy labeling
    "sirl.tau": _k(0.80, float, _pos),
    "sirl.alpha": _k(0.5, float, _unit_closed),
    "sirl.k": _k(50, int, _pos),
    "sirl.extractor": _choice("baseline", "encoder", "pixels"),
    # nodes
    "him.mode": _choice("koa-fixed", "count-balanced"),
    "node.mu": _k(0.99, float, _unit_open),
    "node.lambda_schedule": _choice("ramp", "constant", "off"),
    "node.lambda_max": _k(1.0, float, _nonneg),
    "node.ramp_fraction": _k(0.2, float, _unit_closed),
    "node.omega": _k(1.0, float, _pos),
    "node.steps": _k(300, int, _pos),
    "node.labeled_per_step": _k(4, int, _pos),
    "node.unlabeled_per_step": _k(4, int, _nonneg),
    "node.lr": _k(3e-4, float, _pos),
    "node.weight_decay": _k(3e-4, float, _nonneg),
    "node.eval_every": _k(20, int, _pos),
    "node.patience": _k(10, int, _pos),
    "node.eval_role": _choice("teacher", "student"),
    "qcn.qubits": _k(8, int, (lambda v: 2 <= v <= 12, "in [2, 12]")),
    "qcn.layers": _k(3, int, _pos),
    "qcn.wire": _k(None, _opt_int, (lambda v: v is None or v >= 0, "a qubit index or 'auto'")),
    "qcn.lr": _k(1e-3, float, _pos),
    "qcn.batch": _k(64, int, _pos),
    # flat baseline
    "baseline.steps": _k(300, int, _pos),
    "baseline.batch": _k(8, int, _pos),
}


class RunConfig(dict):
    """Mapping of every key in :data:`SCHEMA` to a validated value."""

    def __init__(self, overrides: dict[str, Any] | None = None):
        super().__init__({k: spec.default for k, spec in SCHEMA.items()})
        for key, value in (overrides or {}).items():
            self.set(key, value)
        self.validate()

    def set(self, key: str, value) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, str):
            try:
                value = SCHEMA[key].parse(value.strip())
            except ValueError as exc:
                raise ConfigError(f"{key}: cannot parse {value!r}") from exc
        self[key] = value

    def validate(self) -> None:
        for key, spec in SCHEMA.items():
            if not spec.check(self[key]):
                raise ConfigError(f"{key}={self[key]!r} must be {spec.rule}")
        if self["data.image_size"] % self["mirec.patch_size"]:
            raise ConfigError("data.image_size must be a multiple of mirec.patch_size")
        wire = self["qcn.wire"]
        if wire is not None and wire >= self["qcn.qubits"]:
            raise ConfigError(f"qcn.wire={wire} is not a qubit of a {self['qcn.qubits']}-qubit register")
        if 2 ** self["qcn.layers"] > self["qcn.qubits"]:
            raise ConfigError("qcn.layers pooling steps need at least 2**layers qubits")

    def to_text(self) -> str:
        lines = []
        for key in SCHEMA:
            value = self[key]
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key}={'auto' if value is None else value}")
        return "\n".join(lines) + "\n"


def parse_config_text(text: str) -> RunConfig:
    overrides = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in overrides:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        overrides[key] = value
    return RunConfig(overrides)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)
