"""Flat ``key = value`` experiment configuration.

Blank lines and ``#`` comments are ignored. Every key is optional; unknown
keys, malformed values and constraint violations raise :class:`ConfigError`
naming the key and the line. Empty values mean "unset" for optional keys.
"""
from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field

from .errors import ConfigError
from .mobility import sojourn_from_speed
from .model import KINDS, MLP

PARTITIONS = ("iid", "local_niid", "edge_niid")
MOBILITY = ("static", "ring", "speed", "matrix", "trace")
POLICIES = ("carry-forward", "fail")


@dataclass
class ExperimentConfig:
    # task and data
    task: str = "softmax-linear"
    hidden: tuple = (32,)
    C: int = 8
    d: int = 16
    per_class: int = 500
    test_per_class: int = 250
    separation: float = 3.0
    offset: float = 0.0
    partition: str = "edge_niid"
    l: int = 1
    # training
    M: int = 32
    N: int = 4
    tau_l: int = 6
    tau_e: int = 10
    K: int = 60
    eta: float = 0.1
    batch_size: int = 20
    full_batch: bool = False
    empty_edge_policy: str = "carry-forward"
    # mobility
    mobility: str = "static"
    p_s: float = 0.5
    speed_mps: float | None = None
    side_length_m: float = 1000.0
    interval_s: float = 1.0
    matrix_path: str | None = None
    trace_path: str | None = None
    # orchestration
    seeds: tuple = (0,)
    output_dir: str = "runs"
    workers: int = 1
    bounds: bool = True
    log_local: bool = False
    targets: tuple = ()
    # bookkeeping, not a key
    lines: dict = field(default_factory=dict, repr=False, compare=False)

    def keys(self):
        return [f.name for f in dataclasses.fields(self) if f.name != "lines"]

    def _fail(self, key, message):
        raise ConfigError(message, key=key, line=self.lines.get(key))

    def validate(self):
        if self.task not in KINDS:
            self._fail("task", f"task must be one of {KINDS}")
        if self.task == MLP and not 1 <= len(self.hidden) <= 2:
            self._fail("hidden", "mlp needs one or two hidden widths")
        if any(h < 1 for h in self.hidden):
            self._fail("hidden", "hidden widths must be positive")
        for key in ("C", "d"):
            if getattr(self, key) < 2:
                self._fail(key, f"{key} must be >= 2")
        for key in ("per_class", "test_per_class", "l", "M", "N", "tau_l", "tau_e", "K",
                    "batch_size", "workers"):
            if getattr(self, key) < 1:
                self._fail(key, f"{key} must be >= 1")
        if not (math.isfinite(self.separation) and self.separation > 0):
            self._fail("separation", "separation must be positive")
        if not math.isfinite(self.offset):
            self._fail("offset", "offset must be finite")
        if self.partition not in PARTITIONS:
            self._fail("partition", f"partition must be one of {PARTITIONS}")
        if self.N > self.M:
            self._fail("N", "need N <= M")
        if not (math.isfinite(self.eta) and self.eta > 0):
            self._fail("eta", "eta must be positive")
        if self.empty_edge_policy not in POLICIES:
            self._fail("empty_edge_policy", f"empty_edge_policy must be one of {POLICIES}")
        if self.mobility not in MOBILITY:
            self._fail("mobility", f"mobility must be one of {MOBILITY}")
        if not 0.0 <= self.p_s <= 1.0:
            self._fail("p_s", "p_s must lie in [0, 1]")
        if self.mobility == "ring" and self.N < 2:
            self._fail("N", "ring mobility needs N >= 2")
        if self.mobility == "speed":
            if self.speed_mps is None:
                self._fail("speed_mps", "speed mobility needs speed_mps")
            if self.speed_mps < 0:
                self._fail("speed_mps", "speed_mps must be >= 0")
            if not (self.side_length_m > 0 and self.interval_s > 0):
                self._fail("side_length_m", "side_length_m and interval_s must be positive")
        if self.mobility == "matrix" and not self.matrix_path:
            self._fail("matrix_path", "matrix mobility needs matrix_path")
        if self.mobility == "trace" and not self.trace_path:
            self._fail("trace_path", "trace mobility needs trace_path")
        if not self.seeds:
            self._fail("seeds", "seeds must list at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            self._fail("seeds", "seeds must be distinct")
        if any(not 0.0 <= t <= 1.0 for t in self.targets):
            self._fail("targets", "accuracy targets must lie in [0, 1]")
        return self

    def resolve(self, given=()):
        """Fill derived values: ``speed_mps`` implies speed mobility and fixes ``p_s``."""
        if self.speed_mps is not None:
            if "mobility" in given and self.mobility != "speed":
                self._fail("speed_mps", f"speed_mps conflicts with mobility = {self.mobility}")
            self.mobility = "speed"
        if self.mobility == "speed" and self.speed_mps is not None and self.speed_mps >= 0 \
                and self.side_length_m > 0 and self.interval_s > 0:
            p_s = sojourn_from_speed(self.speed_mps, self.side_length_m, self.interval_s)
            if "p_s" in given and abs(self.p_s - p_s) > 1e-12:
                self._fail("p_s", f"p_s = {self.p_s} disagrees with speed-derived {p_s}")
            self.p_s = p_s
        return self

    def to_text(self):
        """Resolved snapshot; parsing it back reproduces this config exactly."""
        lines = ["# resolved experiment configuration"]
        for key in self.keys():
            lines.append(f"{key} = {_format(getattr(self, key))}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes):
        values = {k: getattr(self, k) for k in self.keys()}
        values.update(changes)
        return ExperimentConfig(**values)


def _format(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return str(value)


def _bool(text):
    low = text.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _tuple_of(conv):
    def parse(text):
        return tuple(conv(p.strip()) for p in text.split(",") if p.strip())
    return parse


def _optional(conv):
    return lambda text: conv(text) if text else None


_INT_KEYS = ("C", "d", "per_class", "test_per_class", "l", "M", "N", "tau_l", "tau_e", "K",
             "batch_size", "workers")
_FLOAT_KEYS = ("separation", "offset", "eta", "p_s", "side_length_m", "interval_s")
_PARSERS = {
    **{k: int for k in _INT_KEYS},
    **{k: float for k in _FLOAT_KEYS},
    "task": str, "partition": str, "mobility": str, "empty_edge_policy": str, "output_dir": str,
    "full_batch": _bool, "bounds": _bool, "log_local": _bool,
    "hidden": _tuple_of(int), "seeds": _tuple_of(int), "targets": _tuple_of(float),
    "speed_mps": _optional(float), "matrix_path": _optional(str), "trace_path": _optional(str),
}


def parse_config_text(text, base_dir="."):
    values, lines = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _PARSERS:
            raise ConfigError("unknown key", key=key, line=lineno)
        if key in values:
            raise ConfigError(f"duplicate key (first set on line {lines[key]})", key=key, line=lineno)
        try:
            values[key] = _PARSERS[key](value)
        except ValueError as exc:
            raise ConfigError(f"bad value {value!r}: {exc}", key=key, line=lineno) from None
        lines[key] = lineno
    for key in ("matrix_path", "trace_path"):
        if values.get(key) and not os.path.isabs(values[key]):
            values[key] = os.path.normpath(os.path.join(base_dir, values[key]))
    cfg = ExperimentConfig(**values, lines=lines)
    return cfg.resolve(given=set(values)).validate()


def parse_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, base_dir=os.path.dirname(os.path.abspath(path)))
