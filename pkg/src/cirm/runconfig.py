"""Strict JSON run configurations for the command line.

A config holds an experiment name, the plan fields at the top level, an output
directory and a ``methods`` list. Each method entry is ``{"id": ..., <overrides>}``
where overrides are MethodConfig fields (``lambda`` is accepted for ``lam``).

Defaults: beta = 1, rho0 = rho1 = 10, delta_rho = 100, 100 epochs, batch 256,
lambda = 91257; per-method learning rates, dropout and weight decay come from
``cirm.methods.config.DEFAULTS``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field

from cirm.harness import ExperimentPlan
from cirm.methods.config import DEFAULTS, METHOD_IDS, MethodConfig, default_config, field_error


class ConfigError(ValueError):
    def __init__(self, path: str, msg: str, line: int | None = None):
        self.path, self.line = path, line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{path}: {msg}" if path else f"{where}{msg}")


ALIASES = {"lambda": "lam"}
REVERSE_ALIASES = {v: k for k, v in ALIASES.items()}
PLAN_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentPlan)}
METHOD_FIELDS = {f.name: f for f in dataclasses.fields(MethodConfig) if f.name not in ("method", "seed")}
TOP_FIELDS = ("experiment", "output_dir")


@dataclass
class MethodSpec:
    id: str
    overrides: dict = field(default_factory=dict)

    def config(self, seed: int = 0) -> MethodConfig:
        return default_config(self.id, seed=seed, **self.overrides)


@dataclass
class RunConfig:
    experiment: str = "experiment"
    plan: ExperimentPlan = field(default_factory=ExperimentPlan)
    methods: list[MethodSpec] = field(default_factory=list)
    output_dir: str = "results"

    def __post_init__(self):
        if not self.methods:
            self.methods = [MethodSpec(m) for m in self.plan.methods]

    def to_dict(self) -> dict:
        plan = dataclasses.asdict(self.plan)
        plan.pop("methods")
        methods = []
        for m in self.methods:
            resolved = m.config().to_dict()
            resolved.pop("seed")
            resolved.pop("method")
            entry = {"id": m.id}
            entry.update({REVERSE_ALIASES.get(k, k): v for k, v in resolved.items()})
            methods.append(entry)
        return {"experiment": self.experiment, **plan, "methods": methods, "output_dir": self.output_dir}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def content_hash(self, extra: bytes = b"") -> str:
        """Git-style blob hash of the canonical config (plus any input bytes)."""
        body = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode() + extra
        return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


# -- type checking --------------------------------------------------------------

def _accepts(tp, value) -> bool:
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        return any(_accepts(a, value) for a in typing.get_args(tp))
    if tp is type(None):
        return value is None
    if tp is bool:
        return isinstance(value, bool)
    if tp is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if tp is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if tp is str:
        return isinstance(value, str)
    if origin in (list, tuple):
        args = [a for a in typing.get_args(tp) if a is not Ellipsis]
        return isinstance(value, list) and all(_accepts(args[0], v) for v in value) if args else isinstance(value, list)
    return False


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


_PLAN_HINTS = _hints(ExperimentPlan)
_METHOD_HINTS = _hints(MethodConfig)


def _type_name(tp) -> str:
    return getattr(tp, "__name__", None) or str(tp).replace("typing.", "")


def _line_of(text: str, key: str) -> int | None:
    needle = f'"{key}"'
    for i, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return i
    return None


def _coerce(tp, value):
    if isinstance(value, int) and not isinstance(value, bool) and tp in (float, float | None):
        return float(value)
    return value


# -- parsing --------------------------------------------------------------------

def parse_config(text: str) -> RunConfig:
    """Parse and validate a JSON run config; raises ConfigError with a field path."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"invalid JSON: {exc.msg} (column {exc.colno})", exc.lineno) from None
    if isinstance(raw, dict) and "config" in raw and "content_hash" in raw:
        # a run manifest: re-run its resolved config
        return from_dict(raw["config"])
    return from_dict(raw, text)


def from_dict(raw, text: str = "") -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("", "top level must be a JSON object")
    plan_kw = {}
    experiment, output_dir, methods_raw = "experiment", "results", None
    for key, value in raw.items():
        line = _line_of(text, key)
        if key == "experiment":
            if not isinstance(value, str) or not value:
                raise ConfigError(key, "must be a non-empty string", line)
            experiment = value
        elif key == "output_dir":
            if not isinstance(value, str):
                raise ConfigError(key, "must be a string", line)
            output_dir = value
        elif key == "methods":
            methods_raw = value
        elif key in PLAN_FIELDS:
            tp = _PLAN_HINTS[key]
            if not _accepts(tp, value):
                raise ConfigError(key, f"expected {_type_name(tp)}, got {type(value).__name__}", line)
            plan_kw[key] = value
        else:
            raise ConfigError(key, "unknown key", line)
    methods = []
    if methods_raw is not None:
        if not isinstance(methods_raw, list) or not methods_raw:
            raise ConfigError("methods", "must be a non-empty list", _line_of(text, "methods"))
        for i, entry in enumerate(methods_raw):
            methods.append(_parse_method(entry, f"methods[{i}]", text))
        plan_kw["methods"] = [m.id for m in methods]
    for key in ("n_envs", "repetitions", "samples_per_env", "test_samples", "sem_dim"):
        if key in plan_kw and plan_kw[key] < 1:
            raise ConfigError(key, "must be >= 1", _line_of(text, key))
    for key in ("label_flip", "test_p_c"):
        if key in plan_kw and not 0.0 <= plan_kw[key] <= 1.0:
            raise ConfigError(key, "must lie in [0, 1]", _line_of(text, key))
    if plan_kw.get("p_c") is not None and any(not 0.0 <= p <= 1.0 for p in plan_kw["p_c"]):
        raise ConfigError("p_c", "values must lie in [0, 1]", _line_of(text, "p_c"))
    try:
        plan = ExperimentPlan(**plan_kw)
    except ValueError as exc:
        raise ConfigError("plan", str(exc)) from None
    return RunConfig(experiment, plan, methods, output_dir)


def _parse_method(entry, path: str, text: str) -> MethodSpec:
    if not isinstance(entry, dict):
        raise ConfigError(path, "must be an object")
    if "id" not in entry:
        raise ConfigError(f"{path}.id", "missing method id")
    mid = entry["id"]
    if mid not in METHOD_IDS:
        raise ConfigError(f"{path}.id", f"unknown method {mid!r}; expected one of {', '.join(METHOD_IDS)}",
                          _line_of(text, "id"))
    overrides = {}
    for key, value in entry.items():
        if key == "id":
            continue
        name = ALIASES.get(key, key)
        sub = f"{path}.{key}"
        line = _line_of(text, key)
        if name not in METHOD_FIELDS:
            raise ConfigError(sub, "unknown key", line)
        tp = _METHOD_HINTS[name]
        if not _accepts(tp, value):
            raise ConfigError(sub, f"expected {_type_name(tp)}, got {type(value).__name__}", line)
        msg = field_error(name, value)
        if msg:
            raise ConfigError(sub, f"out of range: {msg}", line)
        overrides[name] = _coerce(tp, value)
    # drop overrides equal to the method defaults so round trips are canonical
    base = default_config(mid).to_dict()
    kept = {}
    for k, v in overrides.items():
        cmp = list(v) if isinstance(v, tuple) else v
        if base[k] != cmp:
            kept[k] = tuple(v) if k == "hidden" else v
    return MethodSpec(mid, kept)


def method_defaults_table() -> dict[str, dict]:
    """Per-method resolved defaults, for documentation and ``cirm validate``."""
    return {m: default_config(m).to_dict() for m in DEFAULTS}
