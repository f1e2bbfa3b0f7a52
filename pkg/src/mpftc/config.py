"""TOML scenario files.

Layout::

    schema_version = 1
    [defaults]          # merged into every scenario
    ...
    [[scenarios]]
    name = "..."
    ...

A top-level ``[mpfc_stub]`` table may hold tuning of an external method for
reference only; it is kept but never run.
"""
from __future__ import annotations

import copy
import sys
from dataclasses import fields
from pathlib import Path
from typing import Iterable

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .core import ConfigurationError
from .sim import Scenario

SCHEMA_VERSION = 1
TOP_KEYS = {"schema_version", "defaults", "scenarios", "mpfc_stub", "description"}
SCENARIO_KEYS = {f.name for f in fields(Scenario)}
NESTED_KEYS = {
    "cost": {"q", "r", "w"},
    "terminal": {"kind", "q_lqr", "r_lqr", "artifact", "set"},
    "solver": {"max_iter", "feas_tol", "opt_tol", "print_level", "mu_init", "warm_start", "hessian", "jit"},
    "slices": {"tau", "resolution", "dp_range", "pd_range"},
    "obstacles": {"kind", "position_index", "window", "bound", "w0", "speed", "heading", "xi_bound",
                  "growth", "body_radius"},
}


def _merge(base: dict, upd: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in upd.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _check_keys(d: dict, where: str):
    unknown = sorted(set(d) - SCENARIO_KEYS)
    if unknown:
        raise ConfigurationError(f"{where}: unknown key(s) {', '.join(unknown)}")
    for key, allowed in NESTED_KEYS.items():
        if key not in d:
            continue
        items = d[key] if isinstance(d[key], list) else [d[key]]
        for i, item in enumerate(items):
            if not isinstance(item, dict):
                raise ConfigurationError(f"{where}: {key} must be a table")
            bad = sorted(set(item) - allowed)
            if bad:
                tag = f"{key}[{i}]" if isinstance(d[key], list) else key
                raise ConfigurationError(f"{where}: unknown key(s) {', '.join(f'{tag}.{b}' for b in bad)}")


def parse_value(text: str):
    """TOML literal if it parses, else the raw string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_override(d: dict, spec: str) -> dict:
    """``a.b.c=value`` on a scenario dict (creates intermediate tables)."""
    if "=" not in spec:
        raise ConfigurationError(f"override {spec!r} must look like key=value")
    key, val = spec.split("=", 1)
    path = key.strip().split(".")
    if path[0] not in SCENARIO_KEYS:
        raise ConfigurationError(f"override: unknown key {path[0]}")
    out = copy.deepcopy(d)
    node = out
    for p in path[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigurationError(f"override: {key} does not name a table entry")
    node[path[-1]] = parse_value(val.strip())
    return out


def scenario_from_dict(d: dict, where: str = "scenario") -> Scenario:
    _check_keys(d, where)
    try:
        return Scenario(**d)
    except TypeError as exc:
        raise ConfigurationError(f"{where}: {exc}") from None


def load_config(path, only: Iterable[str] | None = None, overrides: Iterable[str] = ()) -> list[Scenario]:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file {path} not found")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    bad = sorted(set(raw) - TOP_KEYS)
    if bad:
        raise ConfigurationError(f"{path}: unknown top-level key(s) {', '.join(bad)}")
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise ConfigurationError(f"{path}: schema_version must be {SCHEMA_VERSION}")
    defaults = raw.get("defaults", {})
    entries = raw.get("scenarios", [])
    if not entries:
        raise ConfigurationError(f"{path}: no [[scenarios]] entries")
    names = [e.get("name") for e in entries]
    if len(set(names)) != len(names):
        raise ConfigurationError(f"{path}: duplicate scenario names")
    only = list(only or [])
    missing = [n for n in only if n not in names]
    if missing:
        raise ConfigurationError(f"{path}: no scenario named {', '.join(missing)}")
    out = []
    for e in entries:
        if only and e.get("name") not in only:
            continue
        d = _merge(defaults, e)
        for ov in overrides:
            d = apply_override(d, ov)
        out.append(scenario_from_dict(d, f"{path.name}:{e.get('name')}"))
    return out


def _strip_none(o):
    if isinstance(o, dict):
        return {k: _strip_none(v) for k, v in o.items() if v is not None}
    if isinstance(o, (list, tuple)):
        return [_strip_none(v) for v in o]
    return o


def dump_scenario(sc: Scenario) -> str:
    """Effective config of one scenario; :func:`load_config` reads it back."""
    doc = {"schema_version": SCHEMA_VERSION, "scenarios": [_strip_none(sc.to_dict())]}
    return tomli_w.dumps(doc)


def write_effective_config(sc: Scenario, path) -> Path:
    path = Path(path)
    path.write_text(dump_scenario(sc))
    return path


def read_stub(path) -> dict:
    raw = tomllib.loads(Path(path).read_text())
    return raw.get("mpfc_stub", {})
