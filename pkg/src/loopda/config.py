"""TOML run configuration with dotted-key overrides.

A config file has up to three tables::

    [experiment]          # any TwinExperimentConfig field
    filter = "enkf"
    observed = [0]

    [sweep]
    kind = "windows"      # windows | inflation | density
    windows_seconds = [30, 60, 90]
    seeds = 10

    [climatology]
    duration = 1000.0

Values resolve as command-line ``--set`` overrides, then the file, then the
defaults below.
"""
from __future__ import annotations

import copy
import dataclasses
import re
import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .experiments import TwinExperimentConfig
from .tables import WINDOWS_SECONDS

SWEEP_KINDS = ("windows", "inflation", "density")

SWEEP_DEFAULTS = {
    "kind": "windows",
    "seeds": 10,
    "filters": ["ekf", "enkf"],
    "windows": None,  # model units; takes precedence over windows_seconds
    "windows_seconds": list(WINDOWS_SECONDS),
    "inflation": "base",  # base | tuned
    "deltas": [0.0, 0.1, 0.2, 0.5, 1.0],
    "mus": [0.0, 0.1, 0.2, 0.5, 1.0],
    "counts": [0, 1, 2, 3],
}

CLIMATOLOGY_DEFAULTS = {"duration": 1000.0, "spin_up": 10.0}

FULL_SCALE = {"experiment.n_windows": 3000, "sweep.seeds": 100}

_EXPERIMENT_FIELDS = {f.name for f in dataclasses.fields(TwinExperimentConfig)}


def defaults():
    return {
        "experiment": TwinExperimentConfig().to_dict(),
        "sweep": copy.deepcopy(SWEEP_DEFAULTS),
        "climatology": dict(CLIMATOLOGY_DEFAULTS),
    }


def _key_line(text, key):
    """1-based line where ``key`` is assigned, if it can be found."""
    leaf = re.escape(key.rsplit(".", 1)[-1])
    for i, line in enumerate(text.splitlines(), 1):
        if re.match(rf"\s*([\w.\"]*\.)?\"?{leaf}\"?\s*=", line):
            return i
    return None


def _where(path, text, key):
    line = _key_line(text, key) if text else None
    return f"{path}:{line}" if line else str(path)


def parse_text(text, path="<config>"):
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"{path}: {err}") from None
    _check_keys(data, path, text)
    return data


def _check_keys(data, path, text=None):
    known = {"experiment": _EXPERIMENT_FIELDS, "sweep": set(SWEEP_DEFAULTS),
             "climatology": set(CLIMATOLOGY_DEFAULTS)}
    for section, body in data.items():
        if section not in known:
            raise ConfigError(f"{_where(path, text, section)}: unknown section {section!r}")
        if not isinstance(body, dict):
            raise ConfigError(f"{_where(path, text, section)}: {section!r} must be a table")
        for key in body:
            if key not in known[section]:
                raise ConfigError(f"{_where(path, text, key)}: unknown key {section}.{key}")


def load(path):
    """Parsed config file; a ``.json`` run manifest is accepted too."""
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    text = p.read_text()
    if p.suffix == ".json":
        import json

        try:
            data = json.loads(text)["config"]
        except (ValueError, KeyError) as err:
            raise ConfigError(f"{p}: not a run manifest ({err})") from None
        _check_keys(data, p)
        return data
    return parse_text(text, p)


def parse_override(item):
    """``section.key=value`` with ``value`` read as a TOML literal, else a string."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form section.key=value")
    key, raw = (s.strip() for s in item.split("=", 1))
    if key.count(".") != 1:
        raise ConfigError(f"override key {key!r} must look like section.key")
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key, value


def resolve(file_data=None, overrides=(), full_scale=False):
    """Merge defaults, file data and overrides (later wins)."""
    cfg = defaults()
    for section, body in (file_data or {}).items():
        cfg[section].update(copy.deepcopy(body))
    pairs = list(FULL_SCALE.items()) if full_scale else []
    pairs += [parse_override(o) if isinstance(o, str) else o for o in overrides]
    for key, value in pairs:
        section, name = key.split(".")
        _check_keys({section: {name: value}}, "--set")
        cfg[section][name] = value
    experiment_config(cfg)  # validate early
    if cfg["sweep"]["kind"] not in SWEEP_KINDS:
        raise ConfigError(f"sweep.kind must be one of {', '.join(SWEEP_KINDS)}")
    if cfg["sweep"]["inflation"] not in ("base", "tuned"):
        raise ConfigError("sweep.inflation must be 'base' or 'tuned'")
    return cfg


def experiment_config(cfg) -> TwinExperimentConfig:
    try:
        return TwinExperimentConfig.from_dict(cfg["experiment"])
    except (TypeError, ValueError) as err:
        raise ConfigError(f"experiment: {err}") from None


def sweep_seeds(cfg):
    seeds = cfg["sweep"]["seeds"]
    base = cfg["experiment"]["seed"]
    if isinstance(seeds, int):
        if seeds < 1:
            raise ConfigError("sweep.seeds must be positive")
        return list(range(base, base + seeds))
    return [int(s) for s in seeds]


def sweep_windows(cfg):
    sw = cfg["sweep"]
    if sw["windows"] is not None:
        return [float(w) for w in sw["windows"]]
    scale = cfg["experiment"]["time_scale_seconds"]
    return [s / scale for s in sw["windows_seconds"]]
