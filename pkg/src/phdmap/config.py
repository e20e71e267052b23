"""Run configuration: flat dotted keys, layered file < environment < command line."""

from __future__ import annotations

import copy
import os
from dataclasses import fields

import yaml

from .filter import FilterParams
from .simulator import NoiseSpec

ENV_PREFIX = "PHDMAP_"

_FILTER = {f"filter.{f.name}": f.default for f in fields(FilterParams)}
_NOISE = {f"noise.{f.name}": (f.default if f.name != "id_switches" else [])
          for f in fields(NoiseSpec)}

DEFAULTS: dict[str, object] = {
    **_FILTER,
    "grid.m": 7,
    "grid.l_voxel": 0.2,
    "grid.origin": [0.0, 0.0, 0.0],
    "camera.width": 160,
    "camera.height": 120,
    **_NOISE,
    "memory.enabled": True,
    "memory.completeness_threshold": 0.9,
    "memory.n_rays": 1000,
    "memory.trigger_points": 5000,
    "memory.match_iterations": 200,
    "memory.score_threshold": 0.6,
    "memory.early_exit": 0.9,
    "memory.prune_ratio": 0.95,
    "memory.library": None,
    "run.seed": 0,
    "run.frames": None,
    "run.input": "simulate",
    "run.scene": "demo",
    "run.scene_file": None,
    "run.replay_dir": None,
    "run.out": "phdmap_out",
    "run.evaluate": True,
    "run.export_maps": True,
}

# keys whose value may legitimately be None or a list
_NULLABLE = {"run.frames", "run.scene_file", "run.replay_dir", "memory.library"}
_CHOICES = {"run.input": ("simulate", "replay"), "filter.update_mode": ("if", "cf")}


class ConfigError(ValueError):
    """Unknown key, wrong type or invalid value in a run configuration."""


def _coerce(key: str, value):
    default = DEFAULTS[key]
    if value is None:
        if key in _NULLABLE:
            return None
        raise ConfigError(f"{key} may not be null")
    if isinstance(default, bool):
        if isinstance(value, str):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        if isinstance(value, (bool, int)):
            return bool(value)
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(default, int):
        if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected an integer, got {value!r}") from None
    if isinstance(default, float):
        if isinstance(value, bool):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected a number, got {value!r}") from None
    if isinstance(default, list):
        if isinstance(value, str):
            value = yaml.safe_load(value)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return [list(v) if isinstance(v, (list, tuple)) else v for v in value]
    if key == "run.frames":
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected an integer, got {value!r}") from None
    value = str(value)
    if key in _CHOICES and value.lower() not in _CHOICES[key]:
        raise ConfigError(f"{key}: expected one of {_CHOICES[key]}, got {value!r}")
    return value.lower() if key in _CHOICES else value


def flatten(tree: dict, prefix: str = "") -> dict:
    """Nested mappings to dotted keys; dotted keys already flat pass through."""
    out = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


class RunConfig:
    """Validated mapping of dotted keys to values.

    Build one with :meth:`load`, which applies defaults, then a YAML file,
    then ``PHDMAP_SECTION__KEY`` environment variables, then explicit
    overrides (command-line flags).
    """

    def __init__(self, values: dict | None = None):
        self.values = copy.deepcopy(DEFAULTS)
        self.sources = {k: "default" for k in DEFAULTS}
        if values:
            self.update(values, "override")

    def update(self, values: dict, source: str) -> None:
        for key, v in flatten(values).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown configuration key {key!r} (from {source})")
            self.values[key] = _coerce(key, v)
            self.sources[key] = source

    @classmethod
    def load(cls, path=None, env=None, overrides: dict | None = None) -> "RunConfig":
        cfg = cls()
        if path is not None:
            with open(path) as fh:
                data = yaml.safe_load(fh) or {}
            if not isinstance(data, dict):
                raise ConfigError(f"{path}: expected a mapping at top level")
            cfg.update(data, str(path))
        cfg.update(env_overrides(os.environ if env is None else env), "environment")
        if overrides:
            cfg.update({k: v for k, v in overrides.items() if v is not None}, "command line")
        cfg.validate()
        return cfg

    def __getitem__(self, key: str):
        return self.values[key]

    def section(self, name: str) -> dict:
        p = name + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    def filter_params(self) -> FilterParams:
        try:
            return FilterParams(**self.section("filter"))
        except ValueError as e:
            raise ConfigError(f"filter: {e}") from None

    def noise(self) -> NoiseSpec:
        try:
            return NoiseSpec(**self.section("noise"))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"noise: {e}") from None

    def validate(self) -> None:
        self.filter_params()
        self.noise()
        if not 1 <= self["grid.m"] <= 10:
            raise ConfigError("grid.m must be in [1, 10]")
        if self["grid.l_voxel"] <= 0:
            raise ConfigError("grid.l_voxel must be > 0")
        if len(self["grid.origin"]) != 3:
            raise ConfigError("grid.origin needs three values")
        if self["camera.width"] < 1 or self["camera.height"] < 1:
            raise ConfigError("camera size must be positive")
        if self["run.frames"] is not None and self["run.frames"] < 0:
            raise ConfigError("run.frames must be >= 0")
        if self["run.input"] == "replay" and not self["run.replay_dir"]:
            raise ConfigError("run.input is 'replay' but run.replay_dir is not set")

    def to_yaml(self) -> str:
        """Effective configuration, loadable again with :meth:`load`."""
        return yaml.safe_dump(dict(sorted(self.values.items())), sort_keys=False, default_flow_style=None)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_yaml())


def env_overrides(env) -> dict:
    """``PHDMAP_FILTER__P_D=0.9`` becomes ``{"filter.p_d": 0.9}``.

    Values are parsed as YAML scalars so numbers and booleans keep their type.
    """
    out = {}
    for name, raw in env.items():
        if not name.startswith(ENV_PREFIX) or "__" not in name:
            continue
        section, _, key = name[len(ENV_PREFIX):].partition("__")
        out[f"{section.lower()}.{key.lower()}"] = yaml.safe_load(raw) if raw != "" else None
    return out
