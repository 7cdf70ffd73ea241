"""Flat-file tracker configuration.

One TOML file (no tables) carries every energy weight, every solver knob,
the dataset paths, and the acquisition/tracking flags. Any key can be
overridden on the command line with ``--set key=value``; the fully
resolved mapping is embedded in every output report for provenance.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .energy import EnergyWeights
from .fileio import dump_toml, load_toml
from .lm import SolverParams

try:
    import tomllib as _toml
except ModuleNotFoundError:                       # Python < 3.11
    import tomli as _toml


class ConfigError(ValueError):
    """Bad key, bad value, or a missing referenced path."""


_WEIGHT_FIELDS = {f.name for f in dataclasses.fields(EnergyWeights)}
_SOLVER_FIELDS = {f.name for f in dataclasses.fields(SolverParams)}


@dataclass
class TrackerConfig:
    weights: EnergyWeights
    solver: SolverParams
    template: str | None = None
    frames_dir: str | None = None
    depth_dir: str | None = None
    output_dir: str | None = None
    scalar_specular: bool = False
    level_weight_mode: str = "none"
    albedo_sh_rounds: int = 2
    init_albedo: str = "white"

    _OWN_FIELDS = ("template", "frames_dir", "depth_dir", "output_dir",
                   "scalar_specular", "level_weight_mode",
                   "albedo_sh_rounds", "init_albedo")

    def __post_init__(self):
        if self.level_weight_mode not in ("none", "visible_fraction"):
            raise ConfigError(
                f"level_weight_mode must be 'none' or 'visible_fraction', "
                f"got '{self.level_weight_mode}'")
        if self.albedo_sh_rounds < 1:
            raise ConfigError("albedo_sh_rounds must be >= 1")
        if not (self.init_albedo == "white"
                or self.init_albedo.startswith("kmeans:")):
            raise ConfigError(
                f"init_albedo must be 'white' or 'kmeans:K', "
                f"got '{self.init_albedo}'")

    @property
    def sigma_s(self) -> float:
        return self.weights.sigma_s

    def check_paths(self, need=("template", "frames_dir")):
        for name in need:
            value = getattr(self, name)
            if value is None:
                raise ConfigError(f"config key '{name}' is required here")
            if not Path(value).exists():
                raise ConfigError(f"{name} path does not exist: {value}")
        if self.depth_dir is not None and not Path(self.depth_dir).exists():
            raise ConfigError(f"depth_dir path does not exist: "
                              f"{self.depth_dir}")

    def to_dict(self) -> dict:
        out = {}
        for name in sorted(_WEIGHT_FIELDS):
            value = getattr(self.weights, name)
            if value is not None:
                out[name] = value
        for name in sorted(_SOLVER_FIELDS):
            out[name] = getattr(self.solver, name)
        for name in self._OWN_FIELDS:
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        return out

    def save(self, path):
        dump_toml(path, self.to_dict())


def _build(doc: dict) -> TrackerConfig:
    weight_kw, solver_kw, own_kw = {}, {}, {}
    for key, value in doc.items():
        if key in _WEIGHT_FIELDS:
            weight_kw[key] = value
        elif key in _SOLVER_FIELDS:
            solver_kw[key] = value
        elif key in TrackerConfig._OWN_FIELDS:
            own_kw[key] = value
        else:
            raise ConfigError(f"unknown config key '{key}'")
    try:
        return TrackerConfig(weights=EnergyWeights(**weight_kw),
                             solver=SolverParams(**solver_kw), **own_kw)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err


def parse_override(item: str):
    """'key=value' with the value parsed as a TOML literal; bare words
    that are not TOML (paths, mode names) pass through as strings."""
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got '{item}'")
    key, raw = item.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"--set expects key=value, got '{item}'")
    try:
        value = _toml.loads(f"v = {raw}")["v"]
    except _toml.TOMLDecodeError:
        value = raw.strip()
    return key, value


def load_config(path=None, overrides=()) -> TrackerConfig:
    """Config file (optional) + overrides -> validated TrackerConfig."""
    doc = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = dict(load_toml(p))
        except _toml.TOMLDecodeError as err:
            raise ConfigError(f"{path}: {err}") from err
    for item in overrides:
        key, value = parse_override(item)
        doc[key] = value
    return _build(doc)
