"""TOML scene configuration shared by the command-line tools."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .energy import EnergyConfig
from .mesh import shape_from_dict
from .optim.fit import FitConfig


class ConfigError(ValueError):
    """Invalid or unreadable configuration (CLI exit code 1)."""


@dataclass
class ViewSpec:
    camera: Path
    normal: Path | None = None  # target normal PNG
    depth: Path | None = None  # optional 16-bit target depth PNG


@dataclass
class SceneConfig:
    template: dict
    cell_size: float
    inflation: float
    views: list = field(default_factory=list)
    skeleton: Path | None = None
    pose: Path | None = None
    mesh: Path | None = None  # precomputed tet mesh, overrides the grid parameters
    init: Path | None = None  # initial field, defaults to the template's exact SDF
    energy: EnergyConfig = field(default_factory=EnergyConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    output: Path = Path("out")

    def shape(self):
        return shape_from_dict(self.template)

    def validate(self, need_targets: bool = False) -> None:
        """Check parameters and that every referenced file exists."""
        try:
            self.shape()
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"bad template: {e}") from e
        if not (math.isfinite(self.cell_size) and self.cell_size > 0):
            raise ConfigError("grid.cell_size must be positive")
        if not (math.isfinite(self.inflation) and self.inflation >= 0):
            raise ConfigError("grid.inflation must be >= 0")
        paths = [self.skeleton, self.pose, self.mesh, self.init]
        for v in self.views:
            paths += [v.camera, v.normal, v.depth]
            if need_targets and v.normal is None:
                raise ConfigError(f"view {v.camera} has no target normal map")
        for p in paths:
            if p is not None and not p.exists():
                raise ConfigError(f"missing file: {p}")
        if need_targets and not self.views:
            raise ConfigError("fit needs at least one view")
        try:
            self.energy.validate()
            self.fit.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e


def _path(base: Path, value) -> Path | None:
    return None if value is None else base / value


def parse_scene(text: str, base=".") -> SceneConfig:
    """Parse TOML text; relative paths resolve against ``base``."""
    base = Path(base)
    try:
        d = tomli.loads(text)
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"TOML parse error: {e}") from e
    known = {"template", "grid", "views", "skeleton", "pose", "mesh", "init", "energy", "fit", "output"}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    if "template" not in d:
        raise ConfigError("missing [template] section")
    grid = d.get("grid", {})
    try:
        energy = EnergyConfig.from_dict(d.get("energy", {}))
        fit_d = dict(d.get("fit", {}))
        fit = FitConfig.from_dict(fit_d)
        fit.energy = energy
        views = [ViewSpec(base / v["camera"], _path(base, v.get("normal")), _path(base, v.get("depth")))
                 for v in d.get("views", [])]
        return SceneConfig(
            template=dict(d["template"]),
            cell_size=float(grid.get("cell_size", 0.1)),
            inflation=float(grid.get("inflation", 0.2)),
            views=views,
            skeleton=_path(base, d.get("skeleton")),
            pose=_path(base, d.get("pose")),
            mesh=_path(base, d.get("mesh")),
            init=_path(base, d.get("init")),
            energy=energy,
            fit=fit,
            output=base / d.get("output", "out"),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad config: {e}") from e


def load_scene(path, base=None) -> SceneConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}") from e
    return parse_scene(text, path.parent if base is None else base)
