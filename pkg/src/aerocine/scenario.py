"""Scenario files: world primitives, actor script, shot, sensor and planner settings."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError, ScenarioError
from .itsdt import SdfConfig
from .planner import PlannerConfig, ShotSpec
from .sim import Box, CirclePath, Cylinder, LidarModel, PolylinePath, ScriptedActor, WorldModel
from .voxel_world import GridConfig

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

BUNDLED = ("corridor", "orbit", "open-field")


@dataclass
class Scenario:
    name: str
    seed: int
    duration: float
    replan_hz: float
    grid: GridConfig
    sdf: SdfConfig
    world: WorldModel
    lidar: LidarModel
    actor: ScriptedActor
    shot: ShotSpec
    planner: PlannerConfig
    aim_height: float = 1.0
    start: tuple | None = None
    sensor_yaw: str = "heading"
    bootstrap_yaws: int = 1
    pixel_noise: float = 2.0
    source: Path | None = None
    extra: dict = field(default_factory=dict)

    @property
    def cycle_dt(self) -> float:
        return 1.0 / self.replan_hz

    @property
    def n_cycles(self) -> int:
        return int(round(self.duration * self.replan_hz))


def bundled_path(name: str) -> Path:
    ref = resources.files("aerocine") / "scenarios" / f"{name}.toml"
    return Path(str(ref))


def resolve(spec: str | Path) -> Path:
    """A scenario path, or the name of a bundled scenario."""
    p = Path(spec)
    if p.exists():
        return p
    if str(spec) in BUNDLED:
        return bundled_path(str(spec))
    raise ConfigError(f"scenario {spec!s} not found (bundled: {', '.join(BUNDLED)})")


class _Reader:
    """Typed access into a parsed TOML table with file/line-aware errors."""

    def __init__(self, path: Path, text: str):
        self.path = path
        self.lines = text.splitlines()

    def line_of(self, section: str, key: str | None) -> int | None:
        start = 0
        if section:
            pat = re.compile(r"^\s*\[+\s*" + re.escape(section) + r"\s*\]+")
            for i, ln in enumerate(self.lines):
                if pat.match(ln):
                    start = i
                    break
            else:
                return None
            if key is None:
                return start + 1
        kpat = re.compile(r"^\s*" + re.escape(key) + r"\s*=")
        for i in range(start, len(self.lines)):
            if kpat.match(self.lines[i]):
                return i + 1
        return start + 1 if section else None

    def fail(self, section: str, key: str | None, msg: str):
        name = f"{section}.{key}" if section and key else (key or section)
        raise ScenarioError(msg, path=str(self.path), line=self.line_of(section, key), field=name)

    def get(self, table: dict, section: str, key: str, kind, default=...):
        if key not in table:
            if default is ...:
                self.fail(section, None, f"missing required field '{key}'")
            return default
        val = table[key]
        try:
            if kind is float:
                if isinstance(val, bool) or not isinstance(val, (int, float)):
                    raise TypeError
                return float(val)
            if kind is int:
                if isinstance(val, bool) or not isinstance(val, int):
                    raise TypeError
                return val
            if kind is str:
                if not isinstance(val, str):
                    raise TypeError
                return val
            if kind is bool:
                if not isinstance(val, bool):
                    raise TypeError
                return val
            if isinstance(kind, tuple) and kind[0] == "vec":
                arr = np.asarray(val, dtype=float)
                if arr.shape != (kind[1],):
                    raise TypeError
                return tuple(float(v) for v in arr)
            if kind == "points":
                arr = np.asarray(val, dtype=float)
                if arr.ndim != 2 or arr.shape[1] != 3:
                    raise TypeError
                return arr
            if kind == "knots":
                if isinstance(val, (int, float)) and not isinstance(val, bool):
                    return float(val)
                arr = np.asarray(val, dtype=float)
                if arr.ndim != 2 or arr.shape[1] != 2:
                    raise TypeError
                return tuple(map(tuple, arr))
        except (TypeError, ValueError):
            self.fail(section, key, f"bad value {val!r} for '{key}'")
        raise AssertionError(kind)


def load_scenario(spec: str | Path, *, seed: int | None = None) -> Scenario:
    path = resolve(spec)
    text = path.read_text()
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ScenarioError(f"TOML syntax error: {exc}", path=str(path),
                            line=int(m.group(1)) if m else None) from None
    r = _Reader(path, text)
    try:
        return _build(r, data, path, seed)
    except ScenarioError:
        raise
    except ConfigError as exc:
        raise ScenarioError(str(exc), path=str(path)) from None


def _section(r: _Reader, data: dict, name: str, required: bool = True) -> dict:
    if name not in data:
        if required:
            r.fail("", name, f"missing section [{name}]")
        return {}
    if not isinstance(data[name], dict):
        r.fail("", name, f"[{name}] must be a table")
    return data[name]


def _build(r: _Reader, data: dict, path: Path, seed: int | None) -> Scenario:
    name = r.get(data, "", "name", str, path.stem)
    base_seed = r.get(data, "", "seed", int, 0)
    duration = r.get(data, "", "duration", float)
    if duration < 0:
        r.fail("", "duration", "duration must be >= 0")
    hz = r.get(data, "", "replan_hz", float, 5.0)
    if hz <= 0:
        r.fail("", "replan_hz", "replan_hz must be positive")

    g = _section(r, data, "grid")
    grid = GridConfig(
        dims=tuple(int(v) for v in r.get(g, "grid", "dims", ("vec", 3))),
        resolution=r.get(g, "grid", "resolution", float, 1.0),
        origin=r.get(g, "grid", "origin", ("vec", 3), (0.0, 0.0, 0.0)),
        l_occ=r.get(g, "grid", "l_occ", int, 32),
        l_free=r.get(g, "grid", "l_free", int, 4),
        tau_free=r.get(g, "grid", "tau_free", int, 115),
        tau_occ=r.get(g, "grid", "tau_occ", int, 140),
    )
    sdf = SdfConfig(truncation=r.get(g, "grid", "truncation", float, 5.0))

    w = _section(r, data, "world")
    obstacles = []
    for i, b in enumerate(w.get("box", [])):
        obstacles.append(Box(r.get(b, "world.box", "lo", ("vec", 3)), r.get(b, "world.box", "hi", ("vec", 3))))
    for c in w.get("cylinder", []):
        obstacles.append(Cylinder(
            r.get(c, "world.cylinder", "center", ("vec", 2)), r.get(c, "world.cylinder", "radius", float),
            r.get(c, "world.cylinder", "z_lo", float, 0.0), r.get(c, "world.cylinder", "z_hi", float),
        ))
    bounds = w.get("bounds")
    if bounds is None:
        bounds = (grid.origin, tuple(grid.upper))
    world = WorldModel(obstacles, r.get(w, "world", "ground_z", float, 0.0), bounds)

    li = _section(r, data, "lidar", required=False)
    lidar = LidarModel(
        azimuth_steps=r.get(li, "lidar", "azimuth_steps", int, 360),
        max_range=r.get(li, "lidar", "max_range", float, 100.0),
        rate=r.get(li, "lidar", "rate", float, 10.0),
        mount_roll_deg=r.get(li, "lidar", "mount_roll_deg", float, 90.0),
        mount_pitch_deg=r.get(li, "lidar", "mount_pitch_deg", float, 0.0),
        pose_jitter=r.get(li, "lidar", "pose_jitter", float, 0.0),
    )
    sensor_yaw = r.get(li, "lidar", "yaw", str, "heading")
    if sensor_yaw not in ("heading", "travel"):
        r.fail("lidar", "yaw", "lidar.yaw must be 'heading' or 'travel'")

    bootstrap_yaws = r.get(li, "lidar", "bootstrap_yaws", int, 1)
    if bootstrap_yaws < 1:
        r.fail("lidar", "bootstrap_yaws", "bootstrap_yaws must be >= 1")

    a = _section(r, data, "actor")
    kind = r.get(a, "actor", "kind", str, "person")
    shape = r.get(a, "actor", "path", str)
    if shape == "polyline":
        actor_path = PolylinePath(r.get(a, "actor", "points", "points"))
    elif shape == "circle":
        actor_path = CirclePath(
            r.get(a, "actor", "center", ("vec", 3)), r.get(a, "actor", "radius", float),
            math.radians(r.get(a, "actor", "start_angle_deg", float, 0.0)),
            r.get(a, "actor", "ccw", bool, True),
        )
    else:
        r.fail("actor", "path", f"unknown path type {shape!r} (polyline or circle)")
    actor = ScriptedActor(kind, actor_path, r.get(a, "actor", "speed", "knots", 1.0),
                          r.get(a, "actor", "duration", float, None))
    lo, hi = actor_path.bounds()
    if not (world.contains(lo) and world.contains(hi)):
        r.fail("actor", "path", "actor path leaves the world bounds")

    s = _section(r, data, "shot")
    shot = ShotSpec(
        rho=r.get(s, "shot", "rho", float),
        phi_rel=math.radians(r.get(s, "shot", "phi_rel_deg", float, 90.0)) % (2 * math.pi),
        theta_rel=math.radians(r.get(s, "shot", "theta_rel_deg", float, 20.0)),
    )

    pl = data.get("planner", {})
    if isinstance(pl, str):
        ref = (path.parent / pl)
        if not ref.exists():
            r.fail("", "planner", f"planner config {pl} not found")
        planner = PlannerConfig.from_file(ref)
    else:
        overrides = dict(pl)
        base = overrides.pop("config", None)
        planner = PlannerConfig.from_file(path.parent / base) if base else PlannerConfig()
        if overrides:
            planner = PlannerConfig.from_dict({**planner.to_dict(), **overrides})

    d = _section(r, data, "drone", required=False)
    start = r.get(d, "drone", "start", ("vec", 3), None)

    return Scenario(
        name=name, seed=base_seed if seed is None else seed, duration=duration, replan_hz=hz,
        grid=grid, sdf=sdf, world=world, lidar=lidar, actor=actor, shot=shot, planner=planner,
        aim_height=r.get(a, "actor", "aim_height", float, 1.0), start=start, sensor_yaw=sensor_yaw,
        pixel_noise=r.get(a, "actor", "pixel_noise", float, 2.0), source=path,
        bootstrap_yaws=bootstrap_yaws,
    )
