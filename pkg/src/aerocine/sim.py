"""Deterministic synthetic world, LiDAR beam model and scripted actors.

Worlds are unions of axis-aligned boxes, vertical cylinders and a ground
half-space, so every beam intersection has a closed form.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError
from .forecast import ActorObservation, normalize_kind
from .voxel_world import GridConfig, OccupancyGrid, RayMeasurement

FREE_VALUE = 0
OCCUPIED_VALUE = 255
UNKNOWN_VALUE = 127


# -- primitives ----------------------------------------------------------------

@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(float(v) for v in self.lo))
        object.__setattr__(self, "hi", tuple(float(v) for v in self.hi))
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ConfigError(f"box needs lo < hi on every axis, got {self.lo} {self.hi}")

    @property
    def bounds(self):
        return np.array(self.lo), np.array(self.hi)

    def intersect(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        lo, hi = self.bounds
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            ta = (lo - o) * inv
            tb = (hi - o) * inv
        # axis-parallel beams: inside the slab means unbounded, outside means miss
        par = d == 0
        inside = (o >= lo) & (o <= hi)
        ta = np.where(par, np.where(inside, -np.inf, np.inf), ta)
        tb = np.where(par, np.where(inside, np.inf, -np.inf), tb)
        t_near = np.max(np.minimum(ta, tb), axis=1)
        t_far = np.min(np.maximum(ta, tb), axis=1)
        hit = (t_near <= t_far) & (t_near > 0)
        return np.where(hit, t_near, np.inf)

    def solid_mask(self, cfg: GridConfig) -> np.ndarray:
        mask = np.zeros(cfg.dims, dtype=bool)
        rng = []
        for ax in range(3):
            edges = cfg.origin[ax] + np.arange(cfg.dims[ax] + 1) * cfg.resolution
            sel = np.flatnonzero((edges[:-1] < self.hi[ax]) & (edges[1:] > self.lo[ax]))
            if sel.size == 0:
                return mask
            rng.append(slice(sel[0], sel[-1] + 1))
        mask[tuple(rng)] = True
        return mask

    def on_surface(self, p: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        lo, hi = self.bounds
        within = np.all((p >= lo - tol) & (p <= hi + tol), axis=-1)
        face = np.any((np.abs(p - lo) <= tol) | (np.abs(p - hi) <= tol), axis=-1)
        return within & face


@dataclass(frozen=True)
class Cylinder:
    center: tuple[float, float]
    radius: float
    z_lo: float
    z_hi: float

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        if not self.radius > 0 or not self.z_hi > self.z_lo:
            raise ConfigError("cylinder needs radius > 0 and z_hi > z_lo")

    @property
    def bounds(self):
        cx, cy = self.center
        r = self.radius
        return np.array([cx - r, cy - r, self.z_lo]), np.array([cx + r, cy + r, self.z_hi])

    def intersect(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        cx, cy = self.center
        r2 = self.radius**2
        ox, oy = o[:, 0] - cx, o[:, 1] - cy
        dx, dy, dz = d[:, 0], d[:, 1], d[:, 2]
        a = dx * dx + dy * dy
        b = 2 * (ox * dx + oy * dy)
        c = ox * ox + oy * oy - r2
        disc = b * b - 4 * a * c
        best = np.full(len(o), np.inf)
        ok = (a > 0) & (disc >= 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            t_side = np.where(ok, (-b - np.sqrt(np.where(ok, disc, 0))) / (2 * np.where(ok, a, 1)), np.inf)
        z_side = o[:, 2] + t_side * dz
        side = ok & (t_side > 0) & (z_side >= self.z_lo) & (z_side <= self.z_hi)
        best = np.where(side, t_side, best)
        for zc in (self.z_lo, self.z_hi):
            with np.errstate(divide="ignore", invalid="ignore"):
                t = np.where(dz != 0, (zc - o[:, 2]) / np.where(dz != 0, dz, 1), np.inf)
            px, py = ox + t * dx, oy + t * dy
            cap = (t > 0) & (px * px + py * py <= r2)
            best = np.where(cap & (t < best), t, best)
        return best

    def solid_mask(self, cfg: GridConfig) -> np.ndarray:
        res = cfg.resolution
        lo_x = cfg.origin[0] + np.arange(cfg.dims[0]) * res
        lo_y = cfg.origin[1] + np.arange(cfg.dims[1]) * res
        # nearest point of each voxel column's xy-rectangle to the axis
        nx = np.clip(self.center[0], lo_x, lo_x + res) - self.center[0]
        ny = np.clip(self.center[1], lo_y, lo_y + res) - self.center[1]
        cols = nx[:, None] ** 2 + ny[None, :] ** 2 < self.radius**2
        edges = cfg.origin[2] + np.arange(cfg.dims[2] + 1) * res
        zs = (edges[:-1] < self.z_hi) & (edges[1:] > self.z_lo)
        return cols[:, :, None] & zs[None, None, :]

    def on_surface(self, p: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        rr = np.hypot(p[..., 0] - self.center[0], p[..., 1] - self.center[1])
        z = p[..., 2]
        inz = (z >= self.z_lo - tol) & (z <= self.z_hi + tol)
        side = np.abs(rr - self.radius) <= tol * max(1.0, self.radius)
        cap = (rr <= self.radius + tol) & ((np.abs(z - self.z_lo) <= tol) | (np.abs(z - self.z_hi) <= tol))
        return inz & (side | cap)


@dataclass
class WorldModel:
    obstacles: list = field(default_factory=list)
    ground_z: float = 0.0
    bounds: tuple = ((0.0, 0.0, -2.0), (100.0, 100.0, 30.0))

    def __post_init__(self):
        lo, hi = (np.asarray(b, dtype=float) for b in self.bounds)
        self.bounds = (tuple(lo), tuple(hi))
        if np.any(hi <= lo):
            raise ConfigError("world bounds need lo < hi")
        if not lo[2] <= self.ground_z <= hi[2]:
            raise ConfigError("ground_z lies outside the world bounds")
        for ob in self.obstacles:
            olo, ohi = ob.bounds
            if np.any(olo < lo - 1e-9) or np.any(ohi > hi + 1e-9):
                raise ConfigError(f"obstacle {ob} extends outside the world bounds")

    def contains(self, p) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= self.bounds[0]) and np.all(p <= self.bounds[1]))

    def cast(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Distance along each unit direction to the first surface (inf if none)."""
        origins = np.asarray(origins, dtype=float).reshape(-1, 3)
        dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
        if origins.shape[0] == 1 and dirs.shape[0] > 1:
            origins = np.broadcast_to(origins, dirs.shape)
        best = np.full(len(dirs), np.inf)
        dz = dirs[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            tg = np.where(dz < 0, (self.ground_z - origins[:, 2]) / np.where(dz < 0, dz, -1), np.inf)
        best = np.where((tg > 0) & (tg < best), tg, best)
        for ob in self.obstacles:
            best = np.minimum(best, ob.intersect(origins, dirs))
        return best

    def on_surface(self, p: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        p = np.asarray(p, dtype=float).reshape(-1, 3)
        out = np.abs(p[:, 2] - self.ground_z) <= tol
        for ob in self.obstacles:
            out |= ob.on_surface(p, tol)
        return out

    def solid_mask(self, cfg: GridConfig) -> np.ndarray:
        """Voxels with positive-volume overlap with any solid (ground included)."""
        edges = cfg.origin[2] + np.arange(cfg.dims[2]) * cfg.resolution
        mask = np.zeros(cfg.dims, dtype=bool)
        mask[:, :, edges < self.ground_z] = True
        for ob in self.obstacles:
            mask |= ob.solid_mask(cfg)
        return mask

    def clearance(self, points) -> np.ndarray:
        """Euclidean distance from each point to the nearest solid, 0 inside."""
        p = np.asarray(points, dtype=float).reshape(-1, 3)
        out = np.maximum(p[:, 2] - self.ground_z, 0.0)
        for ob in self.obstacles:
            if isinstance(ob, Box):
                lo, hi = ob.bounds
                q = np.maximum(np.maximum(lo - p, p - hi), 0.0)
                dist = np.linalg.norm(q, axis=1)
            else:
                rr = np.hypot(p[:, 0] - ob.center[0], p[:, 1] - ob.center[1])
                dr = np.maximum(rr - ob.radius, 0.0)
                dzz = np.maximum(np.maximum(ob.z_lo - p[:, 2], p[:, 2] - ob.z_hi), 0.0)
                dist = np.hypot(dr, dzz)
            out = np.minimum(out, dist)
        return out


def ground_truth_grid(world: WorldModel, cfg: GridConfig) -> OccupancyGrid:
    """Fully observed grid: solid surface voxels occupied, solid interiors unknown, rest free."""
    solid = world.solid_mask(cfg)
    interior = ndimage.binary_erosion(solid, border_value=1)
    cells = np.full(cfg.dims, FREE_VALUE, dtype=np.uint8)
    cells[solid] = OCCUPIED_VALUE
    cells[interior] = UNKNOWN_VALUE
    return OccupancyGrid(cfg, cells)


# -- LiDAR ---------------------------------------------------------------------

@dataclass(frozen=True)
class LidarModel:
    channels: int = 16
    fov_deg: float = 15.0
    azimuth_steps: int = 360
    max_range: float = 100.0
    rate: float = 10.0
    mount_roll_deg: float = 90.0
    mount_pitch_deg: float = 0.0
    pose_jitter: float = 0.0

    def __post_init__(self):
        if self.channels != 16:
            raise ConfigError("the modelled sensor has 16 channels")
        if not 0 < self.fov_deg <= 15.0:
            raise ConfigError("channel elevations must stay within +-15 degrees")
        if self.azimuth_steps < 1 or not self.max_range > 0 or not self.rate > 0:
            raise ConfigError("azimuth_steps, max_range and rate must be positive")

    @property
    def elevations(self) -> np.ndarray:
        return np.radians(np.linspace(-self.fov_deg, self.fov_deg, self.channels))

    @property
    def azimuths(self) -> np.ndarray:
        return np.arange(self.azimuth_steps) * (2 * math.pi / self.azimuth_steps)

    def sensor_directions(self) -> np.ndarray:
        """Unit beam directions in the sensor frame, channel-major."""
        el = self.elevations[:, None]
        az = self.azimuths[None, :]
        d = np.stack(np.broadcast_arrays(np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)), -1)
        return d.reshape(-1, 3)

    def mount(self) -> np.ndarray:
        r, p = math.radians(self.mount_roll_deg), math.radians(self.mount_pitch_deg)
        Rx = np.array([[1, 0, 0], [0, math.cos(r), -math.sin(r)], [0, math.sin(r), math.cos(r)]])
        Ry = np.array([[math.cos(p), 0, math.sin(p)], [0, 1, 0], [-math.sin(p), 0, math.cos(p)]])
        return Ry @ Rx


@dataclass(frozen=True)
class SensorPose:
    position: tuple[float, float, float]
    yaw: float = 0.0
    t: float = 0.0

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass
class Scan:
    """One revolution of beams; iterates as :class:`RayMeasurement`."""

    t: float
    origin: np.ndarray
    ends: np.ndarray
    hits: np.ndarray

    def as_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        starts = np.broadcast_to(self.origin, self.ends.shape)
        return np.ascontiguousarray(starts), self.ends, self.hits.astype(np.uint8)

    def __len__(self) -> int:
        return len(self.ends)

    def __iter__(self) -> Iterator[RayMeasurement]:
        o = tuple(float(v) for v in self.origin)
        for e, h in zip(self.ends, self.hits):
            yield RayMeasurement(o, tuple(float(v) for v in e), bool(h))


def simulate_scan(world: WorldModel, sensor_pose: SensorPose, lidar: LidarModel,
                  rng: np.random.Generator | None = None) -> Scan:
    origin = np.asarray(sensor_pose.position, dtype=float)
    if not world.contains(origin):
        raise ConfigError(f"sensor pose {tuple(origin)} outside the world bounds")
    if lidar.pose_jitter > 0 and rng is not None:
        origin = origin + rng.normal(0.0, lidar.pose_jitter, 3)
    dirs = lidar.sensor_directions() @ (sensor_pose.rotation() @ lidar.mount()).T
    t = world.cast(origin[None, :], dirs)
    hit = t <= lidar.max_range
    rng_ = np.where(hit, t, lidar.max_range)
    ends = origin + rng_[:, None] * dirs
    return Scan(sensor_pose.t, origin, ends, hit)


_SCAN_DTYPE = np.dtype([("t", "<f8"), ("x", "<f8"), ("y", "<f8"), ("z", "<f8"), ("is_hit", "u1")])
SENSOR_ORIGIN = 255  # is_hit marker: the record carries the sensor position for following points


def dump_scans(path, scans: Sequence[Scan]) -> Path:
    """Binary point records; each scan starts with a sensor-origin record."""
    path = Path(path)
    with open(path, "wb") as fh:
        for s in scans:
            recs = np.empty(len(s) + 1, dtype=_SCAN_DTYPE)
            recs[0] = (s.t, *s.origin, SENSOR_ORIGIN)
            recs["t"][1:] = s.t
            recs["x"][1:], recs["y"][1:], recs["z"][1:] = s.ends.T
            recs["is_hit"][1:] = s.hits
            fh.write(recs.tobytes())
    return path


def load_scans(path) -> list[Scan]:
    recs = np.fromfile(path, dtype=_SCAN_DTYPE)
    heads = np.flatnonzero(recs["is_hit"] == SENSOR_ORIGIN)
    out = []
    for a, b in zip(heads, list(heads[1:]) + [len(recs)]):
        h = recs[a]
        body = recs[a + 1:b]
        ends = np.column_stack([body["x"], body["y"], body["z"]])
        out.append(Scan(float(h["t"]), np.array([h["x"], h["y"], h["z"]]), ends, body["is_hit"].astype(bool)))
    return out


# -- actors --------------------------------------------------------------------

@dataclass(frozen=True)
class PolylinePath:
    points: tuple

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 2:
            raise ConfigError("a polyline needs at least two 3-D points")
        object.__setattr__(self, "points", tuple(map(tuple, pts)))

    @property
    def length(self) -> float:
        return float(np.sum(self._seg_len()))

    def _seg_len(self) -> np.ndarray:
        return np.linalg.norm(np.diff(np.asarray(self.points), axis=0), axis=1)

    def at(self, s: float) -> tuple[np.ndarray, float]:
        p, h = self.at_many(np.array([s], dtype=float))
        return p[0], float(h[0])

    def at_many(self, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Positions and tangent headings at arc lengths ``s`` (clamped to the path).

        A vertex belongs to the segment leaving it; the final point to the last
        segment. Zero-length segments are skipped.
        """
        pts = np.asarray(self.points)
        keep = np.concatenate([[True], np.any(np.diff(pts, axis=0) != 0, axis=1)])
        pts = pts[keep]
        if len(pts) == 1:
            first = np.asarray(self.points)
            d = first[1] - first[0]
            return np.repeat(pts, len(s), axis=0), np.full(len(s), math.atan2(d[1], d[0]))
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        s = np.clip(np.asarray(s, dtype=float), 0.0, cum[-1])
        i = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
        u = (s - cum[i]) / seg[i]
        d = pts[i + 1] - pts[i]
        return pts[i] + u[:, None] * d, np.arctan2(d[:, 1], d[:, 0])

    def bounds(self):
        pts = np.asarray(self.points)
        return pts.min(axis=0), pts.max(axis=0)


@dataclass(frozen=True)
class CirclePath:
    center: tuple[float, float, float]
    radius: float
    start_angle: float = 0.0
    ccw: bool = True

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        if not self.radius > 0:
            raise ConfigError("circle radius must be positive")

    @property
    def length(self) -> float:
        return 2 * math.pi * self.radius

    def at(self, s: float) -> tuple[np.ndarray, float]:
        p, h = self.at_many(np.array([s], dtype=float))
        return p[0], float(h[0])

    def at_many(self, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        sign = 1.0 if self.ccw else -1.0
        ang = self.start_angle + sign * np.asarray(s, dtype=float) / self.radius
        c = np.asarray(self.center)
        p = c + self.radius * np.column_stack([np.cos(ang), np.sin(ang), np.zeros_like(ang)])
        h = (ang + sign * math.pi / 2 + math.pi) % (2 * math.pi) - math.pi
        return p, h

    def bounds(self):
        c = np.asarray(self.center)
        r = np.array([self.radius, self.radius, 0.0])
        return c - r, c + r


@dataclass(frozen=True)
class ScriptedActor:
    """Actor moving along ``path``; ``speed`` is a constant or (t, v) knots, linear between.

    The script ends at ``duration`` (default: when a polyline is exhausted,
    unbounded for a circle); later queries return the final pose.
    """

    kind: str
    path: PolylinePath | CirclePath
    speed: float | tuple = 1.0
    duration: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", normalize_kind(self.kind))
        knots = self.knots
        if np.any(knots[:, 1] < 0):
            raise ConfigError("actor speed must be non-negative")
        if np.any(np.diff(knots[:, 0]) <= 0):
            raise ConfigError("speed knots need increasing times")

    @property
    def knots(self) -> np.ndarray:
        if np.isscalar(self.speed):
            return np.array([[0.0, float(self.speed)]])
        k = np.asarray(self.speed, dtype=float).reshape(-1, 2)
        if k[0, 0] > 0:
            k = np.vstack([[0.0, k[0, 1]], k])
        return k

    def distance_at(self, t: float) -> float:
        """Exact integral of the piecewise-linear speed profile over [0, t]."""
        return float(self.distances(np.array([t], dtype=float))[0])

    def distances(self, t: np.ndarray) -> np.ndarray:
        k = self.knots
        t = np.asarray(t, dtype=float)
        tk, vk = k[:, 0], k[:, 1]
        seg_d = 0.5 * (vk[:-1] + vk[1:]) * np.diff(tk)
        cum = np.concatenate([[0.0], np.cumsum(seg_d)])
        i = np.clip(np.searchsorted(tk, t, side="right") - 1, 0, len(tk) - 1)
        dt = t - tk[i]
        accel = np.zeros(len(tk))
        accel[:-1] = np.diff(vk) / np.diff(tk)
        out = cum[i] + vk[i] * dt + 0.5 * accel[i] * dt * dt
        return np.where(t <= 0, 0.0, out)

    def end_time(self) -> float:
        if self.duration is not None:
            return float(self.duration)
        if isinstance(self.path, CirclePath):
            return math.inf
        # first time the polyline is exhausted
        L = self.path.length
        k = self.knots
        if self.distance_at(k[-1, 0]) < L:
            if k[-1, 1] == 0:
                return math.inf
            return float(k[-1, 0] + (L - self.distance_at(k[-1, 0])) / k[-1, 1])
        lo, hi = 0.0, float(k[-1, 0])
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            lo, hi = (mid, hi) if self.distance_at(mid) < L else (lo, mid)
        return hi


def actor_pose_at(actor: ScriptedActor, t: float) -> ActorObservation:
    if t < 0:
        raise ValueError("t must be non-negative")
    p, h = actor_path_samples(actor, np.array([t], dtype=float))
    return ActorObservation(t, tuple(p[0]), float(h[0]))


def actor_path_samples(actor: ScriptedActor, times) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`actor_pose_at`: positions (k, 3) and headings (k,)."""
    times = np.asarray(times, dtype=float)
    te = np.minimum(np.maximum(times, 0.0), actor.end_time())
    return actor.path.at_many(actor.distances(te))


def perturb_positions(positions: np.ndarray, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    if amplitude < 0:
        raise ValueError("amplitude must be non-negative")
    out = np.array(positions, dtype=float, copy=True).reshape(-1, 3)
    if amplitude > 0:
        out[:, :2] += rng.uniform(-amplitude, amplitude, size=(len(out), 2))
    return out


def perturb_observation(obs: ActorObservation, amplitude: float, rng_seed) -> ActorObservation:
    """Uniform noise in [-amplitude, amplitude] on x and y, reproducible from ``rng_seed``."""
    if amplitude < 0:
        raise ValueError("amplitude must be non-negative")
    if amplitude == 0:
        return obs
    p = perturb_positions(np.asarray(obs.world_position)[None], amplitude, np.random.default_rng(rng_seed))[0]
    return ActorObservation(obs.timestamp, tuple(p), obs.heading)
