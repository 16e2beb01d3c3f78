"""Probabilistic occupancy grid with 8-bit log-odds cells and per-ray updates.

Each ray decrements the cells it passes through and increments its endpoint
on a hit. Classification transitions are reported as a :class:`ChangeSet`,
which is what the distance field consumes.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .errors import ConfigError, OutOfBoundsError

UNKNOWN_VALUE = 127

_GRID_MAGIC = b"AOG1"
_HEADER = struct.Struct("<4s3If3f")  # 32 bytes


class VoxelState(IntEnum):
    FREE = 0
    OCCUPIED = 1
    UNKNOWN = 2


@dataclass(frozen=True)
class GridConfig:
    dims: tuple[int, int, int] = (250, 250, 100)
    resolution: float = 1.0
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    l_occ: int = 32
    l_free: int = 4
    tau_free: int = 115
    tau_occ: int = 140

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        if len(self.dims) != 3 or len(self.origin) != 3:
            raise ConfigError("dims and origin need three components")
        if min(self.dims) <= 0:
            raise ConfigError(f"dims must be positive, got {self.dims}")
        if not self.resolution > 0:
            raise ConfigError(f"resolution must be positive, got {self.resolution}")
        if not (0 <= self.tau_free < UNKNOWN_VALUE < self.tau_occ <= 255):
            raise ConfigError("need 0 <= tau_free < 127 < tau_occ <= 255")
        if self.l_occ < 1 or self.l_free < 1:
            raise ConfigError("l_occ and l_free must be >= 1")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.dims

    @property
    def size(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.origin, dtype=float)

    @property
    def upper(self) -> np.ndarray:
        return self.lower + np.asarray(self.dims, dtype=float) * self.resolution

    def contains(self, p) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= self.lower) and np.all(p <= self.upper))

    def voxel_of(self, p) -> tuple[int, int, int]:
        """Voxel containing world point ``p`` (upper faces belong to the last voxel)."""
        if not self.contains(p):
            raise OutOfBoundsError(f"point {tuple(p)} outside grid")
        idx = np.floor((np.asarray(p, dtype=float) - self.lower) / self.resolution).astype(int)
        idx = np.minimum(idx, np.asarray(self.dims) - 1)
        return tuple(int(i) for i in idx)

    def center(self, voxel) -> np.ndarray:
        return self.lower + (np.asarray(voxel, dtype=float) + 0.5) * self.resolution

    def flat_index(self, coords) -> np.ndarray:
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        if coords.size and (np.any(coords < 0) or np.any(coords >= np.asarray(self.dims))):
            raise OutOfBoundsError("voxel coordinates outside grid")
        return np.ravel_multi_index(coords.T, self.dims).astype(np.int64)

    def coords(self, flat) -> np.ndarray:
        flat = np.asarray(flat, dtype=np.int64)
        return np.stack(np.unravel_index(flat, self.dims), axis=-1).astype(np.int64).reshape(-1, 3)


@dataclass(frozen=True)
class RayMeasurement:
    p_sensor: tuple[float, float, float]
    p_point: tuple[float, float, float]
    is_hit: bool


def _empty_coords() -> np.ndarray:
    return np.zeros((0, 3), dtype=np.int64)


@dataclass
class ChangeSet:
    """Voxel classification changes from one ray or one scan.

    ``became_occupied`` also carries unknown voxels that gained a free
    neighbour (new border candidates). ``became_unknown`` records
    free/occupied voxels that fell back to unknown, so the distance field can
    demote borders that no longer qualify.
    """

    became_occupied: np.ndarray = field(default_factory=_empty_coords)
    became_free: np.ndarray = field(default_factory=_empty_coords)
    became_unknown: np.ndarray = field(default_factory=_empty_coords)

    def __len__(self) -> int:
        return len(self.became_occupied) + len(self.became_free) + len(self.became_unknown)

    def is_empty(self) -> bool:
        return len(self) == 0

    def touched(self) -> np.ndarray:
        return np.concatenate([self.became_occupied, self.became_free, self.became_unknown])


_OFFSETS6 = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=np.int64)


def _classes(values: np.ndarray, config: GridConfig) -> np.ndarray:
    return np.where(values <= config.tau_free, VoxelState.FREE,
                    np.where(values >= config.tau_occ, VoxelState.OCCUPIED, VoxelState.UNKNOWN))


def _net_changes(config: GridConfig, before: np.ndarray, after: np.ndarray, ev_idx: np.ndarray) -> ChangeSet:
    """Classification changes between ``before`` and ``after`` among the voxels the events touched.

    A voxel that flips and flips back within one batch of rays is not reported.
    """
    if ev_idx.size == 0:
        return ChangeSet()
    idx = np.unique(ev_idx)
    c0 = _classes(before.reshape(-1)[idx], config)
    c1 = _classes(after.reshape(-1)[idx], config)
    moved = c0 != c1
    idx, c1 = idx[moved], c1[moved]
    new_free = idx[c1 == VoxelState.FREE]
    # unknown 6-neighbours of newly free voxels are new border candidates
    nb = (config.coords(new_free)[:, None, :] + _OFFSETS6[None]).reshape(-1, 3)
    nb = nb[np.all((nb >= 0) & (nb < np.asarray(config.dims)), axis=1)]
    cand = np.unique(np.ravel_multi_index(nb.T, config.dims)) if len(nb) else nb[:, 0]
    cand = cand[_classes(after.reshape(-1)[cand], config) == VoxelState.UNKNOWN]
    cand = np.setdiff1d(cand, idx, assume_unique=True)
    return ChangeSet(
        became_occupied=config.coords(np.union1d(idx[c1 == VoxelState.OCCUPIED], cand)),
        became_free=config.coords(new_free),
        became_unknown=config.coords(idx[c1 == VoxelState.UNKNOWN]),
    )


class OccupancyGrid:
    """Dense 8-bit occupancy grid. Fresh cells hold 127 (unknown)."""

    def __init__(self, config: GridConfig | None = None, cells: np.ndarray | None = None):
        self.config = config or GridConfig()
        if cells is None:
            cells = np.full(self.config.dims, UNKNOWN_VALUE, dtype=np.uint8)
        cells = np.ascontiguousarray(cells, dtype=np.uint8)
        if cells.shape != self.config.dims:
            raise ConfigError(f"cell array shape {cells.shape} != dims {self.config.dims}")
        self.cells = cells

    def copy(self) -> "OccupancyGrid":
        return OccupancyGrid(self.config, self.cells.copy())

    def classify(self, voxel) -> VoxelState:
        value = int(self.cells[tuple(voxel)])
        if value <= self.config.tau_free:
            return VoxelState.FREE
        if value >= self.config.tau_occ:
            return VoxelState.OCCUPIED
        return VoxelState.UNKNOWN

    def free_mask(self) -> np.ndarray:
        return self.cells <= self.config.tau_free

    def occupied_mask(self) -> np.ndarray:
        return self.cells >= self.config.tau_occ

    def unknown_mask(self) -> np.ndarray:
        return (self.cells > self.config.tau_free) & (self.cells < self.config.tau_occ)

    def states(self) -> np.ndarray:
        """Per-voxel :class:`VoxelState` codes as an int8 array."""
        out = np.full(self.config.dims, VoxelState.UNKNOWN, dtype=np.int8)
        out[self.free_mask()] = VoxelState.FREE
        out[self.occupied_mask()] = VoxelState.OCCUPIED
        return out


def traverse_ray(p_sensor, p_point, config: GridConfig) -> np.ndarray:
    """Voxels crossed by the segment, sensor first, each once, as an (k, 3) array.

    The segment is clipped to the grid box; a segment that misses the box
    yields an empty array.
    """
    return kernels.active.traverse(
        np.asarray(p_sensor, dtype=float), np.asarray(p_point, dtype=float),
        config.origin, float(config.resolution), config.dims,
    )


def _as_arrays(rays) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if hasattr(rays, "as_arrays"):
        return rays.as_arrays()
    rays = list(rays)
    if not rays:
        z = np.zeros((0, 3))
        return z, z.copy(), np.zeros(0, dtype=np.uint8)
    starts = np.array([r.p_sensor for r in rays], dtype=float)
    ends = np.array([r.p_point for r in rays], dtype=float)
    hits = np.array([bool(r.is_hit) for r in rays], dtype=np.uint8)
    return starts, ends, hits


def integrate_arrays(grid: OccupancyGrid, starts: np.ndarray, ends: np.ndarray, hits: np.ndarray) -> ChangeSet:
    cfg = grid.config
    starts = np.ascontiguousarray(starts, dtype=np.float64).reshape(-1, 3)
    ends = np.ascontiguousarray(ends, dtype=np.float64).reshape(-1, 3)
    hits = np.ascontiguousarray(hits, dtype=np.uint8).reshape(-1)
    if not (len(starts) == len(ends) == len(hits)):
        raise ValueError("starts, ends and hits must have equal length")
    before = grid.cells.copy()
    ev_idx, _ = kernels.active.integrate_rays(
        grid.cells, cfg.origin, float(cfg.resolution), starts, ends, hits,
        cfg.l_occ, cfg.l_free, cfg.tau_free, cfg.tau_occ,
    )
    return _net_changes(cfg, before, grid.cells, ev_idx)


def update_ray(grid: OccupancyGrid, ray: RayMeasurement) -> ChangeSet:
    """Apply one measurement to ``grid`` in place and return its classification changes."""
    return integrate_arrays(
        grid, np.asarray(ray.p_sensor, dtype=float), np.asarray(ray.p_point, dtype=float),
        np.array([ray.is_hit], dtype=np.uint8),
    )


def integrate_scan(grid: OccupancyGrid, rays: Iterable[RayMeasurement]) -> ChangeSet:
    """Sequential :func:`update_ray` over ``rays``; changes are net over the whole scan.

    Also accepts any object with ``as_arrays()`` (e.g. a simulated scan).
    """
    return integrate_arrays(grid, *_as_arrays(rays))


# -- snapshots ---------------------------------------------------------------

def write_header(fh, magic: bytes, config: GridConfig) -> None:
    fh.write(_HEADER.pack(magic, *config.dims, float(config.resolution), *config.origin))


def read_header(fh, magic: bytes) -> tuple[tuple[int, int, int], float, tuple[float, float, float]]:
    raw = fh.read(_HEADER.size)
    if len(raw) != _HEADER.size:
        raise ValueError("truncated snapshot header")
    m, nx, ny, nz, res, ox, oy, oz = _HEADER.unpack(raw)
    if m != magic:
        raise ValueError(f"bad snapshot magic {m!r}, expected {magic!r}")
    return (nx, ny, nz), res, (ox, oy, oz)


def save_grid(grid: OccupancyGrid, path) -> tuple[Path, Path]:
    """Write the binary grid snapshot plus a JSON sidecar with the full config."""
    path = Path(path)
    with open(path, "wb") as fh:
        write_header(fh, _GRID_MAGIC, grid.config)
        fh.write(np.ascontiguousarray(grid.cells).tobytes(order="C"))
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps(asdict(grid.config), indent=2) + "\n")
    return path, sidecar


def load_grid(path) -> OccupancyGrid:
    path = Path(path)
    sidecar = path.with_suffix(path.suffix + ".json")
    with open(path, "rb") as fh:
        dims, res, origin = read_header(fh, _GRID_MAGIC)
        cells = np.frombuffer(fh.read(), dtype=np.uint8)
    if sidecar.exists():
        config = GridConfig(**json.loads(sidecar.read_text()))
    else:
        config = GridConfig(dims=dims, resolution=res, origin=origin)
    if config.dims != dims:
        raise ValueError("snapshot header and sidecar disagree on dims")
    return OccupancyGrid(config, cells.reshape(dims).copy())


def coords_list(arr: np.ndarray) -> list[tuple[int, int, int]]:
    return [tuple(int(v) for v in row) for row in np.asarray(arr).reshape(-1, 3)]


__all__: Sequence[str] = (
    "ChangeSet", "GridConfig", "OccupancyGrid", "RayMeasurement", "VoxelState",
    "integrate_scan", "load_grid", "save_grid", "traverse_ray", "update_ray",
)
