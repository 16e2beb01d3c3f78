"""Incremental truncated signed distance transform over an occupancy grid.

Distances are measured to the *border* set: occupied voxels plus unknown
voxels that touch free space. Each voxel keeps its exact Euclidean distance
(voxel centres) to the closest border within the truncation radius and a
reference to that border. The sign comes from the grid at query time:
positive in free space, negative in unknown or occupied space.

Updates are driven by :class:`~aerocine.voxel_world.ChangeSet` objects. Border
removals raise (invalidate and re-resolve) the voxels that referenced them;
insertions lower every voxel of their truncation ball. Both sweeps walk a
precomputed offset table sorted by distance, so the result is exact and equal
to :func:`batch_recompute`.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np
from scipy import ndimage

from . import kernels
from .errors import ConfigError, OutOfBoundsError
from .voxel_world import ChangeSet, GridConfig, OccupancyGrid, read_header, write_header

_FIELD_MAGIC = b"AOF1"

_FACES = np.array(
    [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)], dtype=np.int64
)


@dataclass(frozen=True)
class SdfConfig:
    truncation: float = 5.0

    def check(self, grid: GridConfig) -> None:
        if not self.truncation > 0:
            raise ConfigError("truncation must be positive")
        if self.truncation < 2 * grid.resolution:
            raise ConfigError(
                f"truncation {self.truncation} m is below two voxels ({2 * grid.resolution} m)"
            )


@lru_cache(maxsize=8)
def ball_offsets(truncation: float, resolution: float) -> tuple[np.ndarray, np.ndarray, int]:
    """Integer offsets within the truncation ball, nearest first.

    Returns ``(offsets, distances_m, max_squared_radius)``; ties are ordered
    lexicographically so every sweep visits voxels in the same order.
    """
    r = truncation / resolution
    r2max = int(np.floor(r * r + 1e-9))
    rr = int(np.floor(np.sqrt(r2max)))
    ax = np.arange(-rr, rr + 1, dtype=np.int64)
    g = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)
    k = (g * g).sum(axis=1)
    keep = k <= r2max
    g, k = g[keep], k[keep]
    order = np.lexsort((g[:, 2], g[:, 1], g[:, 0], k))
    g, k = np.ascontiguousarray(g[order]), k[order]
    dist = resolution * np.sqrt(k.astype(np.float64))
    g.setflags(write=False)
    dist.setflags(write=False)
    return g, dist, r2max


def border_mask(grid: OccupancyGrid) -> np.ndarray:
    """Occupied voxels, plus unknown voxels with a free 6-neighbour."""
    free = grid.free_mask()
    occ = grid.occupied_mask()
    near_free = np.zeros_like(free)
    near_free[1:] |= free[:-1]
    near_free[:-1] |= free[1:]
    near_free[:, 1:] |= free[:, :-1]
    near_free[:, :-1] |= free[:, 1:]
    near_free[:, :, 1:] |= free[:, :, :-1]
    near_free[:, :, :-1] |= free[:, :, 1:]
    return occ | (~free & ~occ & near_free)


def _border_at(grid: OccupancyGrid, flat: np.ndarray) -> np.ndarray:
    """Border rule evaluated only at ``flat`` voxel indices."""
    cfg = grid.config
    cells = grid.cells.reshape(-1)
    v = cells[flat]
    occ = v >= cfg.tau_occ
    unk = (v > cfg.tau_free) & ~occ
    coords = cfg.coords(flat)
    dims = np.asarray(cfg.dims)
    near_free = np.zeros(flat.shape[0], dtype=bool)
    for off in _FACES:
        nb = coords + off
        ok = np.all((nb >= 0) & (nb < dims), axis=1)
        idx = np.ravel_multi_index(nb[ok].T, cfg.dims)
        near_free[ok] |= cells[idx] <= cfg.tau_free
    return occ | (unk & near_free)


class SignedDistanceField:
    """Per-voxel truncated distance to the border set plus border bookkeeping.

    ``distance`` is unsigned and clamped to the truncation radius;
    ``nearest`` holds the flat index of the closest border, or -1 when none
    lies within truncation.
    """

    def __init__(self, grid_config: GridConfig, config: SdfConfig | None = None,
                 distance: np.ndarray | None = None, nearest: np.ndarray | None = None,
                 border: np.ndarray | None = None):
        self.grid_config = grid_config
        self.config = config or SdfConfig()
        self.config.check(grid_config)
        shape = grid_config.dims
        self.distance = (np.full(shape, self.config.truncation, dtype=np.float64)
                         if distance is None else np.ascontiguousarray(distance, dtype=np.float64))
        self.nearest = (np.full(shape, -1, dtype=np.int64)
                        if nearest is None else np.ascontiguousarray(nearest, dtype=np.int64))
        self.border = (np.zeros(shape, dtype=np.uint8)
                       if border is None else np.ascontiguousarray(border, dtype=np.uint8))

    @property
    def truncation(self) -> float:
        return self.config.truncation

    @property
    def border_set(self) -> np.ndarray:
        """Border voxel coordinates as an (k, 3) array."""
        return np.argwhere(self.border.astype(bool))

    def copy(self) -> "SignedDistanceField":
        return SignedDistanceField(self.grid_config, self.config, self.distance.copy(),
                                   self.nearest.copy(), self.border.copy())

    def signed(self, grid: OccupancyGrid) -> np.ndarray:
        return np.where(grid.free_mask(), self.distance, -self.distance)

    def snapshot(self, grid: OccupancyGrid) -> "FieldView":
        """Frozen signed copy the planner can query while the live field keeps updating."""
        return FieldView(self.signed(grid), self.grid_config.origin,
                         self.grid_config.resolution, self.truncation)


def apply_changes(sdf: SignedDistanceField, grid: OccupancyGrid, changes: ChangeSet) -> int:
    """Bring ``sdf`` in line with ``grid`` after the updates that produced ``changes``.

    Returns the number of voxels whose distance or border reference changed.
    Raises :class:`OutOfBoundsError` for coordinates outside the grid.
    """
    cfg = grid.config
    if cfg.dims != sdf.grid_config.dims:
        raise ConfigError("field and grid dimensions differ")
    touched = changes.touched()
    if touched.size == 0:
        return 0
    flat = np.unique(cfg.flat_index(touched))
    coords = cfg.coords(flat)
    dims = np.asarray(cfg.dims)
    cand = [flat]
    for off in _FACES:
        nb = coords + off
        ok = np.all((nb >= 0) & (nb < dims), axis=1)
        cand.append(np.ravel_multi_index(nb[ok].T, cfg.dims).astype(np.int64))
    cand = np.unique(np.concatenate(cand))

    now = _border_at(grid, cand)
    border = sdf.border.reshape(-1)
    was = border[cand].astype(bool)
    inserted = np.ascontiguousarray(cand[now & ~was])
    removed = np.ascontiguousarray(cand[was & ~now])
    if inserted.size == 0 and removed.size == 0:
        return 0
    border[inserted] = 1
    border[removed] = 0

    offsets, dist, _ = ball_offsets(sdf.truncation, cfg.resolution)
    return kernels.active.update_field(
        border, sdf.distance.reshape(-1), sdf.nearest.reshape(-1), cfg.dims,
        removed, inserted, offsets, dist, float(sdf.truncation),
    )


def batch_recompute(grid: OccupancyGrid, config: SdfConfig | None = None) -> SignedDistanceField:
    """Rebuild the border set and the truncated distances from scratch."""
    config = config or SdfConfig()
    cfg = grid.config
    mask = border_mask(grid)
    sdf = SignedDistanceField(cfg, config, border=mask.astype(np.uint8))
    if not mask.any():
        return sdf
    idx = ndimage.distance_transform_edt(~mask, return_distances=False, return_indices=True)
    grid_idx = np.indices(cfg.dims, dtype=np.int64)
    k = ((idx.astype(np.int64) - grid_idx) ** 2).sum(axis=0)
    _, _, r2max = ball_offsets(config.truncation, cfg.resolution)
    within = k <= r2max
    sdf.distance = np.where(within, cfg.resolution * np.sqrt(k.astype(np.float64)), config.truncation)
    nearest = np.ravel_multi_index(tuple(idx), cfg.dims).astype(np.int64)
    sdf.nearest = np.where(within, nearest, -1)
    return sdf


# -- queries -----------------------------------------------------------------

def _trilinear(lookup: Callable[[np.ndarray], np.ndarray], points: np.ndarray, origin, res: float,
               dims) -> tuple[np.ndarray, np.ndarray]:
    """Trilinear value and exact gradient over voxel-centre samples.

    Points are assumed inside the grid box; within half a voxel of a face the
    lattice is clamped (constant extension, zero slope along that axis).
    """
    dims_a = np.asarray(dims)
    u = (points - np.asarray(origin)) / res - 0.5
    inside = (u >= 0) & (u <= dims_a - 1)
    u = np.clip(u, 0, dims_a - 1)
    i0 = np.minimum(np.floor(u).astype(np.int64), np.maximum(dims_a - 2, 0))
    f = u - i0
    i1 = np.minimum(i0 + 1, dims_a - 1)
    ny, nz = dims[1], dims[2]

    m = points.shape[0]
    c = np.empty((m, 2, 2, 2))
    for a, xa in enumerate((i0[:, 0], i1[:, 0])):
        for b, yb in enumerate((i0[:, 1], i1[:, 1])):
            for d, zd in enumerate((i0[:, 2], i1[:, 2])):
                c[:, a, b, d] = lookup((xa * ny + yb) * nz + zd)
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    gx, gy, gz = 1 - fx, 1 - fy, 1 - fz
    # collapse z, then y, then x
    cz = c[..., 0] * gz[:, None, None] + c[..., 1] * fz[:, None, None]
    dz = c[..., 1] - c[..., 0]
    cy = cz[:, :, 0] * gy[:, None] + cz[:, :, 1] * fy[:, None]
    dy = cz[:, :, 1] - cz[:, :, 0]
    value = cy[:, 0] * gx + cy[:, 1] * fx
    grad = np.empty((m, 3))
    grad[:, 0] = cy[:, 1] - cy[:, 0]
    grad[:, 1] = dy[:, 0] * gx + dy[:, 1] * fx
    dzy = dz[:, :, 0] * gy[:, None] + dz[:, :, 1] * fy[:, None]
    grad[:, 2] = dzy[:, 0] * gx + dzy[:, 1] * fx
    grad *= inside / res
    return value, grad


class FieldView:
    """Read-only signed field snapshot with vectorised trilinear queries.

    Points outside the grid read ``-truncation`` with zero gradient.
    """

    def __init__(self, signed: np.ndarray, origin, resolution: float, truncation: float):
        self.signed = np.ascontiguousarray(signed, dtype=np.float64)
        self.signed.setflags(write=False)
        self.origin = tuple(float(o) for o in origin)
        self.resolution = float(resolution)
        self.truncation = float(truncation)
        self.dims = self.signed.shape
        self._flat = self.signed.reshape(-1)

    def inside(self, points: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.origin)
        hi = lo + np.asarray(self.dims) * self.resolution
        return np.all((points >= lo) & (points <= hi), axis=-1)

    def sample(self, points) -> tuple[np.ndarray, np.ndarray]:
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        values = np.full(pts.shape[0], -self.truncation)
        grads = np.zeros((pts.shape[0], 3))
        ok = self.inside(pts)
        if ok.any():
            v, g = _trilinear(self._flat.__getitem__, pts[ok], self.origin, self.resolution, self.dims)
            values[ok] = v
            grads[ok] = g
        return values, grads

    def value(self, points) -> np.ndarray:
        return self.sample(points)[0]

    def save(self, path) -> Path:
        """Binary export: grid-style 32-byte header, then float32 signed values."""
        path = Path(path)
        cfg = GridConfig(dims=self.dims, resolution=self.resolution, origin=self.origin)
        with open(path, "wb") as fh:
            write_header(fh, _FIELD_MAGIC, cfg)
            fh.write(self.signed.astype("<f4").tobytes(order="C"))
        return path

    @classmethod
    def load(cls, path, truncation: float) -> "FieldView":
        with open(path, "rb") as fh:
            dims, res, origin = read_header(fh, _FIELD_MAGIC)
            data = np.frombuffer(fh.read(), dtype="<f4").astype(np.float64)
        return cls(data.reshape(dims), origin, res, truncation)


def _live_lookup(sdf: SignedDistanceField, grid: OccupancyGrid):
    d = sdf.distance.reshape(-1)
    cells = grid.cells.reshape(-1)
    tau = grid.config.tau_free

    def lookup(idx):
        return np.where(cells[idx] <= tau, d[idx], -d[idx])

    return lookup


def signed_distance_at(sdf: SignedDistanceField, grid: OccupancyGrid, p) -> float:
    """Trilinearly interpolated signed distance at world point ``p``."""
    cfg = grid.config
    if not cfg.contains(p):
        raise OutOfBoundsError(f"query point {tuple(np.asarray(p).tolist())} outside grid")
    value, _ = _trilinear(_live_lookup(sdf, grid), np.asarray(p, dtype=float).reshape(1, 3),
                          cfg.origin, cfg.resolution, cfg.dims)
    return float(value[0])


class Gradient(NamedTuple):
    vector: np.ndarray
    one_sided: bool


def gradient_at(sdf: SignedDistanceField, grid: OccupancyGrid, p) -> Gradient:
    """Central differences of :func:`signed_distance_at` with step half a voxel.

    Where the stencil leaves the grid the difference turns one-sided and the
    result is flagged.
    """
    cfg = grid.config
    p = np.asarray(p, dtype=float)
    if not cfg.contains(p):
        raise OutOfBoundsError(f"query point {tuple(p.tolist())} outside grid")
    h = cfg.resolution / 2
    g = np.zeros(3)
    one_sided = False
    for axis in range(3):
        e = np.zeros(3)
        e[axis] = h
        lo, hi = p - e, p + e
        lo_ok, hi_ok = cfg.contains(lo), cfg.contains(hi)
        if lo_ok and hi_ok:
            g[axis] = (signed_distance_at(sdf, grid, hi) - signed_distance_at(sdf, grid, lo)) / (2 * h)
        elif hi_ok:
            one_sided = True
            g[axis] = (signed_distance_at(sdf, grid, hi) - signed_distance_at(sdf, grid, p)) / h
        elif lo_ok:
            one_sided = True
            g[axis] = (signed_distance_at(sdf, grid, p) - signed_distance_at(sdf, grid, lo)) / h
        else:
            one_sided = True
    return Gradient(g, one_sided)
