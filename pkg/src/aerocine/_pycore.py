"""Pure-Python reference kernels.

Same contract and arithmetic as the compiled ``_core`` extension; used when the
extension is not built and as the cross-check in the test suite.
"""
from __future__ import annotations

import math

import numpy as np

NAME = "python"

FREE = 0
OCCUPIED = 1
UNKNOWN = 2

_NEIGHBORS6 = ((-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1))


def _crossing(c, step, a, d):
    # computed afresh per face, never accumulated, so geometric ties stay exact ties
    return ((c + 1 if step > 0 else c) - a) / d


def _walk(p0, p1, origin, res, dims):
    """Voxel walk in grid units. Returns (voxels, endpoint_inside)."""
    a = [(p0[i] - origin[i]) / res for i in range(3)]
    b = [(p1[i] - origin[i]) / res for i in range(3)]
    d = [b[i] - a[i] for i in range(3)]
    end_inside = all(0.0 <= b[i] <= dims[i] for i in range(3))

    t0, t1 = 0.0, 1.0
    for i in range(3):
        if d[i] == 0.0:
            if a[i] < 0.0 or a[i] > dims[i]:
                return [], False
        else:
            ta = (0.0 - a[i]) / d[i]
            tb = (dims[i] - a[i]) / d[i]
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
    if t0 > t1:
        return [], False

    cur = [0, 0, 0]
    last = [0, 0, 0]
    step = [0, 0, 0]
    tmax = [math.inf, math.inf, math.inf]
    for i in range(3):
        s = a[i] + t0 * d[i]
        e = a[i] + t1 * d[i]
        c = int(math.floor(s))
        c = min(max(c, 0), dims[i] - 1)
        l = int(math.floor(e))
        l = min(max(l, 0), dims[i] - 1)
        cur[i] = c
        last[i] = l
        if d[i] > 0.0:
            step[i] = 1
        elif d[i] < 0.0:
            step[i] = -1
        if step[i]:
            tmax[i] = _crossing(c, step[i], a[i], d[i])
        if cur[i] == last[i]:
            tmax[i] = math.inf

    out = [(cur[0], cur[1], cur[2])]
    while cur[0] != last[0] or cur[1] != last[1] or cur[2] != last[2]:
        m = min(tmax[0], tmax[1], tmax[2])
        if m == math.inf:
            break
        # exact ties (edge/corner passes) step all tied axes together
        for i in range(3):
            if tmax[i] == m:
                cur[i] += step[i]
                if cur[i] == last[i]:
                    tmax[i] = math.inf
                else:
                    tmax[i] = _crossing(cur[i], step[i], a[i], d[i])
        out.append((cur[0], cur[1], cur[2]))
    return out, end_inside


def traverse(p0, p1, origin, res, dims):
    voxels, _ = _walk(p0, p1, origin, res, dims)
    return np.array(voxels, dtype=np.int64).reshape(-1, 3)


def integrate_rays(cells, origin, res, starts, ends, hits, l_occ, l_free, tau_free, tau_occ):
    """Apply the log-odds ray update to ``cells`` in place.

    Returns raw, in-order classification events as (flat_index, kind) arrays.
    """
    nx, ny, nz = cells.shape
    dims = (nx, ny, nz)
    flat = cells.reshape(-1)
    ev_idx: list[int] = []
    ev_kind: list[int] = []

    def cls(value):
        if value <= tau_free:
            return FREE
        if value >= tau_occ:
            return OCCUPIED
        return UNKNOWN

    origin = [float(v) for v in origin]
    for r in range(len(starts)):
        voxels, end_inside = _walk(starts[r], ends[r], origin, res, dims)
        n = len(voxels)
        hit = bool(hits[r])
        for j, (x, y, z) in enumerate(voxels):
            is_end = end_inside and j == n - 1
            if is_end and not hit:
                continue
            idx = (x * ny + y) * nz + z
            old = int(flat[idx])
            new = old - l_free
            if new < 0:
                new = 0
            if is_end:
                new += l_occ
                if new > 255:
                    new = 255
            flat[idx] = new
            oc = cls(old)
            nc = cls(new)
            if oc == nc:
                continue
            if nc == FREE:
                ev_idx.append(idx)
                ev_kind.append(FREE)
                for dx, dy, dz in _NEIGHBORS6:
                    ux, uy, uz = x + dx, y + dy, z + dz
                    if 0 <= ux < nx and 0 <= uy < ny and 0 <= uz < nz:
                        u = (ux * ny + uy) * nz + uz
                        if cls(int(flat[u])) == UNKNOWN:
                            ev_idx.append(u)
                            ev_kind.append(OCCUPIED)
            elif nc == OCCUPIED:
                ev_idx.append(idx)
                ev_kind.append(OCCUPIED)
            else:
                ev_idx.append(idx)
                ev_kind.append(UNKNOWN)
    return np.array(ev_idx, dtype=np.int64), np.array(ev_kind, dtype=np.int8)


def update_field(border, distance, nearest, dims, removed, inserted, offsets, offset_dist, truncation):
    """Exact truncated-distance update for a border-set diff (flat arrays, in place).

    ``border`` must already reflect the new border set. Voxels whose nearest
    border was removed are invalidated and re-resolved against the new set;
    inserted borders then lower every voxel of their truncation ball.
    Returns the number of voxels whose (distance, nearest) changed.
    """
    nx, ny, nz = dims
    dims_arr = np.array(dims, dtype=np.int64)
    strides = np.array([ny * nz, nz, 1], dtype=np.int64)
    changed = np.zeros(distance.shape[0], dtype=bool)

    def ball(b):
        c = np.array([b // (ny * nz), (b // nz) % ny, b % nz], dtype=np.int64)
        pts = c + offsets
        ok = np.all((pts >= 0) & (pts < dims_arr), axis=1)
        return pts[ok] @ strides, ok

    invalid = []
    for b in removed:
        b = int(b)
        flat, _ = ball(b)
        sel = flat[nearest[flat] == b]
        nearest[sel] = -2
        invalid.append(sel)

    for sel in invalid:
        for v in sel:
            v = int(v)
            flat, ok = ball(v)
            hit = np.flatnonzero(border[flat])
            if hit.size:
                j = hit[0]
                nearest[v] = flat[j]
                distance[v] = offset_dist[np.flatnonzero(ok)[j]]
            else:
                nearest[v] = -1
                distance[v] = truncation
            # the old nearest is gone, so the reference always changed
            changed[v] = True

    for b in inserted:
        b = int(b)
        flat, ok = ball(b)
        dd = offset_dist[ok]
        cur = distance[flat]
        take = (dd < cur) | ((dd == cur) & (nearest[flat] < 0))
        if take.any():
            f = flat[take]
            distance[f] = dd[take]
            nearest[f] = b
            changed[f] = True
    return int(changed.sum())
