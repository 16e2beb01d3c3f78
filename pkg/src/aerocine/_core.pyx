# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: ray integration and exact truncated-distance updates.

Mirrors ``_pycore`` operation for operation so both backends produce
bit-identical grids and fields.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, INFINITY
from libc.stdlib cimport malloc, realloc, free
from libc.stdint cimport int64_t, int8_t, uint8_t

cnp.import_array()

NAME = "native"

cdef enum:
    FREE = 0
    OCCUPIED = 1
    UNKNOWN = 2


cdef struct EventBuf:
    int64_t *idx
    int8_t *kind
    Py_ssize_t n
    Py_ssize_t cap


cdef int _push(EventBuf *buf, int64_t idx, int8_t kind) except -1 nogil:
    cdef Py_ssize_t cap
    cdef int64_t *ni
    cdef int8_t *nk
    if buf.n == buf.cap:
        cap = buf.cap * 2 if buf.cap else 4096
        ni = <int64_t *> realloc(buf.idx, cap * sizeof(int64_t))
        if ni == NULL:
            with gil:
                raise MemoryError()
        buf.idx = ni
        nk = <int8_t *> realloc(buf.kind, cap * sizeof(int8_t))
        if nk == NULL:
            with gil:
                raise MemoryError()
        buf.kind = nk
        buf.cap = cap
    buf.idx[buf.n] = idx
    buf.kind[buf.n] = kind
    buf.n += 1
    return 0


cdef inline int _clampi(long v, long hi) noexcept nogil:
    if v < 0:
        return 0
    if v > hi:
        return <int> hi
    return <int> v


cdef inline double _crossing(long c, long step, double a, double d) noexcept nogil:
    # computed afresh per face, never accumulated, so geometric ties stay exact ties
    cdef long k = c + 1 if step > 0 else c
    return (<double> k - a) / d


cdef Py_ssize_t _walk(double p0x, double p0y, double p0z,
                      double p1x, double p1y, double p1z,
                      const double *origin, double res, const long *dims,
                      long *out, bint *end_inside) noexcept nogil:
    """Writes voxel coordinates into ``out`` (3 per voxel); returns the count."""
    cdef double a[3]
    cdef double b[3]
    cdef double d[3]
    cdef double tmax[3]
    cdef long cur[3]
    cdef long last[3]
    cdef long step[3]
    cdef double t0 = 0.0, t1 = 1.0, ta, tb, tmp, s, e, m
    cdef int i
    cdef Py_ssize_t n

    a[0] = (p0x - origin[0]) / res
    a[1] = (p0y - origin[1]) / res
    a[2] = (p0z - origin[2]) / res
    b[0] = (p1x - origin[0]) / res
    b[1] = (p1y - origin[1]) / res
    b[2] = (p1z - origin[2]) / res
    end_inside[0] = True
    for i in range(3):
        d[i] = b[i] - a[i]
        if not (0.0 <= b[i] and b[i] <= dims[i]):
            end_inside[0] = False

    for i in range(3):
        if d[i] == 0.0:
            if a[i] < 0.0 or a[i] > dims[i]:
                end_inside[0] = False
                return 0
        else:
            ta = (0.0 - a[i]) / d[i]
            tb = (dims[i] - a[i]) / d[i]
            if ta > tb:
                tmp = ta
                ta = tb
                tb = tmp
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
    if t0 > t1:
        end_inside[0] = False
        return 0

    for i in range(3):
        s = a[i] + t0 * d[i]
        e = a[i] + t1 * d[i]
        cur[i] = _clampi(<long> floor(s), dims[i] - 1)
        last[i] = _clampi(<long> floor(e), dims[i] - 1)
        step[i] = 0
        tmax[i] = INFINITY
        if d[i] > 0.0:
            step[i] = 1
        elif d[i] < 0.0:
            step[i] = -1
        if step[i] != 0:
            tmax[i] = _crossing(cur[i], step[i], a[i], d[i])
        if cur[i] == last[i]:
            tmax[i] = INFINITY

    out[0] = cur[0]
    out[1] = cur[1]
    out[2] = cur[2]
    n = 1
    while cur[0] != last[0] or cur[1] != last[1] or cur[2] != last[2]:
        m = tmax[0]
        if tmax[1] < m:
            m = tmax[1]
        if tmax[2] < m:
            m = tmax[2]
        if m == INFINITY:
            break
        for i in range(3):
            if tmax[i] == m:
                cur[i] += step[i]
                if cur[i] == last[i]:
                    tmax[i] = INFINITY
                else:
                    tmax[i] = _crossing(cur[i], step[i], a[i], d[i])
        out[3 * n] = cur[0]
        out[3 * n + 1] = cur[1]
        out[3 * n + 2] = cur[2]
        n += 1
    return n


def traverse(p0, p1, origin, double res, dims):
    cdef double org[3]
    cdef long dm[3]
    cdef bint inside
    cdef Py_ssize_t n, i
    for i in range(3):
        org[i] = float(origin[i])
        dm[i] = int(dims[i])
    cdef cnp.ndarray[cnp.int64_t, ndim=2] res_arr
    cdef long *buf = <long *> malloc(3 * (dm[0] + dm[1] + dm[2] + 3) * sizeof(long))
    if buf == NULL:
        raise MemoryError()
    try:
        n = _walk(float(p0[0]), float(p0[1]), float(p0[2]),
                  float(p1[0]), float(p1[1]), float(p1[2]),
                  org, res, dm, buf, &inside)
        res_arr = np.empty((n, 3), dtype=np.int64)
        for i in range(n):
            res_arr[i, 0] = buf[3 * i]
            res_arr[i, 1] = buf[3 * i + 1]
            res_arr[i, 2] = buf[3 * i + 2]
    finally:
        free(buf)
    return res_arr


cdef inline int _cls(int v, int tau_free, int tau_occ) noexcept nogil:
    if v <= tau_free:
        return FREE
    if v >= tau_occ:
        return OCCUPIED
    return UNKNOWN


def integrate_rays(uint8_t[:, :, ::1] cells, origin, double res,
                   const double[:, ::1] starts, const double[:, ::1] ends,
                   const uint8_t[::1] hits,
                   int l_occ, int l_free, int tau_free, int tau_occ):
    cdef long nx = cells.shape[0], ny = cells.shape[1], nz = cells.shape[2]
    cdef long dm[3]
    cdef double org[3]
    dm[0] = nx
    dm[1] = ny
    dm[2] = nz
    for i in range(3):
        org[i] = float(origin[i])
    cdef uint8_t *flat = &cells[0, 0, 0]
    cdef Py_ssize_t nrays = starts.shape[0]
    cdef long *vox = <long *> malloc(3 * (nx + ny + nz + 3) * sizeof(long))
    if vox == NULL:
        raise MemoryError()
    cdef EventBuf buf
    buf.idx = NULL
    buf.kind = NULL
    buf.n = 0
    buf.cap = 0
    cdef Py_ssize_t r, j, n, k
    cdef bint inside, is_end, hit
    cdef long x, y, z, ux, uy, uz
    cdef int64_t idx, u
    cdef int old, new, oc, nc
    cdef long nb[18]
    nb[:] = [-1, 0, 0, 1, 0, 0, 0, -1, 0, 0, 1, 0, 0, 0, -1, 0, 0, 1]
    try:
        with nogil:
            for r in range(nrays):
                n = _walk(starts[r, 0], starts[r, 1], starts[r, 2],
                          ends[r, 0], ends[r, 1], ends[r, 2],
                          org, res, dm, vox, &inside)
                hit = hits[r] != 0
                for j in range(n):
                    is_end = inside and j == n - 1
                    if is_end and not hit:
                        continue
                    x = vox[3 * j]
                    y = vox[3 * j + 1]
                    z = vox[3 * j + 2]
                    idx = (x * ny + y) * nz + z
                    old = flat[idx]
                    new = old - l_free
                    if new < 0:
                        new = 0
                    if is_end:
                        new = new + l_occ
                        if new > 255:
                            new = 255
                    flat[idx] = <uint8_t> new
                    oc = _cls(old, tau_free, tau_occ)
                    nc = _cls(new, tau_free, tau_occ)
                    if oc == nc:
                        continue
                    if nc == FREE:
                        _push(&buf, idx, FREE)
                        for k in range(6):
                            ux = x + nb[3 * k]
                            uy = y + nb[3 * k + 1]
                            uz = z + nb[3 * k + 2]
                            if 0 <= ux < nx and 0 <= uy < ny and 0 <= uz < nz:
                                u = (ux * ny + uy) * nz + uz
                                if _cls(flat[u], tau_free, tau_occ) == UNKNOWN:
                                    _push(&buf, u, OCCUPIED)
                    elif nc == OCCUPIED:
                        _push(&buf, idx, OCCUPIED)
                    else:
                        _push(&buf, idx, UNKNOWN)
        ev_idx = np.empty(buf.n, dtype=np.int64)
        ev_kind = np.empty(buf.n, dtype=np.int8)
        if buf.n:
            ev_idx[:] = <int64_t[:buf.n]> buf.idx
            ev_kind[:] = <int8_t[:buf.n]> buf.kind
    finally:
        free(vox)
        free(buf.idx)
        free(buf.kind)
    return ev_idx, ev_kind


def update_field(uint8_t[::1] border, double[::1] distance, int64_t[::1] nearest, dims,
                 const int64_t[::1] removed, const int64_t[::1] inserted,
                 const int64_t[:, ::1] offsets, const double[::1] offset_dist,
                 double truncation):
    cdef long nx = dims[0], ny = dims[1], nz = dims[2]
    cdef Py_ssize_t m = offsets.shape[0]
    cdef Py_ssize_t nvox = distance.shape[0]
    cdef uint8_t[::1] changed = np.zeros(nvox, dtype=np.uint8)
    cdef EventBuf inv
    inv.idx = NULL
    inv.kind = NULL
    inv.n = 0
    inv.cap = 0
    cdef Py_ssize_t i, j, count = 0
    cdef long bx, by, bz, vx, vy, vz
    cdef int64_t b, v, u
    cdef double dd
    cdef bint found

    try:
      with nogil:
        # raise: invalidate voxels that referenced a removed border
        for i in range(removed.shape[0]):
            b = removed[i]
            bx = b // (ny * nz)
            by = (b // nz) % ny
            bz = b % nz
            for j in range(m):
                vx = bx + offsets[j, 0]
                vy = by + offsets[j, 1]
                vz = bz + offsets[j, 2]
                if vx < 0 or vx >= nx or vy < 0 or vy >= ny or vz < 0 or vz >= nz:
                    continue
                v = (vx * ny + vy) * nz + vz
                if nearest[v] == b:
                    nearest[v] = -2
                    _push(&inv, v, 0)

        # re-resolve invalidated voxels against the new border set, nearest first
        for i in range(inv.n):
            v = inv.idx[i]
            bx = v // (ny * nz)
            by = (v // nz) % ny
            bz = v % nz
            found = False
            for j in range(m):
                vx = bx + offsets[j, 0]
                vy = by + offsets[j, 1]
                vz = bz + offsets[j, 2]
                if vx < 0 or vx >= nx or vy < 0 or vy >= ny or vz < 0 or vz >= nz:
                    continue
                u = (vx * ny + vy) * nz + vz
                if border[u]:
                    nearest[v] = u
                    distance[v] = offset_dist[j]
                    found = True
                    break
            if not found:
                nearest[v] = -1
                distance[v] = truncation
            changed[v] = 1

        # lower: inserted borders claim every voxel of their ball they are closer to
        for i in range(inserted.shape[0]):
            b = inserted[i]
            bx = b // (ny * nz)
            by = (b // nz) % ny
            bz = b % nz
            for j in range(m):
                vx = bx + offsets[j, 0]
                vy = by + offsets[j, 1]
                vz = bz + offsets[j, 2]
                if vx < 0 or vx >= nx or vy < 0 or vy >= ny or vz < 0 or vz >= nz:
                    continue
                v = (vx * ny + vy) * nz + vz
                dd = offset_dist[j]
                if dd < distance[v] or (dd == distance[v] and nearest[v] < 0):
                    distance[v] = dd
                    nearest[v] = b
                    changed[v] = 1

        for i in range(nvox):
            count += changed[i]
    finally:
        free(inv.idx)
        free(inv.kind)
    return count
