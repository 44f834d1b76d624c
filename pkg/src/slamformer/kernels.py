"""Hot inner loops: exact nearest neighbours, z-buffer splatting, weighted median.

Every kernel exists twice: a numba ``@njit`` version and a numpy version.
The public functions dispatch on :data:`slamformer._numba.USE_NUMBA`; the
suffixed variants stay importable so tests and the benchmark can compare them.
"""
from __future__ import annotations

import numpy as np

from . import _numba
from ._numba import njit

# ---------------------------------------------------------------------------
# nearest neighbour
# ---------------------------------------------------------------------------


def _grid_params(points):
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    extent = np.maximum(hi - lo, 1e-12)
    n = points.shape[0]
    # aim for ~2 points per occupied cell, cap total cells at 4n
    vol = float(np.prod(np.maximum(extent, extent.max() * 1e-3)))
    cell = (2.0 * vol / max(n, 1)) ** (1.0 / 3.0)
    cell = max(cell, float(extent.max()) / 256.0, 1e-9)
    while True:
        dims = np.floor(extent / cell).astype(np.int64) + 1
        if int(np.prod(dims)) <= 4 * n + 8:
            break
        cell *= 1.25
    return lo, float(cell), dims


@njit
def _nn_grid_numba(points, queries, lo, cell, dims):
    nx, ny, nz = dims[0], dims[1], dims[2]
    n = points.shape[0]
    ncell = nx * ny * nz
    keys = np.empty(n, dtype=np.int64)
    for i in range(n):
        ix = min(max(int((points[i, 0] - lo[0]) / cell), 0), nx - 1)
        iy = min(max(int((points[i, 1] - lo[1]) / cell), 0), ny - 1)
        iz = min(max(int((points[i, 2] - lo[2]) / cell), 0), nz - 1)
        keys[i] = (ix * ny + iy) * nz + iz
    order = np.argsort(keys, kind="mergesort")
    start = np.zeros(ncell + 1, dtype=np.int64)
    for i in range(n):
        start[keys[i] + 1] += 1
    for c in range(ncell):
        start[c + 1] += start[c]

    m = queries.shape[0]
    dist = np.empty(m, dtype=np.float64)
    index = np.empty(m, dtype=np.int64)
    for qi in range(m):
        qx = queries[qi, 0]
        qy = queries[qi, 1]
        qz = queries[qi, 2]
        cx = int(np.floor((qx - lo[0]) / cell))
        cy = int(np.floor((qy - lo[1]) / cell))
        cz = int(np.floor((qz - lo[2]) / cell))
        # rings closer than the grid box are empty
        r0 = 0
        for c, nd in ((cx, nx), (cy, ny), (cz, nz)):
            if c < 0:
                r0 = max(r0, -c)
            elif c > nd - 1:
                r0 = max(r0, c - (nd - 1))
        rmax = max(max(abs(cx) + nx, abs(cy) + ny), abs(cz) + nz)
        best = np.inf
        besti = -1
        r = r0
        while r <= rmax:
            for ix in range(max(cx - r, 0), min(cx + r, nx - 1) + 1):
                dx = abs(ix - cx)
                for iy in range(max(cy - r, 0), min(cy + r, ny - 1) + 1):
                    dy = abs(iy - cy)
                    for iz in range(max(cz - r, 0), min(cz + r, nz - 1) + 1):
                        dz = abs(iz - cz)
                        if max(dx, max(dy, dz)) != r:
                            continue
                        key = (ix * ny + iy) * nz + iz
                        for s in range(start[key], start[key + 1]):
                            p = order[s]
                            ex = points[p, 0] - qx
                            ey = points[p, 1] - qy
                            ez = points[p, 2] - qz
                            d2 = ex * ex + ey * ey + ez * ez
                            if d2 < best or (d2 == best and p < besti):
                                best = d2
                                besti = p
            if besti >= 0 and np.sqrt(best) <= r * cell:
                break
            r += 1
        dist[qi] = np.sqrt(best)
        index[qi] = besti
    return dist, index


def nearest_neighbors_numba(queries, points):
    points = np.ascontiguousarray(points, dtype=np.float64)
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    lo, cell, dims = _grid_params(points)
    return _nn_grid_numba(points, queries, lo, cell, dims)


def nearest_neighbors_numpy(queries, points, chunk_bytes=1 << 25):
    """Chunked exhaustive search. Exact, O(n*m)."""
    points = np.asarray(points, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    m, n = queries.shape[0], points.shape[0]
    step = max(1, chunk_bytes // (8 * 3 * max(n, 1)))
    dist = np.empty(m)
    index = np.empty(m, dtype=np.int64)
    for a in range(0, m, step):
        diff = queries[a:a + step, None, :] - points[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        j = np.argmin(d2, axis=1)
        index[a:a + step] = j
        dist[a:a + step] = np.sqrt(d2[np.arange(j.size), j])
    return dist, index


def nearest_neighbors(queries, points):
    """Exact nearest neighbour of each query row in ``points`` (both ``(n, 3)``).

    Returns ``(distances, indices)``.
    """
    if _numba.USE_NUMBA:
        return nearest_neighbors_numba(queries, points)
    return nearest_neighbors_numpy(queries, points)


# ---------------------------------------------------------------------------
# z-buffer
# ---------------------------------------------------------------------------


@njit
def _zbuffer_numba(u, v, depth, height, width):
    winner = np.full(height * width, -1, dtype=np.int64)
    zbuf = np.full(height * width, np.inf)
    for i in range(u.shape[0]):
        if u[i] < 0 or u[i] >= width or v[i] < 0 or v[i] >= height:
            continue
        if not depth[i] > 0.0:
            continue
        k = v[i] * width + u[i]
        if depth[i] < zbuf[k]:
            zbuf[k] = depth[i]
            winner[k] = i
    return winner.reshape((height, width))


def zbuffer_numba(u, v, depth, height, width):
    return _zbuffer_numba(np.ascontiguousarray(u, dtype=np.int64),
                          np.ascontiguousarray(v, dtype=np.int64),
                          np.ascontiguousarray(depth, dtype=np.float64),
                          int(height), int(width))


def zbuffer_numpy(u, v, depth, height, width):
    u = np.asarray(u, dtype=np.int64)
    v = np.asarray(v, dtype=np.int64)
    depth = np.asarray(depth, dtype=np.float64)
    winner = np.full(height * width, -1, dtype=np.int64)
    ok = (u >= 0) & (u < width) & (v >= 0) & (v < height) & (depth > 0)
    idx = np.flatnonzero(ok)
    if idx.size:
        pix = v[idx] * width + u[idx]
        order = np.lexsort((idx, depth[idx], pix))
        pix_sorted = pix[order]
        first = np.ones(order.size, dtype=bool)
        first[1:] = pix_sorted[1:] != pix_sorted[:-1]
        winner[pix_sorted[first]] = idx[order[first]]
    return winner.reshape(height, width)


def zbuffer(u, v, depth, height, width):
    """Index of the nearest point landing on each pixel, ``-1`` where none does.

    Ties in depth go to the lower point index.
    """
    if _numba.USE_NUMBA:
        return zbuffer_numba(u, v, depth, height, width)
    return zbuffer_numpy(u, v, depth, height, width)


# ---------------------------------------------------------------------------
# weighted median
# ---------------------------------------------------------------------------


@njit
def _weighted_median_numba(values, weights):
    order = np.argsort(values, kind="mergesort")
    n = order.shape[0]
    cum = np.empty(n)
    acc = 0.0
    for i in range(n):
        acc += weights[order[i]]
        cum[i] = acc
    half = 0.5 * cum[n - 1]
    for i in range(n):
        if cum[i] >= half:
            return values[order[i]]
    return values[order[n - 1]]


def weighted_median_numba(values, weights):
    return float(_weighted_median_numba(np.ascontiguousarray(values, dtype=np.float64),
                                        np.ascontiguousarray(weights, dtype=np.float64)))


def weighted_median_numpy(values, weights):
    values = np.asarray(values, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    order = np.argsort(values, kind="mergesort")
    cum = np.cumsum(weights[order])
    k = int(np.searchsorted(cum, 0.5 * cum[-1], side="left"))
    return float(values[order[min(k, order.size - 1)]])


def weighted_median(values, weights):
    """Lower weighted median: smallest v with cumulative weight >= half the total."""
    if _numba.USE_NUMBA:
        return weighted_median_numba(values, weights)
    return weighted_median_numpy(values, weights)
