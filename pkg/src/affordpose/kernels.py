"""Hot geometric loops: ray/mesh crossing counts and z-buffer rasterization.

Each kernel has a numba-compiled loop version and a vectorized numpy version.
The numba path is used when numba imports cleanly and the environment
variable ``AFFORDPOSE_DISABLE_NUMBA`` is unset (or "0").  Both paths are kept
callable by name so tests and ``benchmarks/bench_kernels.py`` can compare them.
"""

import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn


USE_NUMBA = HAS_NUMBA and os.environ.get("AFFORDPOSE_DISABLE_NUMBA", "0") in ("", "0")

RAY_EPS = 1e-6          # mm; hits closer than this to either ray end are ignored
BARY_TOL = 1e-12        # boundary hits count
PARALLEL_TOL = 1e-14
MERGE_TOL = 1e-6        # mm; hits through a shared edge/vertex are one crossing


# --------------------------------------------------------------------------
# ray / mesh crossings
# --------------------------------------------------------------------------

@njit(cache=True)
def _crossings_numba(origins, targets, tris, eps, merge_tol):
    n_rays = origins.shape[0]
    n_tris = tris.shape[0]
    counts = np.zeros(n_rays, dtype=np.int64)
    hits = np.empty(n_tris, dtype=np.float64)
    for k in range(n_rays):
        ox, oy, oz = origins[k, 0], origins[k, 1], origins[k, 2]
        dx = targets[k, 0] - ox
        dy = targets[k, 1] - oy
        dz = targets[k, 2] - oz
        length = np.sqrt(dx * dx + dy * dy + dz * dz)
        dx /= length
        dy /= length
        dz /= length
        n_hits = 0
        for f in range(n_tris):
            ax, ay, az = tris[f, 0, 0], tris[f, 0, 1], tris[f, 0, 2]
            e1x = tris[f, 1, 0] - ax
            e1y = tris[f, 1, 1] - ay
            e1z = tris[f, 1, 2] - az
            e2x = tris[f, 2, 0] - ax
            e2y = tris[f, 2, 1] - ay
            e2z = tris[f, 2, 2] - az
            px = dy * e2z - dz * e2y
            py = dz * e2x - dx * e2z
            pz = dx * e2y - dy * e2x
            det = e1x * px + e1y * py + e1z * pz
            if abs(det) < PARALLEL_TOL:
                continue
            inv = 1.0 / det
            sx = ox - ax
            sy = oy - ay
            sz = oz - az
            u = (sx * px + sy * py + sz * pz) * inv
            if u < -BARY_TOL or u > 1.0 + BARY_TOL:
                continue
            qx = sy * e1z - sz * e1y
            qy = sz * e1x - sx * e1z
            qz = sx * e1y - sy * e1x
            v = (dx * qx + dy * qy + dz * qz) * inv
            if v < -BARY_TOL or u + v > 1.0 + BARY_TOL:
                continue
            t = (e2x * qx + e2y * qy + e2z * qz) * inv
            if t > eps and t < length - eps:
                hits[n_hits] = t
                n_hits += 1
        if n_hits == 0:
            continue
        found = np.sort(hits[:n_hits])
        c = 1
        for i in range(1, n_hits):
            if found[i] - found[i - 1] > merge_tol:
                c += 1
        counts[k] = c
    return counts


def _crossings_numpy(origins, targets, tris, eps, merge_tol):
    d = targets - origins
    length = np.linalg.norm(d, axis=1)
    d = d / length[:, None]
    a = tris[:, 0]
    e1 = tris[:, 1] - a
    e2 = tris[:, 2] - a
    # (K, F, 3)
    p = np.cross(d[:, None, :], e2[None, :, :])
    det = np.einsum("fx,kfx->kf", e1, p)
    ok = np.abs(det) >= PARALLEL_TOL
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = origins[:, None, :] - a[None, :, :]
    u = np.einsum("kfx,kfx->kf", s, p) * inv
    q = np.cross(s, e1[None, :, :])
    v = np.einsum("kx,kfx->kf", d, q) * inv
    t = np.einsum("fx,kfx->kf", e2, q) * inv
    hit = (
        ok
        & (u >= -BARY_TOL) & (u <= 1.0 + BARY_TOL)
        & (v >= -BARY_TOL) & (u + v <= 1.0 + BARY_TOL)
        & (t > eps) & (t < length[:, None] - eps)
    )
    counts = np.zeros(len(origins), dtype=np.int64)
    for k in range(len(origins)):
        found = np.sort(t[k, hit[k]])
        if found.size:
            counts[k] = 1 + int(np.count_nonzero(np.diff(found) > merge_tol))
    return counts


def ray_crossings(origins, targets, tris, eps=RAY_EPS, merge_tol=MERGE_TOL, use_numba=None):
    """Count distinct surface crossings on each segment ``origins[k] -> targets[k]``.

    Hits within ``eps`` of either segment end are ignored; hits whose
    distances agree within ``merge_tol`` are merged, so a segment passing
    through an edge shared by two triangles counts once.
    """
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    targets = np.ascontiguousarray(targets, dtype=np.float64).reshape(-1, 3)
    tris = np.ascontiguousarray(tris, dtype=np.float64).reshape(-1, 3, 3)
    if use_numba is None:
        use_numba = USE_NUMBA
    if use_numba and HAS_NUMBA:
        return _crossings_numba(origins, targets, tris, float(eps), float(merge_tol))
    return _crossings_numpy(origins, targets, tris, float(eps), float(merge_tol))


# --------------------------------------------------------------------------
# z-buffer
# --------------------------------------------------------------------------

@njit(cache=True)
def _raster_numba(uv, z, faces, width, height):
    depth = np.full((height, width), np.inf)
    for f in range(faces.shape[0]):
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        x0, y0, z0 = uv[i0, 0], uv[i0, 1], z[i0]
        x1, y1, z1 = uv[i1, 0], uv[i1, 1], z[i1]
        x2, y2, z2 = uv[i2, 0], uv[i2, 1], z[i2]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if abs(area) < 1e-12:
            continue
        xmin = max(int(np.ceil(min(x0, min(x1, x2)))), 0)
        xmax = min(int(np.floor(max(x0, max(x1, x2)))), width - 1)
        ymin = max(int(np.ceil(min(y0, min(y1, y2)))), 0)
        ymax = min(int(np.floor(max(y0, max(y1, y2)))), height - 1)
        for py in range(ymin, ymax + 1):
            for px in range(xmin, xmax + 1):
                w0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) / area
                w1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) / area
                w2 = 1.0 - w0 - w1
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                d = 1.0 / (w0 / z0 + w1 / z1 + w2 / z2)
                if d < depth[py, px]:
                    depth[py, px] = d
    return depth


def _raster_numpy(uv, z, faces, width, height):
    depth = np.full((height, width), np.inf)
    tri_uv = uv[faces]
    tri_z = z[faces]
    lo = np.ceil(tri_uv.min(axis=1)).astype(np.int64)
    hi = np.floor(tri_uv.max(axis=1)).astype(np.int64)
    lo = np.maximum(lo, 0)
    hi[:, 0] = np.minimum(hi[:, 0], width - 1)
    hi[:, 1] = np.minimum(hi[:, 1], height - 1)
    for f in range(len(faces)):
        (x0, y0), (x1, y1), (x2, y2) = tri_uv[f]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if abs(area) < 1e-12 or hi[f, 0] < lo[f, 0] or hi[f, 1] < lo[f, 1]:
            continue
        px, py = np.meshgrid(
            np.arange(lo[f, 0], hi[f, 0] + 1), np.arange(lo[f, 1], hi[f, 1] + 1)
        )
        w0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) / area
        w1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        z0, z1, z2 = tri_z[f]
        d = 1.0 / (w0[inside] / z0 + w1[inside] / z1 + w2[inside] / z2)
        ys, xs = py[inside], px[inside]
        np.minimum.at(depth, (ys, xs), d)
    return depth


def rasterize_depth(uv, z, faces, width, height, use_numba=None):
    """Nearest-surface depth per pixel (inf where empty).

    ``uv`` are pixel coordinates of the vertices, ``z`` their camera-frame
    depths.  Pixel ``(x, y)`` is sampled at its integer center, matching the
    rounding used by the mask test.  Depth is interpolated perspective-correctly.
    """
    uv = np.ascontiguousarray(uv, dtype=np.float64)
    z = np.ascontiguousarray(z, dtype=np.float64)
    faces = np.ascontiguousarray(faces, dtype=np.int64)
    if use_numba is None:
        use_numba = USE_NUMBA
    if use_numba and HAS_NUMBA:
        return _raster_numba(uv, z, faces, int(width), int(height))
    return _raster_numpy(uv, z, faces, int(width), int(height))
