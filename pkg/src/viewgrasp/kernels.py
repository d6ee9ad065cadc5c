"""Hot numeric kernels.

Each public kernel has a vectorised numpy implementation and a loop-based
numba one; the public name points at the numba version when
:data:`viewgrasp._accel.HAS_NUMBA` is true. Both paths are tested against
each other and compared in ``benchmarks/bench_kernels.py``.

Link primitives are passed as flat arrays so that the compiled code needs no
Python objects:

``prim_link``   (K,) int   index of the owning link
``prim_type``   (K,) int   0 = capsule, 1 = box
``prim_a``      (K, 3)     capsule start, or box centre (link frame)
``prim_b``      (K, 3)     capsule end, or box half extents
``prim_radius`` (K,)       capsule radius (0 for boxes)
"""

from __future__ import annotations

import numpy as np

from ._accel import HAS_NUMBA, njit

CAPSULE = 0
BOX = 1

LOG_2PI = float(np.log(2.0 * np.pi))


# ---------------------------------------------------------------------------
# pose mixture densities


def pose_kernel_logmatrix(p, q, cp, cq, sigma_p, kappa, log_c4):
    """(M, N) matrix of log N3(p_m | cp_n) + log Theta(q_m | cq_n)."""
    d2 = (
        np.sum(p * p, axis=1)[:, None]
        + np.sum(cp * cp, axis=1)[None, :]
        - 2.0 * p @ cp.T
    )
    np.maximum(d2, 0.0, out=d2)
    dq = np.abs(q @ cq.T)
    lg = -0.5 * d2 / sigma_p**2 - 3.0 * np.log(sigma_p) - 1.5 * LOG_2PI
    lv = log_c4 + kappa * dq + np.log1p(np.exp(-2.0 * kappa * dq)) - np.log(2.0)
    return lg + lv


def _pose_mixture_logpdf_numpy(p, q, cp, cq, logw, sigma_p, kappa, log_c4, chunk=2048):
    out = np.empty(len(p))
    for s in range(0, len(p), chunk):
        m = pose_kernel_logmatrix(p[s : s + chunk], q[s : s + chunk], cp, cq, sigma_p, kappa, log_c4)
        m += logw[None, :]
        mx = np.max(m, axis=1)
        safe = np.where(np.isfinite(mx), mx, 0.0)
        out[s : s + chunk] = safe + np.log(np.sum(np.exp(m - safe[:, None]), axis=1))
    return out


@njit
def _pose_mixture_logpdf_jit(p, q, cp, cq, logw, sigma_p, kappa, log_c4):
    m = p.shape[0]
    n = cp.shape[0]
    out = np.empty(m)
    inv2s2 = 0.5 / (sigma_p * sigma_p)
    const = -3.0 * np.log(sigma_p) - 1.5 * LOG_2PI + log_c4 - np.log(2.0)
    for i in range(m):
        run_max = -np.inf
        acc = 0.0
        for j in range(n):
            if logw[j] == -np.inf:
                continue
            dx = p[i, 0] - cp[j, 0]
            dy = p[i, 1] - cp[j, 1]
            dz = p[i, 2] - cp[j, 2]
            d = abs(q[i, 0] * cq[j, 0] + q[i, 1] * cq[j, 1] + q[i, 2] * cq[j, 2] + q[i, 3] * cq[j, 3])
            t = logw[j] - (dx * dx + dy * dy + dz * dz) * inv2s2 + kappa * d + np.log1p(np.exp(-2.0 * kappa * d))
            if t > run_max:
                acc = acc * np.exp(run_max - t) + 1.0
                run_max = t
            else:
                acc += np.exp(t - run_max)
        if run_max == -np.inf:
            out[i] = -np.inf
        else:
            out[i] = run_max + np.log(acc) + const
    return out


def pose_mixture_logpdf(p, q, cp, cq, logw, sigma_p, kappa, log_c4):
    """log sum_j w_j N3(p | cp_j, sigma_p) Theta(q | cq_j, kappa) for each row."""
    p = np.ascontiguousarray(p, dtype=np.float64)
    q = np.ascontiguousarray(q, dtype=np.float64)
    cp = np.ascontiguousarray(cp, dtype=np.float64)
    cq = np.ascontiguousarray(cq, dtype=np.float64)
    logw = np.ascontiguousarray(logw, dtype=np.float64)
    if HAS_NUMBA:
        return _pose_mixture_logpdf_jit(p, q, cp, cq, logw, float(sigma_p), float(kappa), float(log_c4))
    return _pose_mixture_logpdf_numpy(p, q, cp, cq, logw, float(sigma_p), float(kappa), float(log_c4))


# ---------------------------------------------------------------------------
# link primitives


def _rotate_inv(q, v):
    # rotate v by conj(q); q (..., 4) scalar-last
    u = -q[..., :3]
    w = q[..., 3:4]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def primitive_sdf_local(x, ptype, a, b, radius):
    """Signed distance of link-frame points ``x`` (N, 3) to one primitive."""
    if ptype == CAPSULE:
        ab = b - a
        denom = float(ab @ ab)
        t = np.zeros(len(x)) if denom == 0 else np.clip((x - a) @ ab / denom, 0.0, 1.0)
        c = a + t[:, None] * ab
        return np.linalg.norm(x - c, axis=1) - radius
    d = np.abs(x - a) - b
    outside = np.linalg.norm(np.maximum(d, 0.0), axis=1)
    inside = np.minimum(np.max(d, axis=1), 0.0)
    return outside + inside


def links_sdf_numpy(points, link_p, link_q, prim_link, prim_type, prim_a, prim_b, prim_radius):
    """(K, N) signed distances of world points to every primitive."""
    out = np.empty((len(prim_link), len(points)))
    for k in range(len(prim_link)):
        li = prim_link[k]
        x = _rotate_inv(link_q[li], points - link_p[li])
        out[k] = primitive_sdf_local(x, prim_type[k], prim_a[k], prim_b[k], prim_radius[k])
    return out


def _batch_max_penetration_numpy(points, LP, LQ, prim_link, prim_type, prim_a, prim_b, prim_radius):
    out = np.zeros(len(LP))
    for c in range(len(LP)):
        sdf = links_sdf_numpy(points, LP[c], LQ[c], prim_link, prim_type, prim_a, prim_b, prim_radius)
        out[c] = max(0.0, float(-sdf.min())) if sdf.size else 0.0
    return out


@njit
def _sdf_point_jit(x0, x1, x2, ptype, a, b, radius):
    if ptype == 0:
        abx = b[0] - a[0]
        aby = b[1] - a[1]
        abz = b[2] - a[2]
        denom = abx * abx + aby * aby + abz * abz
        t = 0.0
        if denom > 0.0:
            t = ((x0 - a[0]) * abx + (x1 - a[1]) * aby + (x2 - a[2]) * abz) / denom
            if t < 0.0:
                t = 0.0
            elif t > 1.0:
                t = 1.0
        dx = x0 - (a[0] + t * abx)
        dy = x1 - (a[1] + t * aby)
        dz = x2 - (a[2] + t * abz)
        return np.sqrt(dx * dx + dy * dy + dz * dz) - radius
    d0 = abs(x0 - a[0]) - b[0]
    d1 = abs(x1 - a[1]) - b[1]
    d2 = abs(x2 - a[2]) - b[2]
    o0 = max(d0, 0.0)
    o1 = max(d1, 0.0)
    o2 = max(d2, 0.0)
    return np.sqrt(o0 * o0 + o1 * o1 + o2 * o2) + min(max(d0, max(d1, d2)), 0.0)


@njit
def _batch_max_penetration_jit(points, LP, LQ, prim_link, prim_type, prim_a, prim_b, prim_radius):
    nc = LP.shape[0]
    npts = points.shape[0]
    nk = prim_link.shape[0]
    out = np.zeros(nc)
    # bounding radius of each primitive about its reference point
    brad = np.empty(nk)
    bctr = np.empty((nk, 3))
    for k in range(nk):
        if prim_type[k] == 0:
            for j in range(3):
                bctr[k, j] = 0.5 * (prim_a[k, j] + prim_b[k, j])
            hx = 0.5 * (prim_b[k, 0] - prim_a[k, 0])
            hy = 0.5 * (prim_b[k, 1] - prim_a[k, 1])
            hz = 0.5 * (prim_b[k, 2] - prim_a[k, 2])
            brad[k] = np.sqrt(hx * hx + hy * hy + hz * hz) + prim_radius[k]
        else:
            for j in range(3):
                bctr[k, j] = prim_a[k, j]
            brad[k] = np.sqrt(prim_b[k, 0] ** 2 + prim_b[k, 1] ** 2 + prim_b[k, 2] ** 2)
    for c in range(nc):
        best = 0.0
        for k in range(nk):
            li = prim_link[k]
            qx = LQ[c, li, 0]
            qy = LQ[c, li, 1]
            qz = LQ[c, li, 2]
            qw = LQ[c, li, 3]
            # rotation matrix of q; local = R^T (x - p)
            r00 = 1 - 2 * (qy * qy + qz * qz)
            r01 = 2 * (qx * qy - qz * qw)
            r02 = 2 * (qx * qz + qy * qw)
            r10 = 2 * (qx * qy + qz * qw)
            r11 = 1 - 2 * (qx * qx + qz * qz)
            r12 = 2 * (qy * qz - qx * qw)
            r20 = 2 * (qx * qz - qy * qw)
            r21 = 2 * (qy * qz + qx * qw)
            r22 = 1 - 2 * (qx * qx + qy * qy)
            for i in range(npts):
                dx = points[i, 0] - LP[c, li, 0]
                dy = points[i, 1] - LP[c, li, 1]
                dz = points[i, 2] - LP[c, li, 2]
                x0 = r00 * dx + r10 * dy + r20 * dz
                x1 = r01 * dx + r11 * dy + r21 * dz
                x2 = r02 * dx + r12 * dy + r22 * dz
                ex = x0 - bctr[k, 0]
                ey = x1 - bctr[k, 1]
                ez = x2 - bctr[k, 2]
                if ex * ex + ey * ey + ez * ez > brad[k] * brad[k]:
                    continue
                s = _sdf_point_jit(x0, x1, x2, prim_type[k], prim_a[k], prim_b[k], prim_radius[k])
                if -s > best:
                    best = -s
        out[c] = best
    return out


def batch_max_penetration(points, LP, LQ, prim_link, prim_type, prim_a, prim_b, prim_radius):
    """Greatest depth of any cloud point inside any link, per candidate.

    ``LP`` (C, L, 3) and ``LQ`` (C, L, 4) are world link poses of C hands.
    """
    args = (
        np.ascontiguousarray(points, dtype=np.float64),
        np.ascontiguousarray(LP, dtype=np.float64),
        np.ascontiguousarray(LQ, dtype=np.float64),
        np.ascontiguousarray(prim_link, dtype=np.int64),
        np.ascontiguousarray(prim_type, dtype=np.int64),
        np.ascontiguousarray(prim_a, dtype=np.float64),
        np.ascontiguousarray(prim_b, dtype=np.float64),
        np.ascontiguousarray(prim_radius, dtype=np.float64),
    )
    if HAS_NUMBA:
        return _batch_max_penetration_jit(*args)
    return _batch_max_penetration_numpy(*args)


# ---------------------------------------------------------------------------
# radius-restricted nearest kernel via a voxel grid of candidate lists
#
# ``cand`` (G, K) holds, for every voxel, the indices of the K surface kernels
# nearest (by position) to the voxel centre, -1 padded. ``dims`` are the grid
# sizes along x, y, z and ``origin`` the corner of voxel (0, 0, 0).


def _restricted_nearest_numpy(px, nx, sp, sn, cand, origin, cell, dims, radius, w_lin, w_ang, cap):
    ijk = np.floor((px - origin) / cell).astype(np.int64)
    inside = np.all((ijk >= 0) & (ijk < dims), axis=1)
    flat = np.where(inside, (ijk[:, 0] * dims[1] + ijk[:, 1]) * dims[2] + ijk[:, 2], 0)
    c = np.where(inside[:, None], cand[flat], -1)
    valid = c >= 0
    safe = np.where(valid, c, 0)
    dp2 = np.sum((px[:, None, :] - sp[safe]) ** 2, axis=2)
    valid &= dp2 < radius * radius
    d = w_lin * dp2 + 0.5 * w_ang * np.sum((nx[:, None, :] - sn[safe]) ** 2, axis=2)
    d = np.where(valid, d, np.inf)
    best = np.argmin(d, axis=1)
    rows = np.arange(len(px))
    bd = d[rows, best]
    miss = ~np.isfinite(bd)
    return np.where(miss, cap, bd), np.where(miss, -1, c[rows, best])


@njit
def _restricted_nearest_jit(px, nx, sp, sn, cand, origin, cell, dims, radius, w_lin, w_ang, cap):
    n = px.shape[0]
    k = cand.shape[1]
    out = np.empty(n)
    idx = np.empty(n, dtype=np.int64)
    r2 = radius * radius
    for i in range(n):
        out[i] = cap
        idx[i] = -1
        g0 = int(np.floor((px[i, 0] - origin[0]) / cell))
        g1 = int(np.floor((px[i, 1] - origin[1]) / cell))
        g2 = int(np.floor((px[i, 2] - origin[2]) / cell))
        if g0 < 0 or g1 < 0 or g2 < 0 or g0 >= dims[0] or g1 >= dims[1] or g2 >= dims[2]:
            continue
        flat = (g0 * dims[1] + g1) * dims[2] + g2
        best = np.inf
        for t in range(k):
            j = cand[flat, t]
            if j < 0:
                break
            d0 = px[i, 0] - sp[j, 0]
            d1 = px[i, 1] - sp[j, 1]
            d2 = px[i, 2] - sp[j, 2]
            dp2 = d0 * d0 + d1 * d1 + d2 * d2
            if dp2 >= r2:
                continue
            e0 = nx[i, 0] - sn[j, 0]
            e1 = nx[i, 1] - sn[j, 1]
            e2 = nx[i, 2] - sn[j, 2]
            d = w_lin * dp2 + 0.5 * w_ang * (e0 * e0 + e1 * e1 + e2 * e2)
            if d < best:
                best = d
                idx[i] = j
        if idx[i] >= 0:
            out[i] = best
    return out, idx


def restricted_nearest(px, nx, sp, sn, cand, origin, cell, dims, radius, w_lin, w_ang, cap):
    """Smallest combined distance to a candidate kernel within ``radius``; ``cap`` when none."""
    args = (
        np.ascontiguousarray(px, dtype=np.float64),
        np.ascontiguousarray(nx, dtype=np.float64),
        np.ascontiguousarray(sp, dtype=np.float64),
        np.ascontiguousarray(sn, dtype=np.float64),
        np.ascontiguousarray(cand, dtype=np.int64),
        np.ascontiguousarray(origin, dtype=np.float64),
        float(cell),
        np.ascontiguousarray(dims, dtype=np.int64),
        float(radius),
        float(w_lin),
        float(w_ang),
        float(cap),
    )
    if HAS_NUMBA:
        return _restricted_nearest_jit(*args)
    return _restricted_nearest_numpy(*args)


def numpy_reference():
    """Mapping of public kernel names to their numpy implementations."""
    return {
        "pose_mixture_logpdf": _pose_mixture_logpdf_numpy,
        "batch_max_penetration": _batch_max_penetration_numpy,
        "restricted_nearest": _restricted_nearest_numpy,
    }


def jit_reference():
    return {
        "pose_mixture_logpdf": _pose_mixture_logpdf_jit,
        "batch_max_penetration": _batch_max_penetration_jit,
        "restricted_nearest": _restricted_nearest_jit,
    }
