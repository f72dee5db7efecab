"""Hot inner loops, each with a numba and a pure-numpy implementation.

The numba path is used when numba imports and ``PBASLAM_NO_NUMBA`` is unset
(or ``0``).  Every public function takes ``backend=None|"numba"|"numpy"`` so
both paths can be exercised side by side; results agree to rounding.
"""
from __future__ import annotations

import os

import numpy as np
import scipy.sparse as sp

try:
    import numba
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f
        return wrap if not (args and callable(args[0])) else args[0]

USE_NUMBA = HAVE_NUMBA and os.environ.get("PBASLAM_NO_NUMBA", "0") in ("", "0")

BACKENDS = ("numba", "numpy") if HAVE_NUMBA else ("numpy",)


def _pick(backend):
    if backend is None:
        return "numba" if USE_NUMBA else "numpy"
    if backend not in BACKENDS:
        raise ValueError(f"backend {backend!r} unavailable")
    return backend


# --------------------------------------------------------------------------
# bilinear sampling of an image and its gradients at many points

@njit(cache=True)
def _sample_nb(img, gx, gy, xs, ys, margin, with_grad):
    n = xs.shape[0]
    h, w = img.shape
    val = np.zeros(n)
    grad = np.zeros((n, 2))
    ok = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        x, y = xs[i], ys[i]
        if not (x >= margin and y >= margin and x <= w - 1 - margin and y <= h - 1 - margin):
            continue
        x0 = min(int(np.floor(x)), w - 2)
        y0 = min(int(np.floor(y)), h - 2)
        fx, fy = x - x0, y - y0
        w00 = (1 - fx) * (1 - fy)
        w10 = fx * (1 - fy)
        w01 = (1 - fx) * fy
        w11 = fx * fy
        val[i] = (w00 * img[y0, x0] + w10 * img[y0, x0 + 1]
                  + w01 * img[y0 + 1, x0] + w11 * img[y0 + 1, x0 + 1])
        if with_grad:
            grad[i, 0] = (w00 * gx[y0, x0] + w10 * gx[y0, x0 + 1]
                          + w01 * gx[y0 + 1, x0] + w11 * gx[y0 + 1, x0 + 1])
            grad[i, 1] = (w00 * gy[y0, x0] + w10 * gy[y0, x0 + 1]
                          + w01 * gy[y0 + 1, x0] + w11 * gy[y0 + 1, x0 + 1])
        ok[i] = True
    return val, grad, ok


def _sample_np(img, gx, gy, xs, ys, margin, with_grad):
    h, w = img.shape
    ok = (xs >= margin) & (ys >= margin) & (xs <= w - 1 - margin) & (ys <= h - 1 - margin)
    x = np.where(ok, xs, 0.0)
    y = np.where(ok, ys, 0.0)
    x0 = np.minimum(np.floor(x).astype(np.int64), w - 2)
    y0 = np.minimum(np.floor(y).astype(np.int64), h - 2)
    fx, fy = x - x0, y - y0
    w00 = (1 - fx) * (1 - fy)
    w10 = fx * (1 - fy)
    w01 = (1 - fx) * fy
    w11 = fx * fy

    def interp(a):
        return (w00 * a[y0, x0] + w10 * a[y0, x0 + 1]
                + w01 * a[y0 + 1, x0] + w11 * a[y0 + 1, x0 + 1])

    val = np.where(ok, interp(img), 0.0)
    grad = np.zeros((len(xs), 2))
    if with_grad:
        grad[:, 0] = np.where(ok, interp(gx), 0.0)
        grad[:, 1] = np.where(ok, interp(gy), 0.0)
    return val, grad, ok


def sample_many(img, gx, gy, xs, ys, margin=0.0, with_grad=True, backend=None):
    """Bilinear intensity (and gradient) at points; ``ok`` marks in-bounds samples."""
    xs = np.ascontiguousarray(xs, dtype=np.float64).ravel()
    ys = np.ascontiguousarray(ys, dtype=np.float64).ravel()
    if _pick(backend) == "numba":
        return _sample_nb(img, gx, gy, xs, ys, float(margin), bool(with_grad))
    return _sample_np(img, gx, gy, xs, ys, float(margin), bool(with_grad))


# --------------------------------------------------------------------------
# photometric residuals and Jacobians for a batch of observations
#
# For observation o of point p (host i, target j) and pattern pixel k:
#   r = (I_i[u_k] - b_i) - alpha * (I_j[u'_k] - b_j),  alpha = exp(a_i - a_j)
# J_pose: derivative w.r.t. a left twist (w, v) on the host pose; the target
# pose derivative is exactly its negative.  J_aff columns: a_i, b_i, a_j, b_j.

@njit(cache=True)
def _linearize_nb(images, gxs, gys, pattern, pt_uv, rho, host_vals, host_ok,
                  obs_point, obs_target, R_ji, t_ji, R_j, t_j, alpha, b_i, b_j,
                  fx, fy, cx, cy, margin):
    n_obs = obs_point.shape[0]
    n_pat = pattern.shape[0]
    h, w = images.shape[1], images.shape[2]
    r = np.zeros((n_obs, n_pat))
    valid = np.zeros((n_obs, n_pat), dtype=np.bool_)
    J_pose = np.zeros((n_obs, n_pat, 6))
    J_rho = np.zeros((n_obs, n_pat))
    J_aff = np.zeros((n_obs, n_pat, 4))
    for o in range(n_obs):
        p = obs_point[o]
        tg = obs_target[o]
        img = images[tg]
        gx = gxs[tg]
        gy = gys[tg]
        rh = rho[p]
        al = alpha[o]
        for k in range(n_pat):
            if not host_ok[p, k]:
                continue
            qx = (pt_uv[p, 0] + pattern[k, 0] - cx) / fx
            qy = (pt_uv[p, 1] + pattern[k, 1] - cy) / fy
            # p_h = q / rho ; p_t = R_ji p_h + t_ji
            X = (R_ji[o, 0, 0] * qx + R_ji[o, 0, 1] * qy + R_ji[o, 0, 2]) / rh + t_ji[o, 0]
            Y = (R_ji[o, 1, 0] * qx + R_ji[o, 1, 1] * qy + R_ji[o, 1, 2]) / rh + t_ji[o, 1]
            Z = (R_ji[o, 2, 0] * qx + R_ji[o, 2, 1] * qy + R_ji[o, 2, 2]) / rh + t_ji[o, 2]
            if Z <= 1e-9:
                continue
            iz = 1.0 / Z
            u = fx * X * iz + cx
            v = fy * Y * iz + cy
            if not (u >= margin and v >= margin and u <= w - 1 - margin and v <= h - 1 - margin):
                continue
            x0 = min(int(np.floor(u)), w - 2)
            y0 = min(int(np.floor(v)), h - 2)
            ax, ay = u - x0, v - y0
            w00 = (1 - ax) * (1 - ay)
            w10 = ax * (1 - ay)
            w01 = (1 - ax) * ay
            w11 = ax * ay
            Ij = (w00 * img[y0, x0] + w10 * img[y0, x0 + 1]
                  + w01 * img[y0 + 1, x0] + w11 * img[y0 + 1, x0 + 1])
            g0 = (w00 * gx[y0, x0] + w10 * gx[y0, x0 + 1]
                  + w01 * gx[y0 + 1, x0] + w11 * gx[y0 + 1, x0 + 1])
            g1 = (w00 * gy[y0, x0] + w10 * gy[y0, x0 + 1]
                  + w01 * gy[y0 + 1, x0] + w11 * gy[y0 + 1, x0 + 1])
            valid[o, k] = True
            r[o, k] = (host_vals[p, k] - b_i[o]) - al * (Ij - b_j[o])
            # d r / d p_t
            du = -al * g0
            dv = -al * g1
            d0 = du * fx * iz
            d1 = dv * fy * iz
            d2 = -(du * fx * X + dv * fy * Y) * iz * iz
            # e = R_j d ; p_w = R_j p_t + t_j
            e0 = R_j[o, 0, 0] * d0 + R_j[o, 0, 1] * d1 + R_j[o, 0, 2] * d2
            e1 = R_j[o, 1, 0] * d0 + R_j[o, 1, 1] * d1 + R_j[o, 1, 2] * d2
            e2 = R_j[o, 2, 0] * d0 + R_j[o, 2, 1] * d1 + R_j[o, 2, 2] * d2
            pw0 = R_j[o, 0, 0] * X + R_j[o, 0, 1] * Y + R_j[o, 0, 2] * Z + t_j[o, 0]
            pw1 = R_j[o, 1, 0] * X + R_j[o, 1, 1] * Y + R_j[o, 1, 2] * Z + t_j[o, 1]
            pw2 = R_j[o, 2, 0] * X + R_j[o, 2, 1] * Y + R_j[o, 2, 2] * Z + t_j[o, 2]
            J_pose[o, k, 0] = pw1 * e2 - pw2 * e1
            J_pose[o, k, 1] = pw2 * e0 - pw0 * e2
            J_pose[o, k, 2] = pw0 * e1 - pw1 * e0
            J_pose[o, k, 3] = e0
            J_pose[o, k, 4] = e1
            J_pose[o, k, 5] = e2
            # d p_t / d rho = -R_ji q / rho^2
            s = -1.0 / (rh * rh)
            dX = (R_ji[o, 0, 0] * qx + R_ji[o, 0, 1] * qy + R_ji[o, 0, 2]) * s
            dY = (R_ji[o, 1, 0] * qx + R_ji[o, 1, 1] * qy + R_ji[o, 1, 2]) * s
            dZ = (R_ji[o, 2, 0] * qx + R_ji[o, 2, 1] * qy + R_ji[o, 2, 2]) * s
            J_rho[o, k] = d0 * dX + d1 * dY + d2 * dZ
            J_aff[o, k, 0] = -al * (Ij - b_j[o])
            J_aff[o, k, 1] = -1.0
            J_aff[o, k, 2] = al * (Ij - b_j[o])
            J_aff[o, k, 3] = al
    return r, valid, J_pose, J_rho, J_aff


def _linearize_np(images, gxs, gys, pattern, pt_uv, rho, host_vals, host_ok,
                  obs_point, obs_target, R_ji, t_ji, R_j, t_j, alpha, b_i, b_j,
                  fx, fy, cx, cy, margin):
    n_obs, n_pat = len(obs_point), len(pattern)
    h, w = images.shape[1:]
    uv = pt_uv[obs_point][:, None, :] + pattern[None, :, :]          # (O, K, 2)
    q = np.stack([(uv[..., 0] - cx) / fx, (uv[..., 1] - cy) / fy, np.ones((n_obs, n_pat))], -1)
    rh = rho[obs_point][:, None, None]
    Rq = np.einsum("oij,okj->oki", R_ji, q)
    pt = Rq / rh + t_ji[:, None, :]
    X, Y, Z = pt[..., 0], pt[..., 1], pt[..., 2]
    front = Z > 1e-9
    Zs = np.where(front, Z, 1.0)
    iz = 1.0 / Zs
    u = fx * X * iz + cx
    v = fy * Y * iz + cy
    ok = (front & host_ok[obs_point] & (u >= margin) & (v >= margin)
          & (u <= w - 1 - margin) & (v <= h - 1 - margin))
    us = np.where(ok, u, 0.0)
    vs = np.where(ok, v, 0.0)
    x0 = np.minimum(np.floor(us).astype(np.int64), w - 2)
    y0 = np.minimum(np.floor(vs).astype(np.int64), h - 2)
    ax, ay = us - x0, vs - y0
    tg = np.broadcast_to(obs_target[:, None], x0.shape)

    def interp(a):
        return ((1 - ax) * (1 - ay) * a[tg, y0, x0] + ax * (1 - ay) * a[tg, y0, x0 + 1]
                + (1 - ax) * ay * a[tg, y0 + 1, x0] + ax * ay * a[tg, y0 + 1, x0 + 1])

    Ij = interp(images)
    g0, g1 = interp(gxs), interp(gys)
    al = alpha[:, None]
    res = (host_vals[obs_point] - b_i[:, None]) - al * (Ij - b_j[:, None])
    du, dv = -al * g0, -al * g1
    d = np.stack([du * fx * iz, dv * fy * iz, -(du * fx * X + dv * fy * Y) * iz * iz], -1)
    e = np.einsum("oij,okj->oki", R_j, d)
    pw = np.einsum("oij,okj->oki", R_j, pt) + t_j[:, None, :]
    J_pose = np.concatenate([np.cross(pw, e), e], axis=-1)
    J_rho = np.einsum("oki,oki->ok", d, -Rq / rh ** 2)
    ij = al * (Ij - b_j[:, None])
    J_aff = np.stack([-ij, -np.ones_like(ij), ij, np.broadcast_to(al, ij.shape)], -1)
    z = ~ok
    res[z] = 0.0
    J_pose[z] = 0.0
    J_rho[z] = 0.0
    J_aff[z] = 0.0
    return res, ok, J_pose, J_rho, J_aff


def linearize(images, gxs, gys, pattern, pt_uv, rho, host_vals, host_ok,
              obs_point, obs_target, R_ji, t_ji, R_j, t_j, alpha, b_i, b_j,
              fx, fy, cx, cy, margin, backend=None):
    """Residuals, validity and Jacobian blocks for every (observation, pattern pixel)."""
    args = (images, gxs, gys, np.ascontiguousarray(pattern, dtype=np.float64),
            pt_uv, rho, host_vals, host_ok,
            obs_point.astype(np.int64), obs_target.astype(np.int64),
            R_ji, t_ji, R_j, t_j, alpha, b_i, b_j,
            float(fx), float(fy), float(cx), float(cy), float(margin))
    if _pick(backend) == "numba":
        return _linearize_nb(*args)
    return _linearize_np(*args)


# --------------------------------------------------------------------------
# normal equations in camera / point blocks
#
# Camera block layout: 8 parameters per active keyframe (twist 6, a, b).

@njit(cache=True)
def _accumulate_nb(wts, r, J_pose, J_rho, J_aff, obs_host_cam, obs_target_cam,
                   obs_point_var, n_cam, n_pts):
    nc = 8 * n_cam
    Hcc = np.zeros((nc, nc))
    Hcp = np.zeros((nc, n_pts))
    Hpp = np.zeros(n_pts)
    bc = np.zeros(nc)
    bp = np.zeros(n_pts)
    jc = np.zeros(16)
    idx = np.zeros(16, dtype=np.int64)
    n_obs, n_pat = r.shape
    for o in range(n_obs):
        hc = obs_host_cam[o]
        tc = obs_target_cam[o]
        pv = obs_point_var[o]
        for k in range(n_pat):
            wk = wts[o, k]
            if wk == 0.0:
                continue
            m = 0
            if hc >= 0:
                for a in range(6):
                    jc[m] = J_pose[o, k, a]
                    idx[m] = 8 * hc + a
                    m += 1
                jc[m] = J_aff[o, k, 0]
                idx[m] = 8 * hc + 6
                m += 1
                jc[m] = J_aff[o, k, 1]
                idx[m] = 8 * hc + 7
                m += 1
            if tc >= 0:
                for a in range(6):
                    jc[m] = -J_pose[o, k, a]
                    idx[m] = 8 * tc + a
                    m += 1
                jc[m] = J_aff[o, k, 2]
                idx[m] = 8 * tc + 6
                m += 1
                jc[m] = J_aff[o, k, 3]
                idx[m] = 8 * tc + 7
                m += 1
            rk = r[o, k]
            for a in range(m):
                wa = wk * jc[a]
                bc[idx[a]] += wa * rk
                for b in range(m):
                    Hcc[idx[a], idx[b]] += wa * jc[b]
            if pv >= 0:
                jp = J_rho[o, k]
                wp = wk * jp
                Hpp[pv] += wp * jp
                bp[pv] += wp * rk
                for a in range(m):
                    Hcp[idx[a], pv] += wp * jc[a]
    return Hcc, Hcp, Hpp, bc, bp


def jacobian_matrix(r, J_pose, J_rho, J_aff, obs_host_cam, obs_target_cam, obs_point_var,
                    n_cam, n_pts):
    """Sparse Jacobian with columns [8 per camera | 1 per point] and one row per residual."""
    n_obs, n_pat = r.shape
    rows = np.arange(n_obs * n_pat).reshape(n_obs, n_pat)
    R, C, V = [], [], []

    def add(cam_idx, block):
        sel = cam_idx >= 0
        if not np.any(sel):
            return
        cols = 8 * cam_idx[sel][:, None, None] + np.arange(8)[None, None, :]
        R.append(np.broadcast_to(rows[sel][..., None], block[sel].shape).ravel())
        C.append(np.broadcast_to(cols, block[sel].shape).ravel())
        V.append(block[sel].ravel())

    add(obs_host_cam, np.concatenate([J_pose, J_aff[..., 0:2]], axis=-1))
    add(obs_target_cam, np.concatenate([-J_pose, J_aff[..., 2:4]], axis=-1))
    sel = obs_point_var >= 0
    R.append(rows[sel].ravel())
    C.append(np.broadcast_to(8 * n_cam + obs_point_var[sel][:, None], rows[sel].shape).ravel())
    V.append(J_rho[sel].ravel())
    R, C, V = np.concatenate(R), np.concatenate(C), np.concatenate(V)
    return sp.csr_matrix((V, (R, C)), shape=(n_obs * n_pat, 8 * n_cam + n_pts))


def _accumulate_np(wts, r, J_pose, J_rho, J_aff, obs_host_cam, obs_target_cam,
                   obs_point_var, n_cam, n_pts):
    J = jacobian_matrix(r, J_pose, J_rho, J_aff, obs_host_cam, obs_target_cam,
                        obs_point_var, n_cam, n_pts)
    wv = wts.ravel()
    JtW = (J.T.multiply(wv[None, :])).tocsr()
    H = (JtW @ J).toarray()
    g = JtW @ r.ravel()
    nc = 8 * n_cam
    return H[:nc, :nc], H[:nc, nc:], np.diag(H)[nc:].copy(), g[:nc], g[nc:]


def accumulate(wts, r, J_pose, J_rho, J_aff, obs_host_cam, obs_target_cam, obs_point_var,
               n_cam, n_pts, backend=None):
    """Blocks of J^T W J and J^T W r: (Hcc, Hcp, Hpp diagonal, bc, bp)."""
    args = (np.ascontiguousarray(wts, dtype=np.float64), r, J_pose, J_rho, J_aff,
            obs_host_cam.astype(np.int64), obs_target_cam.astype(np.int64),
            obs_point_var.astype(np.int64), int(n_cam), int(n_pts))
    if _pick(backend) == "numba":
        return _accumulate_nb(*args)
    return _accumulate_np(*args)


# --------------------------------------------------------------------------
# nearest-projection distances on a grid

@njit(cache=True)
def _distance_grid_nb(gx, gy, pts):
    out = np.empty((gy.shape[0], gx.shape[0]))
    n = pts.shape[0]
    for j in range(gy.shape[0]):
        for i in range(gx.shape[0]):
            best = np.inf
            for p in range(n):
                dx = gx[i] - pts[p, 0]
                dy = gy[j] - pts[p, 1]
                d = dx * dx + dy * dy
                if d < best:
                    best = d
            out[j, i] = np.sqrt(best)
    return out


def _distance_grid_np(gx, gy, pts):
    from scipy.spatial import cKDTree
    X, Y = np.meshgrid(gx, gy)
    d, _ = cKDTree(pts).query(np.stack([X.ravel(), Y.ravel()], 1))
    return d.reshape(X.shape)


def distance_grid(gx, gy, pts, backend=None):
    """Exact distance from every grid node (gx[i], gy[j]) to the nearest of ``pts``."""
    pts = np.ascontiguousarray(pts, dtype=np.float64).reshape(-1, 2)
    gx = np.ascontiguousarray(gx, dtype=np.float64)
    gy = np.ascontiguousarray(gy, dtype=np.float64)
    if len(pts) == 0:
        return np.full((len(gy), len(gx)), np.inf)
    if _pick(backend) == "numba":
        return _distance_grid_nb(gx, gy, pts)
    return _distance_grid_np(gx, gy, pts)


# --------------------------------------------------------------------------
# epipolar line costs

@njit(cache=True)
def _epipolar_costs_nb(img, host_vals, line_x, line_y, pattern, alpha, b_h, b_t, margin):
    """Patch SSD at every sample of every candidate's epipolar line (inf if off-image)."""
    n_c, n_s = line_x.shape
    n_pat = pattern.shape[0]
    h, w = img.shape
    cost = np.full((n_c, n_s), np.inf)
    for c in range(n_c):
        for s in range(n_s):
            cx = line_x[c, s]
            cy = line_y[c, s]
            if not np.isfinite(cx):
                continue
            acc = 0.0
            good = True
            for k in range(n_pat):
                x = cx + pattern[k, 0]
                y = cy + pattern[k, 1]
                if not (x >= margin and y >= margin and x <= w - 1 - margin and y <= h - 1 - margin):
                    good = False
                    break
                x0 = min(int(np.floor(x)), w - 2)
                y0 = min(int(np.floor(y)), h - 2)
                ax, ay = x - x0, y - y0
                v = ((1 - ax) * (1 - ay) * img[y0, x0] + ax * (1 - ay) * img[y0, x0 + 1]
                     + (1 - ax) * ay * img[y0 + 1, x0] + ax * ay * img[y0 + 1, x0 + 1])
                res = (host_vals[c, k] - b_h) - alpha * (v - b_t)
                acc += res * res
            if good:
                cost[c, s] = acc
    return cost


def _epipolar_costs_np(img, host_vals, line_x, line_y, pattern, alpha, b_h, b_t, margin):
    h, w = img.shape
    x = line_x[..., None] + pattern[:, 0]
    y = line_y[..., None] + pattern[:, 1]
    fin = np.isfinite(x) & np.isfinite(y)
    inb = fin & (x >= margin) & (y >= margin) & (x <= w - 1 - margin) & (y <= h - 1 - margin)
    xs = np.where(inb, x, 0.0)
    ys = np.where(inb, y, 0.0)
    x0 = np.minimum(np.floor(xs).astype(np.int64), w - 2)
    y0 = np.minimum(np.floor(ys).astype(np.int64), h - 2)
    ax, ay = xs - x0, ys - y0
    v = ((1 - ax) * (1 - ay) * img[y0, x0] + ax * (1 - ay) * img[y0, x0 + 1]
         + (1 - ax) * ay * img[y0 + 1, x0] + ax * ay * img[y0 + 1, x0 + 1])
    res = (host_vals[:, None, :] - b_h) - alpha * (v - b_t)
    cost = np.sum(res * res, axis=-1)
    return np.where(inb.all(axis=-1), cost, np.inf)


def epipolar_costs(img, host_vals, line_x, line_y, pattern, alpha, b_h, b_t, margin,
                   backend=None):
    args = (img, np.ascontiguousarray(host_vals, dtype=np.float64),
            np.ascontiguousarray(line_x, dtype=np.float64),
            np.ascontiguousarray(line_y, dtype=np.float64),
            np.ascontiguousarray(pattern, dtype=np.float64),
            float(alpha), float(b_h), float(b_t), float(margin))
    if _pick(backend) == "numba":
        return _epipolar_costs_nb(*args)
    return _epipolar_costs_np(*args)


# --------------------------------------------------------------------------
# sub-pixel refinement of an epipolar match

@njit(cache=True)
def _bilin(data, x, y):
    h, w = data.shape
    x0 = min(max(int(np.floor(x)), 0), w - 2)
    y0 = min(max(int(np.floor(y)), 0), h - 2)
    fx, fy = x - x0, y - y0
    return ((1 - fy) * ((1 - fx) * data[y0, x0] + fx * data[y0, x0 + 1])
            + fy * ((1 - fx) * data[y0 + 1, x0] + fx * data[y0 + 1, x0 + 1]))


@njit(cache=True)
def _line_residual_nb(img, target, pattern, ux, uy, alpha, b_t, r):
    h, w = img.shape
    c = 0.0
    for k in range(pattern.shape[0]):
        x = ux + pattern[k, 0]
        y = uy + pattern[k, 1]
        if x < 2 or y < 2 or x > w - 3 or y > h - 3:
            return -1.0
        r[k] = target[k] - alpha * (_bilin(img, x, y) - b_t)
        c += r[k] * r[k]
    return c


@njit(cache=True)
def _refine_line_nb(img, gx, gy, target, pattern, u, e, alpha, b_t, max_offset, iters):
    n = pattern.shape[0]
    r = np.empty(n)
    r_new = np.empty(n)
    c = _line_residual_nb(img, target, pattern, u[0], u[1], alpha, b_t, r)
    if c < 0:
        return 0.0
    tau = 0.0
    for _ in range(iters):
        H = 0.0
        g = 0.0
        for k in range(n):
            x = u[0] + tau * e[0] + pattern[k, 0]
            y = u[1] + tau * e[1] + pattern[k, 1]
            J = -alpha * (_bilin(gx, x, y) * e[0] + _bilin(gy, x, y) * e[1])
            H += J * J
            g += J * r[k]
        if H <= 1e-12:
            break
        d = min(max(-g / H, -0.5), 0.5)
        if abs(tau + d) > max_offset:
            break
        c_new = _line_residual_nb(img, target, pattern, u[0] + (tau + d) * e[0], u[1] + (tau + d) * e[1],
                                  alpha, b_t, r_new)
        if c_new < 0 or not c_new < c:
            break
        tau += d
        c = c_new
        r[:] = r_new
        if abs(d) < 1e-3:
            break
    return tau


def _refine_line_np(img, gx, gy, target, pattern, u, e, alpha, b_t, max_offset, iters):
    h, w = img.shape

    def bilin(data, x, y):
        x0 = np.clip(np.floor(x).astype(np.int64), 0, w - 2)
        y0 = np.clip(np.floor(y).astype(np.int64), 0, h - 2)
        fx, fy = x - x0, y - y0
        return ((1 - fy) * ((1 - fx) * data[y0, x0] + fx * data[y0, x0 + 1])
                + fy * ((1 - fx) * data[y0 + 1, x0] + fx * data[y0 + 1, x0 + 1]))

    def residual(tau):
        x = u[0] + tau * e[0] + pattern[:, 0]
        y = u[1] + tau * e[1] + pattern[:, 1]
        if x.min() < 2 or y.min() < 2 or x.max() > w - 3 or y.max() > h - 3:
            return None
        return target - alpha * (bilin(img, x, y) - b_t), x, y

    out = residual(0.0)
    if out is None:
        return 0.0
    r, x, y = out
    tau, c = 0.0, float(r @ r)
    for _ in range(iters):
        J = -alpha * (bilin(gx, x, y) * e[0] + bilin(gy, x, y) * e[1])
        H = float(J @ J)
        if H <= 1e-12:
            break
        d = min(max(-float(J @ r) / H, -0.5), 0.5)
        if abs(tau + d) > max_offset:
            break
        out = residual(tau + d)
        if out is None:
            break
        c_new = float(out[0] @ out[0])
        if not c_new < c:
            break
        tau, c = tau + d, c_new
        r, x, y = out
        if abs(d) < 1e-3:
            break
    return tau


def refine_line(img, gx, gy, host_vals, pattern, u, e, alpha, b_h, b_t, max_offset, iters=3, backend=None):
    """Gauss-Newton offset (pixels along unit direction ``e``) of a pattern match at ``u``.

    Steps are capped at half a pixel, kept only while the SSD drops, and the
    total offset stays within ``max_offset``.
    """
    args = (img, gx, gy, np.ascontiguousarray(host_vals, dtype=np.float64) - b_h,
            np.ascontiguousarray(pattern, dtype=np.float64), np.asarray(u, dtype=np.float64),
            np.asarray(e, dtype=np.float64), float(alpha), float(b_t), float(max_offset), int(iters))
    if _pick(backend) == "numba":
        return float(_refine_line_nb(*args))
    return float(_refine_line_np(*args))
