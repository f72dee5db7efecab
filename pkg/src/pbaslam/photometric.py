"""Photometric residual of a point observation, its weights and Jacobians.

Frames passed here need ``pose`` (world-from-camera SE3), ``affine``
(:class:`AffineBrightness`) and either ``pyramid`` or ``image``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import InvalidObservation
from .geometry import pixel_to_level, relative
from .image import PATTERN

GRAD_C = 50.0
BORDER_MARGIN = 3.0


@dataclass(frozen=True)
class AffineBrightness:
    a: float = 0.0
    b: float = 0.0


@dataclass
class ResidualEval:
    r: float
    wg: float
    valid: bool
    J_host: np.ndarray       # 6, left twist (w, v) on the host pose
    J_target: np.ndarray     # 6
    J_rho: float
    J_aff: np.ndarray        # a_i, b_i, a_j, b_j


def gradient_weight(grad, c=GRAD_C):
    if not c > 0:
        raise ValueError("c must be positive")
    g2 = float(np.dot(grad, grad))
    return c * c / (c * c + g2)


def frame_image(frame, level=0):
    pyr = getattr(frame, "pyramid", None)
    return pyr[level] if pyr is not None else frame.image


def _host_samples(img, uv):
    """Bilinear host intensities and gradient weights at the pattern around ``uv``."""
    xs = uv[0] + PATTERN[:, 0]
    ys = uv[1] + PATTERN[:, 1]
    gx, gy = img.gradients
    vals, grad, ok = kernels.sample_many(img.data, gx, gy, xs, ys, margin=BORDER_MARGIN)
    return vals, grad, ok


def linearize_observation(host, target, cam, point_pixel, rho, level=0, c=GRAD_C, backend=None):
    """All 8 pattern residuals of one observation.

    Returns ``(r, valid, wg, J_pose, J_rho, J_aff)`` as produced by
    :func:`kernels.linearize`, with ``wg`` the host-gradient weight.
    """
    cam_l = cam.at_level(level)
    uv = pixel_to_level(np.asarray(point_pixel, dtype=float), level)
    himg, timg = frame_image(host, level), frame_image(target, level)
    vals, grad, ok = _host_samples(himg, uv)
    T_ji = relative(target.pose, host.pose)
    gx, gy = timg.gradients
    alpha = np.exp(host.affine.a - target.affine.a)
    r, valid, J_pose, J_rho, J_aff = kernels.linearize(
        timg.data[None], gx[None], gy[None], PATTERN, uv[None], np.array([float(rho)]),
        vals[None], ok[None], np.zeros(1, np.int64), np.zeros(1, np.int64),
        T_ji.R[None], T_ji.t[None], target.pose.R[None], target.pose.t[None],
        np.array([alpha]), np.array([host.affine.b]), np.array([target.affine.b]),
        cam_l.fx, cam_l.fy, cam_l.cx, cam_l.cy, BORDER_MARGIN, backend=backend)
    wg = c * c / (c * c + np.sum(grad * grad, axis=1))
    return r[0], valid[0], wg, J_pose[0], J_rho[0], J_aff[0]


def residual(host, target, cam, point_pixel, rho, offset, level=0, c=GRAD_C):
    """Residual of the pattern pixel with the given ``offset`` (one of PATTERN)."""
    match = np.nonzero((PATTERN == np.asarray(offset, dtype=float)).all(axis=1))[0]
    if len(match) == 0:
        raise ValueError(f"offset {offset} is not part of the residual pattern")
    k = int(match[0])
    r, valid, wg, J_pose, J_rho, J_aff = linearize_observation(
        host, target, cam, point_pixel, rho, level=level, c=c)
    return ResidualEval(float(r[k]), float(wg[k]), bool(valid[k]), J_pose[k].copy(),
                        -J_pose[k], float(J_rho[k]), J_aff[k].copy())


residual_jacobian = residual


def point_energy(host, target, cam, point, rho=None, weight_fn=None, level=0, c=GRAD_C):
    """Sum of w_k r_k^2 over the valid pattern pixels, and the number of valid pixels.

    ``point`` is either a pixel (with ``rho`` given) or an object with
    ``pixel`` and ``rho`` attributes.  ``weight_fn(r)`` supplies the robust
    factor (1 when omitted).
    """
    if rho is None:
        point, rho = point.pixel, point.rho
    r, valid, wg, *_ = linearize_observation(host, target, cam, point, rho, level=level, c=c)
    if not valid.any():
        raise InvalidObservation("no pattern pixel projects inside the target")
    rv = r[valid]
    wr = np.ones_like(rv) if weight_fn is None else np.asarray(weight_fn(rv), dtype=float)
    return float(np.sum(wr * wg[valid] * rv * rv)), int(valid.sum())
