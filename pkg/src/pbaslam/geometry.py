"""Rigid and similarity transforms, the pinhole camera, inverse-depth points.

Poses are stored world-from-camera: ``T.act(p_cam)`` gives world coordinates.
Twists are ordered ``(w, v)``: rotational part first, translational second.
Increments are applied on the left, ``T_new = se3_exp(delta) @ T``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DegenerateInput, InvalidInverseDepth, ProjectionError

SMALL_ANGLE = 1e-8
# below this the V / V^-1 coefficients lose all precision to cancellation
SERIES_ANGLE = 1e-3


def hat(w):
    return np.array([[0.0, -w[2], w[1]],
                     [w[2], 0.0, -w[0]],
                     [-w[1], w[0], 0.0]])


def vee(W):
    return np.array([W[2, 1], W[0, 2], W[1, 0]])


def so3_exp(w):
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    W = hat(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) + W + 0.5 * W @ W
    return (np.eye(3) + np.sin(theta) / theta * W
            + (1.0 - np.cos(theta)) / theta ** 2 * W @ W)


def so3_log(R):
    R = np.asarray(R, dtype=float)
    cos_t = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    axis_sin = 0.5 * vee(R - R.T)
    sin_t = float(np.linalg.norm(axis_sin))
    theta = float(np.arctan2(sin_t, cos_t))
    if np.pi - theta < 1e-6:
        raise DegenerateInput("rotation angle at pi, logarithm is ambiguous")
    if theta < SMALL_ANGLE:
        return axis_sin * (1.0 + theta ** 2 / 6.0)
    return axis_sin * (theta / sin_t)


def _left_jacobian(w):
    theta = float(np.linalg.norm(w))
    W = hat(w)
    t2 = theta * theta
    if theta < SERIES_ANGLE:
        a = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
        b = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    else:
        a = (1.0 - np.cos(theta)) / t2
        b = (theta - np.sin(theta)) / (t2 * theta)
    return np.eye(3) + a * W + b * W @ W


def _left_jacobian_inv(w):
    theta = float(np.linalg.norm(w))
    W = hat(w)
    t2 = theta * theta
    if theta < SERIES_ANGLE:
        coef = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    else:
        coef = (1.0 - theta * np.sin(theta) / (2.0 * (1.0 - np.cos(theta)))) / t2
    return np.eye(3) - 0.5 * W + coef * W @ W


@dataclass(frozen=True, eq=False)
class SE3:
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.R, dtype=float)
        t = np.array(self.t, dtype=float).reshape(3)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3])

    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    def inverse(self):
        Rt = self.R.T
        return SE3(Rt, -Rt @ self.t)

    def __matmul__(self, other):
        if isinstance(other, SE3):
            return SE3(self.R @ other.R, self.R @ other.t + self.t)
        return NotImplemented

    def act(self, p):
        """Transform points of shape (3,) or (N, 3)."""
        p = np.asarray(p, dtype=float)
        return p @ self.R.T + self.t

    @property
    def center(self):
        """Camera center in the parent frame (for world-from-camera poses)."""
        return self.t.copy()

    def normalized(self):
        """Same pose with the rotation projected back onto SO(3)."""
        U, _, Vt = np.linalg.svd(self.R)
        R = U @ Vt
        if np.linalg.det(R) < 0:
            R = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
        return SE3(R, self.t)

    def allclose(self, other, atol=1e-9):
        return (np.allclose(self.R, other.R, atol=atol)
                and np.allclose(self.t, other.t, atol=atol))

    def __repr__(self):
        return f"SE3(t={np.array2string(self.t, precision=4)}, w={np.array2string(so3_log(self.R), precision=4)})"


def se3_exp(twist):
    twist = np.asarray(twist, dtype=float)
    w, v = twist[:3], twist[3:]
    return SE3(so3_exp(w), _left_jacobian(w) @ v)


def se3_log(T):
    w = so3_log(T.R)
    v = _left_jacobian_inv(w) @ T.t
    return np.concatenate([w, v])


def relative(T_j, T_i):
    """Pose of frame i expressed in frame j: ``T_j^{-1} T_i``."""
    return T_j.inverse() @ T_i


def quaternion_from_rotation(R):
    """Unit quaternion in (x, y, z, w) order with w >= 0."""
    q = Rotation.from_matrix(R).as_quat()
    if q[3] < 0:
        q = -q
    return q


def rotation_from_quaternion(q):
    return Rotation.from_quat(np.asarray(q, dtype=float)).as_matrix()


@dataclass(frozen=True, eq=False)
class Sim3:
    scale: float = 1.0
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("Sim3 scale must be positive")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "R", np.array(self.R, dtype=float))
        object.__setattr__(self, "t", np.array(self.t, dtype=float).reshape(3))

    def __matmul__(self, other):
        if isinstance(other, Sim3):
            return Sim3(self.scale * other.scale, self.R @ other.R,
                        self.scale * self.R @ other.t + self.t)
        return NotImplemented

    def inverse(self):
        Rt = self.R.T
        return Sim3(1.0 / self.scale, Rt, -Rt @ self.t / self.scale)

    def apply(self, p):
        return sim3_apply(self, p)

    def apply_pose(self, T):
        """Map a world-from-camera pose into the aligned frame (rotation only, no scale)."""
        return SE3(self.R @ T.R, self.apply(T.t))


def sim3_apply(S, p):
    p = np.asarray(p, dtype=float)
    return S.scale * (p @ S.R.T) + S.t


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point outside the image")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @property
    def K_inv(self):
        return np.array([[1.0 / self.fx, 0.0, -self.cx / self.fx],
                         [0.0, 1.0 / self.fy, -self.cy / self.fy],
                         [0.0, 0.0, 1.0]])

    def at_level(self, level):
        """Intrinsics for pyramid level ``level`` built by 2x2 box averaging.

        Pixel centers of level L+1 sit at level-L coordinate 2x + 0.5, so the
        principal point shifts by half a pixel in addition to the halving.
        """
        cam = self
        for _ in range(level):
            cam = CameraModel(cam.fx * 0.5, cam.fy * 0.5,
                              (cam.cx + 0.5) * 0.5 - 0.5, (cam.cy + 0.5) * 0.5 - 0.5,
                              cam.width // 2, cam.height // 2)
        return cam


def pixel_to_level(u, level):
    """Level-0 pixel coordinates expressed at ``level`` (same convention as ``at_level``)."""
    u = np.asarray(u, dtype=float)
    s = 2.0 ** level
    return (u + 0.5) / s - 0.5


def project(cam, p):
    """Pinhole projection of points (3,) or (N, 3); raises on nonpositive depth."""
    p = np.asarray(p, dtype=float)
    z = p[..., 2]
    if np.any(~(z > 0)):
        raise ProjectionError("point depth must be positive")
    return np.stack([cam.fx * p[..., 0] / z + cam.cx,
                     cam.fy * p[..., 1] / z + cam.cy], axis=-1)


def backproject(cam, u, rho):
    """Point in the camera frame with depth ``1/rho`` seen at pixel ``u``."""
    u = np.asarray(u, dtype=float)
    rho = np.asarray(rho, dtype=float)
    if np.any(~(rho > 0)):
        raise InvalidInverseDepth("inverse depth must be positive")
    x = (u[..., 0] - cam.cx) / cam.fx
    y = (u[..., 1] - cam.cy) / cam.fy
    ray = np.stack([x, y, np.ones_like(x)], axis=-1)
    return ray / rho[..., None]
