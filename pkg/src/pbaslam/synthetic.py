"""Procedurally textured box scenes rendered with exact poses, depths and exposure."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import PbaSlamError
from .geometry import SE3, CameraModel
from .image import GrayImage
from .photometric import AffineBrightness


class RenderError(PbaSlamError):
    pass


DEFAULT_CAMERA = CameraModel(190.0, 190.0, 127.5, 95.5, 256, 192)


@dataclass(frozen=True)
class Texture:
    """Three sine gratings plus smooth value noise over plane coordinates (s, t)."""
    seed: int
    gratings: tuple = ((1.3, 0.35, 22.0), (2.3, 1.9, 18.0), (3.7, 2.8, 12.0))
    noise_spacing: float = 0.25
    noise_amp: float = 45.0
    base: float = 125.0

    def __call__(self, s, t):
        rng = np.random.default_rng(self.seed)
        phases = rng.uniform(0, 2 * np.pi, size=len(self.gratings))
        out = np.full(np.shape(s), self.base)
        for (freq, angle, amp), ph in zip(self.gratings, phases):
            out += amp * np.sin(2 * np.pi * freq * (np.cos(angle) * s + np.sin(angle) * t) + ph)
        out += self.noise_amp * _value_noise(s / self.noise_spacing, t / self.noise_spacing,
                                             rng.uniform(-1, 1, size=(256, 256)))
        return out


def _value_noise(x, y, table):
    n = table.shape[0]
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    fx = fx * fx * (3 - 2 * fx)
    fy = fy * fy * (3 - 2 * fy)
    ix = x0.astype(np.int64) % n
    iy = y0.astype(np.int64) % n
    ix1 = (ix + 1) % n
    iy1 = (iy + 1) % n
    return ((1 - fx) * (1 - fy) * table[iy, ix] + fx * (1 - fy) * table[iy, ix1]
            + (1 - fx) * fy * table[iy1, ix] + fx * fy * table[iy1, ix1])


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple
    seed: int = 100
    base: float = 125.0               # mean texture intensity


@dataclass
class Scene:
    """Camera inside a textured room ``[lo, hi]``; optional occluder boxes.

    ``scale`` is the characteristic scene length used to express tolerances.
    """
    room_lo: tuple = (-3.0, -2.0, -3.0)
    room_hi: tuple = (3.0, 2.0, 4.0)
    occluders: list = field(default_factory=list)
    scale: float = 4.0
    seed: int = 0

    def texture(self, surface):
        return Texture(seed=self.seed * 1000 + surface)

    def inside_occluder(self, p):
        return any(np.all(p > np.array(b.lo)) and np.all(p < np.array(b.hi)) for b in self.occluders)


def _axis_coords(hit, axis):
    others = [a for a in range(3) if a != axis]
    return hit[..., others[0]], hit[..., others[1]]


def intersect(scene, origin, dirs):
    """Ray parameter (dirs unnormalized) and surface id of the first hit for each ray."""
    origin = np.asarray(origin, dtype=float)
    lo, hi = np.array(scene.room_lo), np.array(scene.room_hi)
    if np.any(origin <= lo) or np.any(origin >= hi):
        raise RenderError("camera outside the room")
    if scene.inside_occluder(origin):
        raise RenderError("camera inside an occluder")
    n = dirs.shape[0]
    best_t = np.full(n, np.inf)
    surf = np.full(n, -1, dtype=np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        for axis in range(3):
            for side, bound in enumerate((lo[axis], hi[axis])):
                t = (bound - origin[axis]) / dirs[:, axis]
                ok = (t > 0) & (t < best_t)
                best_t = np.where(ok, t, best_t)
                surf = np.where(ok, 2 * axis + side, surf)
        for bi, box in enumerate(scene.occluders):
            blo, bhi = np.array(box.lo), np.array(box.hi)
            t1 = (blo - origin) / dirs
            t2 = (bhi - origin) / dirs
            tmin = np.minimum(t1, t2)
            tmax = np.maximum(t1, t2)
            t_near = tmin.max(axis=1)
            face_axis = tmin.argmax(axis=1)
            t_far = tmax.min(axis=1)
            hit = (t_near <= t_far) & (t_near > 0) & (t_near < best_t)
            best_t = np.where(hit, t_near, best_t)
            surf = np.where(hit, 6 + 3 * bi + face_axis, surf)
    return best_t, surf


def _shade(scene, hit, surf):
    out = np.zeros(len(surf))
    for s in np.unique(surf):
        sel = surf == s
        if s < 6:
            axis = s // 2
            tex = scene.texture(int(s))
        else:
            bi, axis = divmod(int(s) - 6, 3)
            box = scene.occluders[bi]
            tex = Texture(seed=box.seed * 7 + axis, base=box.base)
        u, v = _axis_coords(hit[sel], axis)
        out[sel] = tex(u, v)
    return out


def render(scene, cam, pose, affine=AffineBrightness(), noise_sigma=0.0, seed=0, supersample=2):
    """Render image and per-pixel depth for a world-from-camera ``pose``.

    Intensities follow ``I = exp(a) * I_texture + b`` (+ noise), which makes the
    photometric residual between two renders vanish at the true parameters.
    """
    w, h = cam.width, cam.height
    ss = supersample
    off = (np.arange(ss) + 0.5) / ss - 0.5
    xs = (np.arange(w)[:, None] + off[None, :]).ravel()
    ys = (np.arange(h)[:, None] + off[None, :]).ravel()
    X, Y = np.meshgrid(xs, ys)
    rays = np.stack([(X - cam.cx) / cam.fx, (Y - cam.cy) / cam.fy, np.ones_like(X)], -1).reshape(-1, 3)
    dirs = rays @ pose.R.T
    t, surf = intersect(scene, pose.t, dirs)
    hit = pose.t + t[:, None] * dirs
    tex = _shade(scene, hit, surf).reshape(h * ss, w * ss)
    tex = tex.reshape(h, ss, w, ss).mean(axis=(1, 3))
    img = np.exp(affine.a) * tex + affine.b
    if noise_sigma > 0:
        img = img + np.random.default_rng(seed).normal(scale=noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, 255.0)
    depth = depth_map(scene, cam, pose)
    return GrayImage(img), depth


def depth_map(scene, cam, pose):
    """Camera-frame depth (z) at every pixel center."""
    X, Y = np.meshgrid(np.arange(cam.width, dtype=float), np.arange(cam.height, dtype=float))
    rays = np.stack([(X - cam.cx) / cam.fx, (Y - cam.cy) / cam.fy, np.ones_like(X)], -1).reshape(-1, 3)
    t, _ = intersect(scene, pose.t, rays @ pose.R.T)
    return t.reshape(cam.height, cam.width)


def look_at(center, target, up=(0.0, -1.0, 0.0)):
    """World-from-camera pose at ``center`` with +z towards ``target`` and -y along ``up``."""
    center = np.asarray(center, dtype=float)
    z = np.asarray(target, dtype=float) - center
    z /= np.linalg.norm(z)
    x = np.cross(-np.asarray(up, dtype=float), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return SE3(np.stack([x, y, z], axis=1), center)


def make_trajectory(kind, n, length=1.0, target=(0.0, 0.0, 4.0), radius=None):
    """Smooth pose sequences.

    ``line``: translation along +x over ``length`` while looking down +z.
    ``orbit``: centers on a horizontal arc of ``radius`` around ``target``,
    always looking at it.  ``revisit-loop``: a closed loop of extent ``length``
    that returns to its start, the camera looking at ``target``.
    """
    if n < 2:
        raise ValueError("need at least two poses")
    s = np.linspace(0.0, 1.0, n)
    target = np.asarray(target, dtype=float)
    if kind == "line":
        return [SE3(np.eye(3), (length * si, 0.0, 0.0)) for si in s]
    if kind == "orbit":
        r = float(np.linalg.norm(target)) if radius is None else radius
        angles = -0.5 * length / r + length / r * s
        centers = [target + r * np.array([np.sin(a), 0.0, -np.cos(a)]) for a in angles]
        return [look_at(c, target) for c in centers]
    if kind == "revisit-loop":
        poses = []
        for si in s:
            ph = 2 * np.pi * si
            c = np.array([length * np.sin(ph), 0.15 * length * np.sin(2 * ph), -0.6 * length * (1 - np.cos(ph))])
            aim = target + np.array([0.5 * length * np.sin(ph), 0.0, 0.0])
            poses.append(look_at(c, aim))
        return poses
    raise ValueError(f"unknown trajectory kind {kind!r}")


@dataclass
class GroundTruth:
    poses: list
    affines: list
    depths: list


@dataclass
class Sequence:
    images: list
    timestamps: np.ndarray
    camera: CameraModel
    truth: GroundTruth
    scene: Scene


def make_sequence(kind="revisit-loop", n_frames=100, noise_sigma=1.0, affine_drift=True,
                  scene=None, cam=DEFAULT_CAMERA, seed=0, length=1.0, fps=20.0):
    """Render a full sequence with ground truth and a random-walk exposure drift."""
    scene = Scene(seed=seed) if scene is None else scene
    poses = make_trajectory(kind, n_frames, length=length)
    rng = np.random.default_rng(seed + 12345)
    a, b = 0.0, 0.0
    images, affines, depths = [], [], []
    for k, pose in enumerate(poses):
        if affine_drift and k > 0:
            a = float(np.clip(a + rng.normal(scale=0.01), -0.15, 0.15))
            b = float(np.clip(b + rng.normal(scale=0.5), -8.0, 8.0))
        aff = AffineBrightness(a, b)
        img, depth = render(scene, cam, pose, aff, noise_sigma, seed=seed * 100003 + k)
        images.append(img)
        affines.append(aff)
        depths.append(depth)
    ts = np.arange(n_frames) / fps
    return Sequence(images, ts, cam, GroundTruth(poses, affines, depths), scene)


def surface_points(scene, spacing=0.05):
    """Dense samples of every room wall and occluder face (reference cloud for PSE)."""
    lo, hi = np.array(scene.room_lo), np.array(scene.room_hi)
    pts = []

    def face(axis, value, a_lo, a_hi):
        others = [a for a in range(3) if a != axis]
        g0 = np.arange(a_lo[0], a_hi[0] + 1e-9, spacing)
        g1 = np.arange(a_lo[1], a_hi[1] + 1e-9, spacing)
        A, B = np.meshgrid(g0, g1)
        P = np.zeros((A.size, 3))
        P[:, axis] = value
        P[:, others[0]] = A.ravel()
        P[:, others[1]] = B.ravel()
        pts.append(P)

    for blo, bhi in [(lo, hi)] + [(np.array(b.lo), np.array(b.hi)) for b in scene.occluders]:
        for axis in range(3):
            others = [a for a in range(3) if a != axis]
            rng_lo = blo[others]
            rng_hi = bhi[others]
            face(axis, blo[axis], rng_lo, rng_hi)
            face(axis, bhi[axis], rng_lo, rng_hi)
    return np.concatenate(pts)


def emit_asl(seq, out_dir, surface_spacing=0.05):
    """Write a rendered sequence as an ASL directory plus ``groundtruth.txt`` and ``surface.ply``."""
    from .io_eval import Trajectory, write_asl, write_pointcloud, write_trajectory
    root = write_asl(out_dir, seq.images, seq.timestamps, seq.camera, seq.truth.poses)
    write_trajectory(Trajectory(seq.timestamps, seq.truth.poses), root / "groundtruth.txt")
    write_pointcloud(surface_points(seq.scene, surface_spacing), root / "surface.ply")
    return root
