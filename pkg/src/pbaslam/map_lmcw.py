"""Persistent map and the local map covisibility window (temporal + covisible keyframes)."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .geometry import SE3
from .image import PATTERN
from .photometric import AffineBrightness
from .pba import fix_gauge, outlier_mask, should_discard, should_remove

ALL_INLIERS = (1 << len(PATTERN)) - 1
MATURE_OBS = 3


@dataclass
class Observation:
    target: int
    mask: int = ALL_INLIERS
    outlier: bool = False


@dataclass(eq=False)
class MapPoint:
    host: int
    pixel: np.ndarray
    rho: float
    status: str = "active"            # candidate | active | mature | removed
    observations: list = field(default_factory=list)
    created: int = -1                 # keyframe id at whose insertion the point was activated
    energy: float = 0.0
    id: int = -1

    def observed_in(self, kf_id):
        return any(o.target == kf_id for o in self.observations)


@dataclass(eq=False)
class Keyframe:
    """``pose`` is world-from-camera."""
    id: int
    timestamp: float
    pyramid: object
    pose: SE3
    affine: AffineBrightness = AffineBrightness()
    points: list = field(default_factory=list)
    candidates: list = field(default_factory=list)

    @property
    def image(self):
        return self.pyramid[0]

    @property
    def camera(self):
        return self.pyramid.cameras[0]

    def live_points(self):
        return [p for p in self.points if p.status in ("active", "mature")]


class Map:
    def __init__(self):
        self.keyframes = {}
        self.temporal = []
        self.next_point_id = 0

    def __len__(self):
        return len(self.keyframes)

    def add_keyframe(self, kf):
        if kf.id in self.keyframes:
            raise ValueError(f"keyframe {kf.id} already in the map")
        self.keyframes[kf.id] = kf

    def add_point(self, point):
        point.id = self.next_point_id
        self.next_point_id += 1
        self.keyframes[point.host].points.append(point)
        return point

    def points(self, kf_ids=None):
        ids = self.keyframes if kf_ids is None else kf_ids
        return [p for k in ids for p in self.keyframes[k].live_points()]

    def latest(self):
        return self.keyframes[max(self.keyframes)]


@dataclass
class Window:
    latest: int
    temporal: list
    covisible: list = field(default_factory=list)
    fixed: list = field(default_factory=list)

    @property
    def active(self):
        return list(self.temporal) + list(self.covisible)


# --------------------------------------------------------------------------
# temporal part

def drop_scores(centers):
    """Eq.-6 style score of every keyframe; ``centers[0]`` is the latest (I_0)."""
    c = np.asarray(centers, dtype=float)
    n = len(c)
    d = np.maximum(np.linalg.norm(c[:, None] - c[None], axis=-1), 1e-12)
    s = np.zeros(n)
    for i in range(1, n):
        inv = sum(1.0 / d[i, j] for j in range(1, n) if j != i)
        s[i] = math.sqrt(d[0, i]) * inv
    return s


def temporal_drop(keyframes, latest_id, protect=2):
    """Id of the temporal keyframe to drop after inserting ``latest_id``.

    Keyframes are ordered by recency from the latest I_0.  I_0 and the
    ``protect`` keyframes after it (I_1, I_2) are kept; among the rest the
    one maximizing sqrt(d(I_0,I_i)) * sum_{j>=1, j!=i} 1/d(I_i,I_j) is dropped,
    ties going to the older keyframe.  d is the camera-center distance.
    """
    kfs = sorted(keyframes, key=lambda k: (k.timestamp, k.id), reverse=True)
    if not kfs or kfs[0].id != latest_id:
        raise ValueError("latest keyframe must be the most recent of the temporal part")
    if len(kfs) <= 1 + protect:
        raise ValueError("nothing droppable in the temporal part")
    s = drop_scores([k.pose.center for k in kfs])
    best = None
    for i in range(1 + protect, len(kfs)):
        if best is None or s[i] > s[best] or (s[i] == s[best] and _older(kfs[i], kfs[best])):
            best = i
    return kfs[best].id


def _older(a, b):
    return (a.timestamp, a.id) < (b.timestamp, b.id)


# --------------------------------------------------------------------------
# distance map and covisible selection

@dataclass
class DistanceMap:
    """Exact nearest-projection distances sampled at grid nodes (i*stride, j*stride)."""
    values: np.ndarray
    stride: int
    width: int
    height: int

    @classmethod
    def empty(cls, width, height, stride=4):
        gx = np.arange(0, width, stride)
        gy = np.arange(0, height, stride)
        return cls(np.full((len(gy), len(gx)), np.inf), stride, width, height)

    @property
    def grid(self):
        return (np.arange(0, self.width, self.stride, dtype=float),
                np.arange(0, self.height, self.stride, dtype=float))

    def add(self, pts, backend=None):
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        if len(pts):
            gx, gy = self.grid
            self.values = np.minimum(self.values, kernels.distance_grid(gx, gy, pts, backend=backend))
        return self

    def at(self, uv):
        uv = np.asarray(uv, dtype=float).reshape(-1, 2)
        i = np.clip(np.rint(uv[:, 0] / self.stride).astype(np.int64), 0, self.values.shape[1] - 1)
        j = np.clip(np.rint(uv[:, 1] / self.stride).astype(np.int64), 0, self.values.shape[0] - 1)
        return self.values[j, i]

    def copy(self):
        return DistanceMap(self.values.copy(), self.stride, self.width, self.height)


def world_points(kf, points=None):
    """World coordinates of points hosted by ``kf``."""
    pts = kf.live_points() if points is None else points
    if not pts:
        return np.zeros((0, 3))
    cam = kf.camera
    uv = np.array([p.pixel for p in pts], dtype=float)
    rho = np.array([p.rho for p in pts], dtype=float)
    q = np.stack([(uv[:, 0] - cam.cx) / cam.fx, (uv[:, 1] - cam.cy) / cam.fy, np.ones(len(uv))], 1)
    return kf.pose.act(q / rho[:, None])


def project_into(cam, pose, pw, margin=0.0):
    """Pixels of world points in a camera; ``ok`` marks points in front and inside the image."""
    pc = pose.inverse().act(np.asarray(pw, dtype=float).reshape(-1, 3))
    z = pc[:, 2]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)
    uv = np.stack([cam.fx * pc[:, 0] / zs + cam.cx, cam.fy * pc[:, 1] / zs + cam.cy], 1)
    ok = (front & (uv[:, 0] >= margin) & (uv[:, 1] >= margin)
          & (uv[:, 0] <= cam.width - 1 - margin) & (uv[:, 1] <= cam.height - 1 - margin))
    return uv, ok


def build_distance_map(latest, temporal_kfs, stride=4, backend=None):
    """Distance map over ``latest`` from all points hosted by the temporal keyframes."""
    cam = latest.camera
    dm = DistanceMap.empty(cam.width, cam.height, stride)
    pts = [world_points(k) for k in temporal_kfs]
    pw = np.concatenate(pts) if pts else np.zeros((0, 3))
    uv, ok = project_into(cam, latest.pose, pw)
    return dm.add(uv[ok], backend=backend)


def viewing_angle(host_center, view_center, pw):
    a = pw - np.asarray(host_center)
    b = pw - np.asarray(view_center)
    cosang = np.sum(a * b, axis=1) / np.maximum(np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1), 1e-300)
    return np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0)))


def covisible_projections(kf, latest, max_angle=40.0):
    """Pixels in ``latest`` of the points of ``kf`` that project inside and pass the angle test."""
    pw = world_points(kf)
    if len(pw) == 0:
        return np.zeros((0, 2))
    uv, ok = project_into(latest.camera, latest.pose, pw)
    ok &= viewing_angle(kf.pose.center, latest.pose.center, pw) <= max_angle
    return uv[ok]


def select_covisible(candidates, latest, dmap, n_c, radius=20.0, max_angle=40.0, backend=None):
    """Greedy covisible keyframe selection.

    Each round takes the candidate with most projections on depleted pixels
    (distance > ``radius``), ties to the lower id, then adds its projections
    to the distance map.  Stops after ``n_c`` picks or when the best count is 0.
    """
    dm = dmap.copy()
    proj = {k.id: covisible_projections(k, latest, max_angle) for k in candidates}
    chosen = []
    for _ in range(n_c):
        best, best_n = None, 0
        for kid in sorted(proj):
            if kid in chosen or len(proj[kid]) == 0:
                continue
            n = int(np.sum(dm.at(proj[kid]) > radius))
            if n > best_n:
                best, best_n = kid, n
        if best is None:
            break
        chosen.append(best)
        dm.add(proj[best], backend=backend)
    return chosen, dm


# --------------------------------------------------------------------------
# window

def fixed_keyframes(m, active):
    """Non-active keyframes sharing an observation with the active set."""
    return fix_gauge(list(m.keyframes.values()), active, m.points())


def insert_temporal(m, kf_id, n_t=4, protect=2):
    """Append ``kf_id`` to the temporal part; returns the dropped id (or None)."""
    m.temporal.append(kf_id)
    if len(m.temporal) <= n_t:
        return None
    drop = temporal_drop([m.keyframes[k] for k in m.temporal], kf_id, protect=protect)
    m.temporal.remove(drop)
    return drop


def build_window(m, latest_id, n_c=3, stride=4, radius=20.0, max_angle=40.0, backend=None):
    """Window for the latest keyframe: temporal part, greedy covisible part, fixed set.

    Also returns the distance map after covisible selection (used for activation).
    """
    latest = m.keyframes[latest_id]
    temporal = sorted(m.temporal, key=lambda k: (m.keyframes[k].timestamp, k))
    dm = build_distance_map(latest, [m.keyframes[k] for k in temporal], stride, backend)
    old = [m.keyframes[k] for k in m.keyframes if k not in m.temporal]
    covis, dm = select_covisible(old, latest, dm, n_c, radius, max_angle, backend) if n_c > 0 and old \
        else ([], dm)
    w = Window(latest_id, temporal, covis)
    w.fixed = fixed_keyframes(m, w.active)
    return w, dm


# --------------------------------------------------------------------------
# outliers and maturity

def update_masks(problem, report=None):
    """Store inlier masks from a finished solve and drop observations with > 30% outlier pixels.

    Masks come from ``report`` (or are recomputed at level 0 with the
    problem's models).  Returns ``(n_removed, discard)`` where ``discard``
    flags observations above the 60% rule.
    """
    if report is not None and report.masks is not None:
        bits, n_out = report.masks, report.outliers
    else:
        r, valid, *_ = problem.linearize(0)
        models = problem.models or problem.fit_models(r, valid)
        bits, n_out = outlier_mask(r, valid, problem.thresholds(models))
    doomed = {}
    for o, (p, oi) in enumerate(problem.obs_ref):
        ob = p.observations[oi]
        ob.mask = int(bits[o])
        ob.outlier = bool(should_remove(int(n_out[o])))
        if ob.outlier:
            doomed.setdefault(id(p), (p, set()))[1].add(oi)
    removed = 0
    for p, idx in doomed.values():
        p.observations = [ob for i, ob in enumerate(p.observations) if i not in idx]
        removed += len(idx)
    return removed, should_discard(np.asarray(n_out))


def enforce_maturity(m, new_kf_id):
    """Apply the point lifecycle after inserting ``new_kf_id``; returns the removed points.

    Immature points must be observed in every keyframe created after them;
    points with three or more observations are mature and survive as long
    as they keep three.
    """
    removed = []
    for kf in m.keyframes.values():
        for p in kf.points:
            if p.status not in ("active", "mature"):
                continue
            n = len(p.observations)
            if p.status == "mature":
                if n < MATURE_OBS:
                    p.status = "removed"
                    removed.append(p)
                continue
            if p.created != new_kf_id and p.host != new_kf_id and not p.observed_in(new_kf_id):
                p.status = "removed"
                removed.append(p)
            elif n >= MATURE_OBS:
                p.status = "mature"
    return removed
