"""Frame tracking, keyframe decision, candidate depth search and point activation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .errors import BootstrapFailure, ConfigError, InsufficientData, TrackingLost
from .geometry import SE3, pixel_to_level, se3_exp
from .image import PATTERN, build_pyramid, select_candidates
from .map_lmcw import Keyframe, Map, MapPoint, Observation, project_into, world_points
from .pba import PbaConfig, PbaProblem, solve
from .photometric import GRAD_C, AffineBrightness
from .robust import fit_error_model

log = logging.getLogger(__name__)


@dataclass
class FrontendConfig:
    track_levels: int = 4
    track_iters: int = 20
    track_model: str = "tdist"
    inlier_threshold: float = 20.0        # intensity units, judged at level 0
    min_inlier_ratio: float = 0.3
    w_u: float = 1 / 0.7
    w_t: float = 1 / 0.12
    w_a: float = 1 / 0.25
    n_candidates: int = 800
    candidate_block: int = 8
    candidate_margin: float = 3.0         # gradient above block median
    rho_range: tuple = (0.1, 10.0)        # initial interval, relative to the host's median rho
    search_step: float = 1.0              # pixels between epipolar samples
    ambiguity: float = 1.25               # second best within this factor of best is ambiguous
    search_halfwidth: float = 1.0         # pixels kept on each side of the match
    min_segment: float = 1.0              # shorter epipolar segments carry no depth information
    activation_width: float = 0.5         # max (rho_max - rho_min) / rho
    depletion_radius: float = 20.0
    grad_c: float = GRAD_C
    bootstrap_budget: int = 30
    bootstrap_parallax: float = 0.06
    bootstrap_levels: int = 3
    backend: str | None = None

    def __post_init__(self):
        if self.track_levels < 1 or self.track_iters < 1:
            raise ConfigError("tracking needs at least one level and one iteration")
        if not 0 <= self.min_inlier_ratio <= 1:
            raise ConfigError("min_inlier_ratio must lie in [0, 1]")
        lo, hi = self.rho_range
        if not 0 < lo < hi:
            raise ConfigError("rho_range must satisfy 0 < lo < hi")
        if self.ambiguity < 1 or self.search_step <= 0 or self.search_halfwidth <= 0:
            raise ConfigError("bad epipolar search parameters")
        if min(self.w_u, self.w_t, self.w_a) < 0:
            raise ConfigError("keyframe weights must be non-negative")


@dataclass
class TrackedFrame:
    timestamp: float
    pose: SE3
    affine: AffineBrightness
    energy: float
    inlier_ratio: float
    pyramid: object = None
    reference: int = -1
    index: int = -1


@dataclass(eq=False)
class CandidatePoint:
    host: int
    pixel: np.ndarray
    rho_min: float
    rho_max: float
    rho: float
    quality: float = 0.0
    n_obs: int = 0
    host_vals: np.ndarray = None
    low_parallax: bool = False

    def __post_init__(self):
        if not 0 < self.rho_min <= self.rho <= self.rho_max:
            raise ValueError("candidate needs 0 < rho_min <= rho <= rho_max")

    @property
    def width(self):
        return (self.rho_max - self.rho_min) / self.rho


@dataclass
class KeyframeScores:
    s_u: float
    s_t: float
    s_a: float
    w_u: float
    w_t: float
    w_a: float

    @property
    def combined(self):
        return self.w_u * (1.0 - self.s_u) + self.w_t * self.s_t + self.w_a * self.s_a


# --------------------------------------------------------------------------
# tracking

class TrackingReference:
    """Immutable snapshot: map points expressed in the latest keyframe, per pyramid level.

    Inverse-compositional Jacobians are evaluated here once per level on the
    reference image.
    """

    def __init__(self, kf, points_world, config=None, n_levels=None):
        cfg = config or FrontendConfig()
        self.kf_id = kf.id
        self.pose = kf.pose
        self.affine = kf.affine
        self.camera = kf.camera
        n_levels = min(n_levels or cfg.track_levels, len(kf.pyramid))
        self.n_levels = n_levels
        pw = np.asarray(points_world, dtype=float).reshape(-1, 3)
        uv, ok = project_into(kf.camera, kf.pose, pw, margin=4)
        pr = kf.pose.inverse().act(pw)
        self.uv = uv[ok]
        self.rho = 1.0 / pr[ok, 2]
        self.levels = [self._level(kf, L, cfg.grad_c, cfg.backend) for L in range(n_levels)]

    def __len__(self):
        return len(self.rho)

    def _level(self, kf, L, c, backend):
        cam = kf.pyramid.cameras[L]
        img = kf.pyramid[L]
        gx, gy = img.gradients
        base = pixel_to_level(self.uv, L) if len(self.uv) else np.zeros((0, 2))
        xs = base[:, None, 0] + PATTERN[None, :, 0]
        ys = base[:, None, 1] + PATTERN[None, :, 1]
        val, grad, ok = kernels.sample_many(img.data, gx, gy, xs, ys, margin=1.0, backend=backend)
        shape = xs.shape
        val = val.reshape(shape)
        g = grad.reshape(shape + (2,))
        ok = ok.reshape(shape)
        q = np.stack([(xs - cam.cx) / cam.fx, (ys - cam.cy) / cam.fy, np.ones(shape)], -1)
        P = q / self.rho[:, None, None]
        iz = 1.0 / P[..., 2]
        dx = g[..., 0] * cam.fx * iz
        dy = g[..., 1] * cam.fy * iz
        gJ = np.stack([dx, dy, -(dx * P[..., 0] + dy * P[..., 1]) * iz], -1)
        J0 = np.concatenate([np.cross(P, gJ), gJ], -1)
        wg = c * c / (c * c + np.sum(g * g, -1))
        return dict(cam=cam, img=img, P=P[ok], val=val[ok], J0=J0[ok], wg=wg[ok])


def _warp_sample(lv, T, backend, margin=1.0):
    cam, img = lv["cam"], lv["img"]
    Pc = lv["P"] @ T.R.T + T.t
    z = Pc[:, 2]
    front = z > 1e-6
    zs = np.where(front, z, 1.0)
    u = cam.fx * Pc[:, 0] / zs + cam.cx
    v = cam.fy * Pc[:, 1] / zs + cam.cy
    gx, gy = img.gradients
    val, _, ok = kernels.sample_many(img.data, gx, gy, np.where(front, u, -1e9), np.where(front, v, -1e9),
                                     margin=margin, with_grad=False, backend=backend)
    return val, ok & front


def _track_energy(r, valid, start_valid, wg, model):
    pen = model.cost(np.array([model.percentile95]))[0] if np.isfinite(model.percentile95) else 0.0
    cost = np.where(valid, wg * model.cost(np.where(valid, r, 0.0)), 0.0)
    lost = start_valid & ~valid
    return float(np.sum(cost) + pen * np.sum(wg[lost]))


def track_frame(pyramid, reference, guess, guess_affine=None, config=None, timestamp=0.0, iter_scale=1):
    """Pose and affine brightness of a new frame against the reference snapshot.

    ``guess`` is the world-from-camera initial pose.  Inverse compositional
    Gauss-Newton with LM damping, coarse to fine.  Raises TrackingLost when
    fewer than ``min_inlier_ratio`` of the reference pixels are inliers.
    """
    cfg = config or FrontendConfig()
    if len(reference) == 0:
        raise TrackingLost("reference has no points")
    ga = guess_affine or reference.affine
    T = (guess.inverse() @ reference.pose).normalized()  # current-from-reference
    alpha = ga.a - reference.affine.a
    b = ga.b
    b_r = reference.affine.b
    energy = np.inf
    for L in reversed(range(min(reference.n_levels, len(pyramid)))):
        lv = reference.levels[L]
        if len(lv["val"]) < 8:
            continue
        lv = dict(lv, cam=pyramid.cameras[L], img=pyramid[L])
        Iref, J0, wg = lv["val"], lv["J0"], lv["wg"]

        def residuals(T, alpha, b):
            Ic, ok = _warp_sample(lv, T, cfg.backend)
            return Ic - math.exp(alpha) * (Iref - b_r) - b, ok

        r, valid = residuals(T, alpha, b)
        if valid.sum() < 8:
            continue
        try:
            model = fit_error_model(r[valid], cfg.track_model)
        except InsufficientData:
            model = fit_error_model(np.concatenate([r[valid], np.zeros(50)]), cfg.track_model)
        start_valid = valid.copy()
        energy = _track_energy(r, valid, start_valid, wg, model)
        lam = 1e-3
        stall = 0
        for _ in range(cfg.track_iters * (iter_scale if L > 0 else 1)):
            ea = math.exp(alpha)
            J = np.concatenate([-ea * J0, (-ea * (Iref - b_r))[:, None], -np.ones((len(r), 1))], 1)
            w = np.where(valid, wg * model.weight(np.where(valid, r, 0.0)), 0.0)
            H = J.T @ (w[:, None] * J)
            g = J.T @ (w * np.where(valid, r, 0.0))
            improved = False
            while lam < 1e8:
                A = H + lam * np.diag(np.maximum(np.diag(H), 1e-9))
                try:
                    d = -np.linalg.solve(A, g)
                except np.linalg.LinAlgError:
                    lam *= 10
                    continue
                T_new = T @ se3_exp(-d[:6])
                a_new, b_new = alpha + d[6], b + d[7]
                r_new, v_new = residuals(T_new, a_new, b_new)
                e_new = _track_energy(r_new, v_new, start_valid, wg, model)
                if e_new <= energy:
                    rel = (energy - e_new) / max(energy, 1e-300)
                    T, alpha, b, r, valid, energy = T_new, a_new, b_new, r_new, v_new, e_new
                    lam = max(lam * 0.5, 1e-7)
                    improved = True
                    break
                lam *= 10
            if not improved:
                break
            stall = stall + 1 if rel < 1e-5 or np.linalg.norm(d) < 1e-10 else 0
            if stall >= 2:
                break
    if not np.isfinite(energy):
        raise TrackingLost("no usable pyramid level")
    lv = dict(reference.levels[0], cam=pyramid.cameras[0], img=pyramid[0])
    Ic, ok = _warp_sample(lv, T, cfg.backend)
    r = Ic - math.exp(alpha) * (lv["val"] - b_r) - b
    inl = ok & (np.abs(r) <= cfg.inlier_threshold)
    ratio = float(inl.sum() / max(len(r), 1))
    if not np.isfinite(r[ok]).all() or ratio < cfg.min_inlier_ratio:
        raise TrackingLost(f"inlier ratio {ratio:.2f} below {cfg.min_inlier_ratio}")
    pose = (reference.pose @ T.inverse()).normalized()
    aff = AffineBrightness(reference.affine.a + alpha, b)
    e = float(np.mean(r[ok] ** 2)) if ok.any() else np.inf
    return TrackedFrame(timestamp, pose, aff, e, ratio, pyramid, reference.kf_id)


class VelocityModel:
    """Constant velocity in se(3): the last relative motion is re-applied."""

    def __init__(self):
        self.poses = []
        self.affine = None

    def push(self, pose, affine=None):
        self.poses = (self.poses + [pose])[-2:]
        if affine is not None:
            self.affine = affine

    def predict(self):
        if not self.poses:
            return SE3()
        if len(self.poses) == 1:
            return self.poses[-1]
        a, b = self.poses
        # repeated extrapolation amplifies rounding, so re-project the rotation
        return (b @ (a.inverse() @ b)).normalized()

    def reset(self, pose=None):
        self.poses = [pose] if pose is not None else []


# --------------------------------------------------------------------------
# keyframe decision

def keyframe_scores(frame_pose, frame_affine, latest, points_world, config=None):
    cfg = config or FrontendConfig()
    pw = np.asarray(points_world, dtype=float).reshape(-1, 3)
    uv, vis = project_into(latest.camera, latest.pose, pw)
    z_kf = latest.pose.inverse().act(pw)[:, 2]
    n = int(vis.sum())
    rel = latest.pose.inverse() @ frame_pose
    if n == 0:
        s_u, rho_bar = 1.0, 0.0
    else:
        _, vis_f = project_into(latest.camera, frame_pose, pw)
        z_f = frame_pose.inverse().act(pw)[:, 2]
        both = vis & vis_f
        s_u = float(np.sum(np.minimum(z_f[both] / z_kf[both], 1.0)) / n)
        rho_bar = float(np.mean(1.0 / z_kf[vis]))
    s_t = float(np.linalg.norm(rel.t * rho_bar))
    s_a = abs(frame_affine.a - latest.affine.a)
    return KeyframeScores(s_u, s_t, s_a, cfg.w_u, cfg.w_t, cfg.w_a)


def keyframe_decision(frame, latest, points_world, config=None):
    """Whether ``frame`` becomes a keyframe: w_u (1 - s_u) + w_t s_t + w_a s_a > 1."""
    s = keyframe_scores(frame.pose, frame.affine, latest, points_world, config)
    return s.combined > 1.0, s


# --------------------------------------------------------------------------
# candidates and epipolar search

def make_candidates(kf, config=None, rho_ref=1.0):
    cfg = config or FrontendConfig()
    lo, hi = cfg.rho_range
    pix = select_candidates(kf.image, cfg.n_candidates, block=cfg.candidate_block, margin=cfg.candidate_margin)
    vals = host_values(kf, pix)
    return [CandidatePoint(kf.id, p.astype(float), lo * rho_ref, hi * rho_ref, rho_ref, host_vals=v)
            for p, v in zip(pix, vals)]


def host_values(kf, pixels):
    pix = np.asarray(pixels, dtype=float).reshape(-1, 2)
    xs = pix[:, None, 0] + PATTERN[None, :, 0]
    ys = pix[:, None, 1] + PATTERN[None, :, 1]
    d = kf.image.data
    xi = np.clip(np.rint(xs).astype(int), 0, d.shape[1] - 1)
    yi = np.clip(np.rint(ys).astype(int), 0, d.shape[0] - 1)
    return d[yi, xi]


@dataclass
class SearchResult:
    status: str                 # updated | ambiguous | converged | low-parallax | out-of-image
    best: float = np.inf
    second: float = np.inf
    pixel: np.ndarray = None
    samples: np.ndarray = None  # (n, 2) sample pixels along the segment
    costs: np.ndarray = None


def epipolar_segment(cand, host_pose, frame_pose, cam):
    """Pixels of the candidate at rho_min and rho_max in the frame, plus the line coefficients."""
    T = frame_pose.inverse() @ host_pose
    q = np.array([(cand.pixel[0] - cam.cx) / cam.fx, (cand.pixel[1] - cam.cy) / cam.fy, 1.0])
    A = T.R @ q
    B = T.t
    lo, hi = cand.rho_min, cand.rho_max
    # keep depth positive: A_z + rho B_z > 0
    if B[2] < 0:
        hi = min(hi, (A[2] - 1e-6) / -B[2]) if A[2] > 1e-6 else -1.0
    elif B[2] > 0 and A[2] <= 1e-6:
        lo = max(lo, (1e-6 - A[2]) / B[2])
    elif B[2] == 0 and A[2] <= 1e-6:
        hi = -1.0
    if hi <= lo:
        return None

    def pix(rho):
        h = A + rho * B
        return np.array([cam.fx * h[0] / h[2] + cam.cx, cam.fy * h[1] / h[2] + cam.cy])

    return pix(lo), pix(hi), A, B, lo, hi


def _rho_at(u, A, B, cam, axis):
    f, c = (cam.fx, cam.cx) if axis == 0 else (cam.fy, cam.cy)
    m = (u[axis] - c) / f
    den = m * B[2] - B[axis]
    if abs(den) < 1e-15:
        return np.nan
    return (A[axis] - m * A[2]) / den


def _clip_to_image(p0, p1, cam, margin):
    """Parameter range [t0, t1] of p0 + t (p1 - p0) inside the image, or None."""
    t0, t1 = 0.0, 1.0
    d = p1 - p0
    for k, hi in ((0, cam.width - 1 - margin), (1, cam.height - 1 - margin)):
        for bound, sign in ((margin, 1.0), (hi, -1.0)):
            # sign * (p0 + t d - bound) >= 0
            num = sign * (p0[k] - bound)
            den = sign * d[k]
            if den == 0:
                if num < 0:
                    return None
            elif den > 0:
                t0 = max(t0, -num / den)
            else:
                t1 = min(t1, -num / den)
    return (t0, t1) if t0 <= t1 else None


def epipolar_search(cand, host, frame_pose, frame_affine, frame_image, config=None):
    """Search the candidate along its epipolar segment in one frame and shrink its interval.

    Returns a :class:`SearchResult`; the candidate is updated in place only
    when the match is unambiguous.  The interval never widens.
    """
    cfg = config or FrontendConfig()
    cam = host.camera
    seg = epipolar_segment(cand, host.pose, frame_pose, cam)
    if seg is None:
        return SearchResult("out-of-image")
    u_far, u_near, A, B, lo, hi = seg
    length = float(np.linalg.norm(u_near - u_far))
    if not np.isfinite(length):
        return SearchResult("out-of-image")
    if length < cfg.min_segment:
        # a narrow interval gives a short segment too; only a wide one means no parallax
        if cand.n_obs > 0 and cand.width < cfg.activation_width:
            return SearchResult("converged")
        cand.low_parallax = True
        return SearchResult("low-parallax")
    cand.low_parallax = False
    span = _clip_to_image(u_far, u_near, cam, 3.0)
    if span is None:
        return SearchResult("out-of-image")
    t0, t1 = span
    n = int(math.ceil(length * (t1 - t0) / cfg.search_step)) + 1
    s = np.linspace(t0, t1, n)
    samples = u_far[None, :] + s[:, None] * (u_near - u_far)[None, :]
    alpha = math.exp(host.affine.a - frame_affine.a)
    costs = kernels.epipolar_costs(frame_image.data, cand.host_vals[None, :], samples[None, :, 0],
                                   samples[None, :, 1], PATTERN, alpha, host.affine.b, frame_affine.b,
                                   1.0, backend=cfg.backend)[0]
    if not np.isfinite(costs).any():
        return SearchResult("out-of-image", samples=samples, costs=costs)
    i = int(np.argmin(costs))
    best = float(costs[i])
    far = np.abs(np.arange(n) - i) > 2
    second = float(np.min(costs[far])) if far.any() else np.inf
    res = SearchResult("ambiguous", best, second, samples[i], samples, costs)
    if second <= cfg.ambiguity * best:
        return res
    # parabolic refinement
    off = 0.0
    if 0 < i < n - 1 and np.isfinite(costs[i - 1]) and np.isfinite(costs[i + 1]):
        den = costs[i - 1] - 2 * costs[i] + costs[i + 1]
        if den > 0:
            off = float(np.clip(0.5 * (costs[i - 1] - costs[i + 1]) / den, -0.5, 0.5))
    step = (t1 - t0) / max(n - 1, 1)
    direction = u_near - u_far
    t_best = s[i] + off * step
    # Gauss-Newton along the line removes the parabola's sub-pixel bias
    gx, gy = frame_image.gradients
    t_best += kernels.refine_line(frame_image.data, gx, gy, cand.host_vals, PATTERN, u_far + t_best * direction,
                                  direction / length, alpha, host.affine.b, frame_affine.b, cfg.search_step,
                                  backend=cfg.backend) / length
    t_best = min(max(t_best, 0.0), 1.0)
    axis = int(np.argmax(np.abs(direction)))
    hw = cfg.search_halfwidth / length

    def rho_of(t):
        if t <= 0.0:
            return lo
        if t >= 1.0:
            return hi
        return _rho_at(u_far + t * direction, A, B, cam, axis)

    r_best, r_a, r_b = rho_of(t_best), rho_of(t_best - hw), rho_of(t_best + hw)
    if not all(np.isfinite([r_best, r_a, r_b])):
        return res
    new_lo = max(cand.rho_min, min(r_a, r_b))
    new_hi = min(cand.rho_max, max(r_a, r_b))
    r_best = min(max(r_best, new_lo), new_hi)
    if not new_lo <= new_hi or new_lo <= 0:
        return res
    cand.rho_min, cand.rho_max, cand.rho = float(new_lo), float(new_hi), float(r_best)
    cand.quality = second / max(best, 1e-12)
    cand.n_obs += 1
    res.status = "updated"
    res.pixel = u_far + t_best * direction
    return res


def update_candidates(cands, host, frame_pose, frame_affine, frame_image, config=None):
    counts = {}
    for c in cands:
        st = epipolar_search(c, host, frame_pose, frame_affine, frame_image, config).status
        counts[st] = counts.get(st, 0) + 1
    return counts


# --------------------------------------------------------------------------
# activation

def activation_ready(cand, config=None):
    cfg = config or FrontendConfig()
    return cand.n_obs >= 1 and not cand.low_parallax and cand.width < cfg.activation_width \
        and cand.quality >= cfg.ambiguity


def activate_points(m, latest, candidates, dmap, config=None, backend=None):
    """Turn ready candidates that land on depleted pixels of ``latest`` into map points.

    ``candidates`` maps host keyframe id to its candidate list (pruned in
    place).  Each activation adds its projection to ``dmap``, so new points
    keep the depletion radius from each other.
    """
    cfg = config or FrontendConfig()
    out = []
    for host_id in sorted(candidates):
        host = m.keyframes[host_id]
        keep = []
        for c in candidates[host_id]:
            if not activation_ready(c, cfg):
                keep.append(c)
                continue
            probe = MapPoint(host_id, c.pixel, c.rho)
            pw = world_points(host, [probe])
            uv, ok = project_into(latest.camera, latest.pose, pw, margin=4)
            if not ok[0] or dmap.at(uv)[0] <= cfg.depletion_radius:
                keep.append(c)
                continue
            p = m.add_point(MapPoint(host_id, c.pixel.copy(), c.rho, status="active", created=latest.id))
            out.append(p)
            dmap.add(uv, backend=backend)
        candidates[host_id] = keep
    return out


def add_observations(m, points, targets, margin=4.0):
    """Observation in every target keyframe the point projects into (host excluded)."""
    n = 0
    for p in points:
        host = m.keyframes[p.host]
        pw = world_points(host, [p])
        for t in targets:
            if t == p.host or p.observed_in(t):
                continue
            kf = m.keyframes[t]
            if project_into(kf.camera, kf.pose, pw, margin)[1][0]:
                p.observations.append(Observation(t))
                n += 1
    return n


# --------------------------------------------------------------------------
# bootstrap

class Bootstrapper:
    """Two-view photometric initialization from the first frame.

    The first frame's candidates start at rho = 1; every following frame is
    solved jointly with them (first frame held, mean rho renormalized to 1)
    until the translation reaches ``bootstrap_parallax``.
    """

    def __init__(self, pyramid, timestamp, config=None, pba_config=None):
        self.cfg = config or FrontendConfig()
        self.pba = pba_config or PbaConfig()
        self.kf0 = Keyframe(0, float(timestamp), pyramid, SE3(), AffineBrightness())
        pix = select_candidates(self.kf0.image, self.cfg.n_candidates, block=self.cfg.candidate_block,
                                margin=self.cfg.candidate_margin)
        self.points = [MapPoint(0, p.astype(float), 1.0, observations=[Observation(1)]) for p in pix]
        self.kf0.points = list(self.points)
        self.pose = SE3()
        self.affine = AffineBrightness()
        self.velocity = VelocityModel()
        self.velocity.push(SE3())
        self.frames = 0
        if len(self.points) < 20:
            raise BootstrapFailure("first frame has too little texture")

    def add_frame(self, pyramid, timestamp):
        """Returns ``(map, tracked frame)`` once initialized, else None."""
        self.frames += 1
        if self.frames > self.cfg.bootstrap_budget:
            raise BootstrapFailure(f"insufficient parallax after {self.cfg.bootstrap_budget} frames")
        kf1 = Keyframe(1, float(timestamp), pyramid, self.velocity.predict(), self.affine)
        backup = [(p.rho, list(p.observations)) for p in self.points]
        levels = min(self.cfg.bootstrap_levels, len(pyramid))
        problem = PbaProblem([self.kf0, kf1], [0, 1], [], self.points)
        try:
            rep = solve(problem, replace(self.pba, n_levels=levels), write_back=True)
        except Exception as exc:                                   # degenerate first frames
            log.debug("bootstrap solve failed: %s", exc)
            for p, (rho, obs) in zip(self.points, backup):
                p.rho, p.observations = rho, obs
            return None
        self.kf0.pose, self.kf0.affine = SE3(), AffineBrightness()
        self.pose, self.affine = kf1.pose, kf1.affine
        self.velocity.push(kf1.pose, kf1.affine)
        parallax = float(np.linalg.norm(kf1.pose.t)) * float(np.mean([p.rho for p in self.points]))
        if parallax < self.cfg.bootstrap_parallax:
            return None
        inl = rep.outliers <= 2
        m = Map()
        kf0 = self.kf0
        kf0.points = []
        m.add_keyframe(kf0)
        kf1.points = []
        m.add_keyframe(kf1)
        for (p, _), good in zip(problem.obs_ref, inl):
            if good:
                m.add_point(MapPoint(0, p.pixel, p.rho, status="active", observations=[Observation(1)],
                                     created=1))
        if len(m.points()) < 20:
            raise BootstrapFailure("too few points survived initialization")
        frame = TrackedFrame(float(timestamp), kf1.pose, kf1.affine, rep.final_energy,
                             float(np.mean(inl)), pyramid, 0)
        return m, frame
