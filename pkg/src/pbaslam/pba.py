"""Coarse-to-fine robust Levenberg-Marquardt photometric bundle adjustment.

Keyframes are duck-typed: ``id``, ``pose`` (world-from-camera SE3),
``affine`` (AffineBrightness) and ``pyramid``.  Points need ``host``,
``pixel`` (level-0), ``rho`` and ``observations`` (items with ``target``).
Camera parameters are ordered per keyframe as (twist w, twist v, a, b).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import kernels
from .errors import ConfigError, SolverFailure
from .geometry import SE3, pixel_to_level, se3_exp
from .image import PATTERN
from .photometric import BORDER_MARGIN, GRAD_C, AffineBrightness
from .robust import ErrorModel, fit_error_model, fit_keyframe_models

log = logging.getLogger(__name__)

REMOVE_FRACTION = 0.3
DISCARD_FRACTION = 0.6


@dataclass
class PbaConfig:
    n_levels: int = 2
    max_iters: int = 50
    lambda_init: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.5
    rel_tol: float = 1e-5
    lambda_max: float = 1e10
    model: str = "tdist"
    huber_lambda: float | None = None
    grad_c: float = GRAD_C
    backend: str | None = None

    def __post_init__(self):
        if self.n_levels < 1:
            raise ConfigError("n_levels must be >= 1")
        if not (self.lambda_init > 0 and self.lambda_up > 1 and 0 < self.lambda_down < 1):
            raise ConfigError("invalid damping schedule")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")


@dataclass
class LevelReport:
    level: int
    iterations: int = 0
    accepted: int = 0
    rejected: int = 0
    initial_energy: float = 0.0
    final_energy: float = 0.0
    update_norms: list = field(default_factory=list)
    discarded: int = 0
    models: dict = field(default_factory=dict)


@dataclass
class PbaReport:
    levels: list = field(default_factory=list)
    reverted: bool = False
    aborted: bool = False
    excluded_points: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    models: dict = field(default_factory=dict)
    masks: np.ndarray | None = None          # (O,) uint8 inlier bits after the solve
    outliers: np.ndarray | None = None       # (O,) outlier pixel counts
    initial_energy0: float = 0.0             # initial estimate evaluated with the level-0 models

    @property
    def final_energy(self):
        return self.levels[-1].final_energy if self.levels else 0.0


def outlier_mask(r, valid, threshold):
    """Inlier bit per pattern pixel (|r| < threshold and valid) and the outlier count."""
    inl = valid & (np.abs(r) < np.asarray(threshold)[..., None])
    bits = (inl * (1 << np.arange(r.shape[-1]))).sum(axis=-1).astype(np.uint8)
    return bits, r.shape[-1] - inl.sum(axis=-1)


def should_remove(n_outliers, n_pixels=len(PATTERN)):
    return n_outliers / n_pixels > REMOVE_FRACTION


def should_discard(n_outliers, n_pixels=len(PATTERN)):
    return n_outliers / n_pixels > DISCARD_FRACTION


class PbaProblem:
    """Active keyframes, fixed keyframes, points and their observations.

    ``fixed`` keyframes (and their affine parameters) are constants.  When
    ``fixed`` is empty the oldest active keyframe is held instead and the mean
    inverse depth is renormalized to 1 after the solve.  Points whose host is
    fixed contribute residuals with constant inverse depth.
    """

    def __init__(self, keyframes, active, fixed, points, models=None, scale_anchor=None):
        self.kfs = list(keyframes)
        self.index = {kf.id: i for i, kf in enumerate(self.kfs)}
        if len(self.index) != len(self.kfs):
            raise ValueError("duplicate keyframe ids")
        self.active = [int(a) for a in active]
        self.fixed = [int(f) for f in fixed]
        if not self.active:
            raise ValueError("no active keyframe")
        if set(self.active) & set(self.fixed):
            raise ValueError("active and fixed keyframes overlap")
        for k in self.active + self.fixed:
            if k not in self.index:
                raise ValueError(f"keyframe {k} missing")
        self.bootstrap = not self.fixed
        self.scale_anchor = scale_anchor
        held = [min(self.active, key=lambda k: (self.kfs[self.index[k]].timestamp
                                                if hasattr(self.kfs[self.index[k]], "timestamp") else 0, k))] \
            if self.bootstrap else []
        self.held = held
        self.variable = [k for k in self.active if k not in held]
        self.cam_var = {k: i for i, k in enumerate(self.variable)}
        window = set(self.active) | set(self.fixed)
        active_set = set(self.active)

        self.points = []
        obs_point, obs_target, obs_ref = [], [], []
        for p in points:
            if p.host not in window:
                continue
            host_active = p.host in active_set
            pi = len(self.points)
            added = False
            for oi, ob in enumerate(p.observations):
                if getattr(ob, "removed", False) or ob.target not in window or ob.target == p.host:
                    continue
                if not host_active and ob.target not in active_set:
                    continue
                obs_point.append(pi)
                obs_target.append(ob.target)
                obs_ref.append((p, oi))
                added = True
            if host_active or added:
                self.points.append(p)
        self.obs_point = np.array(obs_point, dtype=np.int64)
        self.obs_target_id = np.array(obs_target, dtype=np.int64)
        self.obs_ref = obs_ref
        self.pt_host_id = np.array([p.host for p in self.points], dtype=np.int64)
        self.pt_var = np.full(len(self.points), -1, dtype=np.int64)
        nv = 0
        for i, p in enumerate(self.points):
            if p.host in active_set:
                self.pt_var[i] = nv
                nv += 1
        self.n_pvar = nv
        self.models = dict(models) if models else {}
        # state
        self.poses = [kf.pose for kf in self.kfs]
        self.aff = np.array([[kf.affine.a, kf.affine.b] for kf in self.kfs], dtype=float)
        self.rho = np.array([p.rho for p in self.points], dtype=float)
        self.pixel = np.array([p.pixel for p in self.points], dtype=float).reshape(-1, 2)
        self.obs_host = np.array([self.index[h] for h in self.pt_host_id[self.obs_point]], dtype=np.int64) \
            if len(self.obs_point) else np.zeros(0, np.int64)
        self.obs_target = np.array([self.index[t] for t in self.obs_target_id], dtype=np.int64)
        self.obs_host_cam = np.array([self.cam_var.get(int(self.kfs[h].id), -1) for h in self.obs_host],
                                     dtype=np.int64)
        self.obs_target_cam = np.array([self.cam_var.get(int(t), -1) for t in self.obs_target_id],
                                       dtype=np.int64)
        self.obs_point_var = self.pt_var[self.obs_point] if len(self.obs_point) else np.zeros(0, np.int64)
        self.enabled = np.ones(len(self.obs_point), dtype=bool)
        self._level_cache = {}

    # ------------------------------------------------------------------
    @property
    def n_cam(self):
        return len(self.variable)

    @property
    def n_obs(self):
        return len(self.obs_point)

    def state(self):
        return list(self.poses), self.aff.copy(), self.rho.copy()

    def set_state(self, st):
        self.poses, self.aff, self.rho = list(st[0]), st[1].copy(), st[2].copy()

    def _level_data(self, level, grad_c):
        key = (level, grad_c)
        if key in self._level_cache:
            return self._level_cache[key]
        imgs = [kf.pyramid[level] for kf in self.kfs]
        images = np.stack([im.data for im in imgs])
        gxs = np.stack([im.gradients[0] for im in imgs])
        gys = np.stack([im.gradients[1] for im in imgs])
        cam = self.kfs[0].pyramid.cameras[level]
        uv = pixel_to_level(self.pixel, level) if len(self.pixel) else self.pixel
        host_vals = np.zeros((len(self.points), len(PATTERN)))
        host_ok = np.zeros((len(self.points), len(PATTERN)), dtype=bool)
        wg = np.zeros((len(self.points), len(PATTERN)))
        for h in np.unique(self.pt_host_id):
            sel = np.nonzero(self.pt_host_id == h)[0]
            hi = self.index[int(h)]
            xs = (uv[sel, 0:1] + PATTERN[:, 0]).ravel()
            ys = (uv[sel, 1:2] + PATTERN[:, 1]).ravel()
            v, g, ok = kernels.sample_many(images[hi], gxs[hi], gys[hi], xs, ys, margin=BORDER_MARGIN)
            host_vals[sel] = v.reshape(-1, len(PATTERN))
            host_ok[sel] = ok.reshape(-1, len(PATTERN))
            wg[sel] = (grad_c ** 2 / (grad_c ** 2 + (g ** 2).sum(1))).reshape(-1, len(PATTERN))
        out = dict(images=images, gxs=gxs, gys=gys, cam=cam, uv=uv, host_vals=host_vals,
                   host_ok=host_ok, wg=wg)
        self._level_cache[key] = out
        return out

    def linearize(self, level, grad_c=GRAD_C, backend=None):
        """Residuals and Jacobians of every observation at the current state."""
        d = self._level_data(level, grad_c)
        n = self.n_obs
        R_ji = np.zeros((n, 3, 3))
        t_ji = np.zeros((n, 3))
        R_j = np.zeros((n, 3, 3))
        t_j = np.zeros((n, 3))
        inv = [T.inverse() for T in self.poses]
        pairs = {}
        for o in range(n):
            h, t = int(self.obs_host[o]), int(self.obs_target[o])
            if (h, t) not in pairs:
                pairs[(h, t)] = inv[t] @ self.poses[h]
            T = pairs[(h, t)]
            R_ji[o], t_ji[o] = T.R, T.t
            R_j[o], t_j[o] = self.poses[t].R, self.poses[t].t
        a_h, b_h = self.aff[self.obs_host, 0], self.aff[self.obs_host, 1]
        a_t, b_t = self.aff[self.obs_target, 0], self.aff[self.obs_target, 1]
        cam = d["cam"]
        r, valid, J_pose, J_rho, J_aff = kernels.linearize(
            d["images"], d["gxs"], d["gys"], PATTERN, d["uv"], self.rho, d["host_vals"], d["host_ok"],
            self.obs_point, self.obs_target, R_ji, t_ji, R_j, t_j, np.exp(a_h - a_t), b_h, b_t,
            cam.fx, cam.fy, cam.cx, cam.cy, BORDER_MARGIN, backend=backend)
        wg = d["wg"][self.obs_point] if n else np.zeros((0, len(PATTERN)))
        return r, valid, wg, J_pose, J_rho, J_aff

    # ------------------------------------------------------------------
    def fit_models(self, r, valid, kind="tdist", huber_lambda=None):
        sel = valid & self.enabled[:, None]
        tg = np.broadcast_to(self.obs_target_id[:, None], r.shape)
        if sel.sum() < 2:
            return {int(k): ErrorModel(kind, 1.0, lam=1.345) for k in np.unique(self.obs_target_id)}
        models = fit_keyframe_models(r[sel], tg[sel], kind, huber_lambda)
        missing = set(int(k) for k in np.unique(self.obs_target_id)) - set(models)
        if missing:
            # targets without a valid residual share the pooled model
            pooled = fit_error_model(r[sel], kind, huber_lambda)
            models.update({k: pooled for k in missing})
        return models

    def thresholds(self, models):
        return np.array([models[int(t)].percentile95 if int(t) in models else np.inf
                         for t in self.obs_target_id]) if self.n_obs else np.zeros(0)

    def robust_terms(self, r, valid, wg, models, active_obs):
        """Per-residual IRLS weights and robust costs (zero for inactive entries)."""
        w = np.zeros_like(r)
        c = np.zeros_like(r)
        for t in np.unique(self.obs_target_id):
            sel = (self.obs_target_id == t) & active_obs
            if not np.any(sel):
                continue
            m = models[int(t)]
            rs = r[sel]
            w[sel] = m.weight(rs) * wg[sel]
            c[sel] = m.cost(rs) * wg[sel]
        mask = valid & active_obs[:, None]
        return np.where(mask, w, 0.0), np.where(mask, c, 0.0)

    def energy(self, r, valid, wg, models, active_obs, ref_valid=None):
        """Robust energy; pixels valid at ``ref_valid`` but now invalid pay the p95 cost."""
        _, c = self.robust_terms(r, valid, wg, models, active_obs)
        e = float(c.sum())
        if ref_valid is not None:
            lost = ref_valid & ~valid & active_obs[:, None]
            if np.any(lost):
                pen = np.array([models[int(t)].cost(min(models[int(t)].percentile95, 1e6))
                                for t in self.obs_target_id])
                e += float((lost * pen[:, None]).sum())
        return e

    # ------------------------------------------------------------------
    def normal_equations(self, w, r, J_pose, J_rho, J_aff, backend=None):
        return kernels.accumulate(w, r, J_pose, J_rho, J_aff, self.obs_host_cam, self.obs_target_cam,
                                  self.obs_point_var, self.n_cam, self.n_pvar, backend=backend)

    def apply(self, delta_c, delta_p):
        """State after a step: left-composed pose twists, additive affine and inverse depth."""
        poses = list(self.poses)
        aff = self.aff.copy()
        for k, ci in self.cam_var.items():
            i = self.index[k]
            dc = delta_c[8 * ci: 8 * ci + 8]
            poses[i] = se3_exp(dc[:6]) @ poses[i]
            aff[i] += dc[6:8]
        rho = self.rho.copy()
        var = self.pt_var >= 0
        rho[var] += delta_p[self.pt_var[var]]
        return poses, aff, rho

    def write_back(self):
        """Store optimized parameters into the keyframe and point objects (active only)."""
        for k in self.active:
            i = self.index[k]
            kf = self.kfs[i]
            kf.pose = self.poses[i]
            kf.affine = AffineBrightness(float(self.aff[i, 0]), float(self.aff[i, 1]))
        for i, p in enumerate(self.points):
            if self.pt_var[i] >= 0:
                p.rho = float(self.rho[i])


def schur_reduce(Hcc, Hcp, Hpp, bc, bp, damping=0.0):
    """Reduced camera system ``(S, g)`` and the per-point inverse diagonal.

    Points with a zero diagonal entry are excluded (their row/column is
    dropped and their increment is zero); they are returned as ``excluded``.
    """
    Hpp_d = Hpp * (1.0 + damping)
    excluded = Hpp_d <= 0
    inv = np.where(excluded, 0.0, 1.0 / np.where(excluded, 1.0, Hpp_d))
    Hcc_d = Hcc + damping * np.diag(np.diag(Hcc))
    W = Hcp * inv[None, :]
    S = Hcc_d - W @ Hcp.T
    g = bc - W @ bp
    return S, g, inv, np.nonzero(excluded)[0]


def solve_reduced(Hcc, Hcp, Hpp, bc, bp, damping):
    """Damped Gauss-Newton increment via the Schur complement.

    Raises :class:`SolverFailure` when the damped system is not positive definite.
    """
    S, g, inv, excluded = schur_reduce(Hcc, Hcp, Hpp, bc, bp, damping)
    if S.shape[0]:
        # unobserved camera parameters get a tiny ridge so the factorization exists
        S = S + np.diag(np.where(np.diag(S) <= 1e-12, 1e-9, 0.0))
        try:
            cf = scipy.linalg.cho_factor(0.5 * (S + S.T), check_finite=False)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise SolverFailure(f"reduced system not positive definite: {exc}") from exc
        dc = -scipy.linalg.cho_solve(cf, g, check_finite=False)
    else:
        dc = np.zeros(0)
    dp = -inv * (bp + Hcp.T @ dc)
    if not (np.all(np.isfinite(dc)) and np.all(np.isfinite(dp))):
        raise SolverFailure("non-finite increment")
    return dc, dp, excluded


def solve_dense(Hcc, Hcp, Hpp, bc, bp, damping):
    """Reference full-system solve (for testing the Schur path)."""
    nc = Hcc.shape[0]
    H = np.block([[Hcc, Hcp], [Hcp.T, np.diag(Hpp)]])
    H = H + damping * np.diag(np.diag(H))
    b = np.concatenate([bc, bp])
    keep = np.ones(len(b), dtype=bool)
    keep[nc:] = Hpp > 0
    x = np.zeros(len(b))
    x[keep] = -np.linalg.solve(H[np.ix_(keep, keep)], b[keep])
    return x[:nc], x[nc:]


def lm_step(problem, level, damping, models=None, config=None):
    """Candidate increment (camera part, point part) at the current state with frozen weights."""
    config = config or PbaConfig()
    r, valid, wg, Jp, Jr, Ja = problem.linearize(level, config.grad_c, config.backend)
    models = models or problem.models or problem.fit_models(r, valid, config.model, config.huber_lambda)
    w, _ = problem.robust_terms(r, valid, wg, models, problem.enabled)
    Hcc, Hcp, Hpp, bc, bp = problem.normal_equations(w, r, Jp, Jr, Ja, config.backend)
    dc, dp, _ = solve_reduced(Hcc, Hcp, Hpp, bc, bp, damping)
    return dc, dp


def fix_gauge(keyframes, active, points):
    """Non-active keyframes sharing an observation with the active set.

    Returns the ids of keyframes that host a point observed by an active
    keyframe or that observe a point hosted by an active keyframe.  An
    empty result means the caller must fall back to holding the oldest
    active keyframe (see :class:`PbaProblem`).
    """
    active = set(active)
    known = {kf.id for kf in keyframes}
    fixed = set()
    for p in points:
        targets = {ob.target for ob in p.observations if not getattr(ob, "removed", False)}
        if p.host in active:
            fixed |= {t for t in targets if t not in active}
        elif targets & active:
            fixed.add(p.host)
    return sorted(fixed & known)


def _renormalize(problem):
    """Bootstrap gauge: scale the free scene about the held camera so mean rho = 1."""
    var = problem.pt_var >= 0
    if not np.any(var):
        return
    m = float(np.mean(problem.rho[var]))
    if problem.scale_anchor is not None:
        m = m / problem.scale_anchor
    if not m > 0:
        return
    c = problem.poses[problem.index[problem.held[0]]].t
    problem.rho = np.where(var, problem.rho / m, problem.rho)
    problem.poses = [SE3(T.R, c + m * (T.t - c)) if problem.kfs[i].id in problem.cam_var else T
                     for i, T in enumerate(problem.poses)]


def _solve_level(problem, level, config, report, initial_state=None):
    lv = LevelReport(level)
    r, valid, wg, Jp, Jr, Ja = problem.linearize(level, config.grad_c, config.backend)
    models = problem.fit_models(r, valid, config.model, config.huber_lambda)
    _, n_out = outlier_mask(r, valid, problem.thresholds(models))
    problem.enabled = ~should_discard(n_out)
    lv.discarded = int((~problem.enabled).sum())
    lv.models = models
    if initial_state is not None:
        current = problem.state()
        problem.set_state(initial_state)
        r0, v0, wg0, *_ = problem.linearize(level, config.grad_c, config.backend)
        E0 = problem.energy(r0, v0, wg0, models, problem.enabled, valid)
        report.initial_energy0 = E0
        if E0 < problem.energy(r, valid, wg, models, problem.enabled):
            report.reverted = True
            r, valid, wg, Jp, Jr, Ja = problem.linearize(level, config.grad_c, config.backend)
        else:
            problem.set_state(current)
    # pixels valid at the start of the level pay a fixed cost if a step pushes them out
    ref_valid = valid.copy()
    E = problem.energy(r, valid, wg, models, problem.enabled, ref_valid)
    lv.initial_energy = E
    lam = config.lambda_init
    small = 0
    while lv.iterations < config.max_iters:
        lv.iterations += 1
        w, _ = problem.robust_terms(r, valid, wg, models, problem.enabled)
        Hcc, Hcp, Hpp, bc, bp = problem.normal_equations(w, r, Jp, Jr, Ja, config.backend)
        try:
            dc, dp, excl = solve_reduced(Hcc, Hcp, Hpp, bc, bp, lam)
        except SolverFailure:
            lv.rejected += 1
            lam *= config.lambda_up
            if lam > config.lambda_max:
                report.aborted = True
                break
            continue
        report.excluded_points = excl
        step = float(np.sqrt(dc @ dc + dp @ dp))
        if step < 1e-10:
            lv.update_norms.append(step)
            break
        cand = problem.apply(dc, dp)
        if np.any(cand[2][problem.pt_var >= 0] <= 0):
            ok = False
        else:
            old = problem.state()
            problem.set_state(cand)
            rn, vn, wgn, Jpn, Jrn, Jan = problem.linearize(level, config.grad_c, config.backend)
            En = problem.energy(rn, vn, wgn, models, problem.enabled, ref_valid)
            ok = En <= E
            if not ok:
                problem.set_state(old)
        if ok:
            lv.accepted += 1
            lv.update_norms.append(step)
            rel = (E - En) / max(E, 1e-300)
            r, valid, wg, Jp, Jr, Ja = rn, vn, wgn, Jpn, Jrn, Jan
            E = En
            lam = max(lam * config.lambda_down, 1e-12)
            small = small + 1 if rel < config.rel_tol else 0
            if small >= 2 or E == 0.0:
                break
        else:
            lv.rejected += 1
            lam *= config.lambda_up
            if lam > config.lambda_max:
                break
    lv.final_energy = E
    report.levels.append(lv)
    return r, valid


def solve(problem, config=None, write_back=True):
    """Coarse-to-fine PBA; models and discard masks are rebuilt at every level.

    Energies of different levels are not comparable: each level uses its
    own images and freshly fitted models.  At the start of level 0 the
    initial estimate is restored if it scores better.
    """
    config = config or PbaConfig()
    report = PbaReport()
    if problem.n_obs == 0:
        raise SolverFailure("problem has no observations")
    initial = problem.state()
    for level in reversed(range(config.n_levels)):
        _solve_level(problem, level, config, report,
                     initial_state=initial if level == 0 and config.n_levels > 1 else None)
    if config.n_levels == 1:
        report.initial_energy0 = report.levels[0].initial_energy
    if problem.bootstrap:
        _renormalize(problem)
    r, valid, *_ = problem.linearize(0, config.grad_c, config.backend)
    report.models = problem.fit_models(r, valid, config.model, config.huber_lambda)
    report.masks, report.outliers = outlier_mask(r, valid, problem.thresholds(report.models))
    problem.models = report.models
    if write_back:
        problem.write_back()
    return report


def global_pba(keyframes, points, config=None):
    """Joint refinement of every keyframe and point; the first keyframe anchors the gauge.

    Scale is pinned by restoring the mean inverse depth of the optimized points.
    """
    kfs = sorted(keyframes, key=lambda k: k.id)
    if len(kfs) < 2:
        return None
    pts = [p for p in points if getattr(p, "status", "active") in ("active", "mature")]
    if not pts:
        return None
    mean_rho = float(np.mean([p.rho for p in pts]))
    problem = PbaProblem(kfs, [k.id for k in kfs], [], pts, scale_anchor=mean_rho)
    if problem.n_obs == 0:
        return None
    return solve(problem, config)
