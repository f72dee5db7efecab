"""Full pipeline: bootstrap, tracking, keyframe creation, local window PBA.

``Slam.process`` runs tracking and mapping interleaved in one thread (the
deterministic mode).  ``run_threaded`` puts mapping on a second thread that
receives every tracked frame over an ordered queue and publishes immutable
tracking snapshots back.
"""
from __future__ import annotations

import logging
import queue
import threading
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import ConfigError, TrackingLost
from .frontend import (Bootstrapper, FrontendConfig, TrackingReference, VelocityModel, activate_points,
                       add_observations, keyframe_decision, make_candidates, track_frame, update_candidates)
from .geometry import SE3
from .image import build_pyramid
from .io_eval import Trajectory, map_cloud
from .map_lmcw import Keyframe, build_window, enforce_maturity, insert_temporal, project_into, update_masks, \
    world_points
from .pba import PbaConfig, PbaProblem, global_pba, solve

log = logging.getLogger(__name__)


@dataclass
class SlamConfig:
    n_t: int = 4
    n_c: int = 3
    dmap_stride: int = 4
    max_angle: float = 40.0
    pyramid_levels: int = 4
    final_global_pba: bool = False
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    pba: PbaConfig = field(default_factory=PbaConfig)

    def __post_init__(self):
        if self.n_t < 2 or self.n_c < 0:
            raise ConfigError("need n_t >= 2 and n_c >= 0")
        if self.dmap_stride < 1 or self.pyramid_levels < 1:
            raise ConfigError("dmap_stride and pyramid_levels must be positive")

    @classmethod
    def from_flat(cls, values):
        """Build from a flat key/value mapping; keys of the frontend and PBA configs share one namespace."""
        values = dict(values or {})
        own = {f.name for f in fields(cls)} - {"frontend", "pba"}
        fe = {f.name for f in fields(FrontendConfig)}
        pb = {f.name for f in fields(PbaConfig)} - {"backend", "grad_c"}
        top, fkw, pkw = {}, {}, {}
        for k, v in values.items():
            if k in own:
                top[k] = v
            elif k in fe:
                fkw[k] = tuple(v) if k == "rho_range" else v
            elif k in pb:
                pkw[k] = v
            else:
                raise ConfigError(f"unknown config key {k!r}")
        if "backend" in fkw:
            pkw["backend"] = fkw["backend"]
        if "grad_c" in fkw:
            pkw["grad_c"] = fkw["grad_c"]
        try:
            return cls(frontend=FrontendConfig(**fkw), pba=PbaConfig(**pkw), **top)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass
class WindowLog:
    keyframe: int
    frame: int
    temporal: list
    covisible: list
    fixed: list
    activated: int
    n_points: int


class Slam:
    def __init__(self, camera, config=None):
        self.cfg = config or SlamConfig()
        self.camera = camera
        self.map = None
        self.boot = None
        self.candidates = {}
        self.reference = None
        self.velocity = VelocityModel()
        self.frames = {}                # frame index -> (timestamp, reference kf id, kf-from-frame pose)
        self.windows = []
        self.timings = {"tracking": [], "local_pba": [], "keyframe": []}
        self.n_frames = 0
        self.last = None
        self.kf_pending = False

    # ------------------------------------------------------------------
    def process(self, image, timestamp):
        """Feed one frame; returns its TrackedFrame (None while bootstrapping)."""
        frame, is_kf = self.track(image, timestamp)
        if frame is not None:
            self.map_frame(frame, is_kf)
            if is_kf:
                # continue from the optimized keyframe pose
                kf = self.map.latest()
                self.velocity.reset(kf.pose)
                self.last = replace(frame, pose=kf.pose, affine=kf.affine, pyramid=None)
        return frame

    def track(self, image, timestamp):
        """Tracking half: returns ``(frame, keyframe?)``."""
        idx = self.n_frames
        self.n_frames += 1
        pyr = build_pyramid(image, self.camera, self.cfg.pyramid_levels)
        fcfg = self.cfg.frontend
        if self.map is None:
            return self._bootstrap(pyr, timestamp), False
        ref = self.reference
        t0 = time.perf_counter()
        try:
            frame = track_frame(pyr, ref, self.velocity.predict(), self.last.affine, fcfg, timestamp)
        except TrackingLost as exc:
            log.info("frame %d lost (%s); retrying with identity motion", idx, exc)
            frame = track_frame(pyr, ref, self.last.pose, self.last.affine, fcfg, timestamp, iter_scale=2)
        self.timings["tracking"].append(time.perf_counter() - t0)
        frame.index = idx
        self.velocity.push(frame.pose, frame.affine)
        self.last = frame
        kf = ref.snapshot_kf
        is_kf, _ = keyframe_decision(frame, kf, ref.points_world, fcfg)
        # one keyframe request at a time: the snapshot stays stale until mapping publishes
        is_kf = is_kf and not self.kf_pending
        self.kf_pending = self.kf_pending or is_kf
        self.frames[idx] = (float(timestamp), kf.id, kf.pose.inverse() @ frame.pose)
        return frame, is_kf

    def _bootstrap(self, pyr, timestamp):
        if self.boot is None:
            self.boot = Bootstrapper(pyr, timestamp, self.cfg.frontend, self.cfg.pba)
            self._boot_frames = [(float(timestamp), 0)]
            return None
        out = self.boot.add_frame(pyr, timestamp)
        if out is None:
            return None
        self.map, frame = out
        self.map.temporal = [0, 1]
        frame.index = self.n_frames - 1
        self.frames[0] = (self.map.keyframes[0].timestamp, 0, SE3())
        self.frames[frame.index] = (float(timestamp), 1, self.map.keyframes[1].pose.inverse() @ frame.pose)
        self.velocity.reset(frame.pose)
        self.last = frame
        kf1 = self.map.keyframes[1]
        self.candidates[1] = make_candidates(kf1, self.cfg.frontend, self._rho_ref(kf1))
        window, _ = build_window(self.map, 1, self.cfg.n_c, self.cfg.dmap_stride,
                                 self.cfg.frontend.depletion_radius, self.cfg.max_angle, self.cfg.pba.backend)
        self.windows.append(WindowLog(1, frame.index, list(window.temporal), [], list(window.fixed), 0,
                                      len(self.map.points())))
        self._publish(window)
        return None

    # ------------------------------------------------------------------
    def map_frame(self, frame, is_kf):
        """Mapping half: candidate search on every frame, keyframe insertion when decided."""
        fcfg = self.cfg.frontend
        for host in list(self.map.temporal):
            if host in self.candidates:
                update_candidates(self.candidates[host], self.map.keyframes[host], frame.pose, frame.affine,
                                  frame.pyramid[0], fcfg)
        if is_kf:
            self.add_keyframe(frame)

    def add_keyframe(self, frame):
        t0 = time.perf_counter()
        cfg, fcfg = self.cfg, self.cfg.frontend
        m = self.map
        kid = max(m.keyframes) + 1
        kf = Keyframe(kid, frame.timestamp, frame.pyramid, frame.pose, frame.affine)
        m.add_keyframe(kf)
        dropped = insert_temporal(m, kid, cfg.n_t)
        if dropped is not None:
            self.candidates.pop(dropped, None)
        window, dmap = build_window(m, kid, cfg.n_c, cfg.dmap_stride, fcfg.depletion_radius, cfg.max_angle,
                                    cfg.pba.backend)
        add_observations(m, m.points(window.active), [kid])
        new = activate_points(m, kf, self.candidates, dmap, fcfg, cfg.pba.backend)
        add_observations(m, new, window.active)
        t1 = time.perf_counter()
        ids = window.active + window.fixed
        problem = PbaProblem([m.keyframes[k] for k in ids], window.active, window.fixed, m.points(ids))
        if problem.n_obs:
            report = solve(problem, cfg.pba)
            update_masks(problem, report)
        self.timings["local_pba"].append(time.perf_counter() - t1)
        enforce_maturity(m, kid)
        self.candidates[kid] = make_candidates(kf, fcfg, self._rho_ref(kf))
        self.windows.append(WindowLog(kid, getattr(frame, "index", -1), list(window.temporal),
                                      list(window.covisible), list(window.fixed), len(new), len(m.points())))
        # the frame's pose now is the keyframe pose
        self.frames[frame.index] = (frame.timestamp, kid, SE3())
        self._publish(window)
        self.kf_pending = False
        self.timings["keyframe"].append(time.perf_counter() - t0)

    def _rho_ref(self, kf):
        pw = np.concatenate([world_points(k) for k in self.map.keyframes.values()] + [np.zeros((0, 3))])
        if len(pw) == 0:
            return 1.0
        _, ok = project_into(kf.camera, kf.pose, pw)
        z = kf.pose.inverse().act(pw[ok])[:, 2]
        return float(np.median(1.0 / z)) if len(z) else 1.0

    def _publish(self, window):
        kf = self.map.keyframes[window.latest]
        pts = self.map.points(window.active)
        hosts = {}
        for p in pts:
            hosts.setdefault(p.host, []).append(p)
        pw = np.concatenate([world_points(self.map.keyframes[h], ps) for h, ps in hosts.items()]
                            + [np.zeros((0, 3))])
        snap = Keyframe(kf.id, kf.timestamp, kf.pyramid, kf.pose, kf.affine)
        ref = TrackingReference(snap, pw, self.cfg.frontend)
        ref.snapshot_kf = snap
        ref.points_world = pw
        self.reference = ref

    # ------------------------------------------------------------------
    def finish(self):
        if self.map is None:
            return None
        if self.cfg.final_global_pba:
            m = self.map
            global_pba(list(m.keyframes.values()), m.points(), self.cfg.pba)
        return self.map

    def keyframe_trajectory(self):
        kfs = sorted(self.map.keyframes.values(), key=lambda k: k.timestamp)
        return Trajectory([k.timestamp for k in kfs], [k.pose for k in kfs])

    def frame_trajectory(self):
        rows = sorted(self.frames.values(), key=lambda r: r[0])
        return Trajectory([r[0] for r in rows], [self.map.keyframes[r[1]].pose @ r[2] for r in rows])

    def point_cloud(self):
        return map_cloud(self.map)

    def report(self):
        def stats(v):
            v = np.asarray(v, dtype=float)
            if not len(v):
                return {"count": 0}
            return {"count": int(len(v)), "mean_ms": 1e3 * float(v.mean()), "median_ms": 1e3 * float(np.median(v)),
                    "max_ms": 1e3 * float(v.max())}
        return {"frames": self.n_frames, "tracked": len(self.frames),
                "keyframes": len(self.map.keyframes) if self.map else 0,
                "points": len(self.map.points()) if self.map else 0,
                "timings": {k: stats(v) for k, v in self.timings.items()},
                "windows": [vars(w) for w in self.windows]}


def run_sequence(images, timestamps, camera, config=None):
    """Sequential deterministic run over an iterable of images."""
    slam = Slam(camera, config)
    for img, ts in zip(images, timestamps):
        slam.process(img, ts)
    slam.finish()
    return slam


def run_threaded(images, timestamps, camera, config=None):
    """Tracking in the caller's thread, mapping on a worker thread.

    Frames go to mapping over an ordered queue; tracking always uses the most
    recently published snapshot, so results depend on thread timing.
    """
    slam = Slam(camera, config)
    q = queue.Queue(maxsize=16)
    errors = []

    def mapper():
        while True:
            item = q.get()
            if item is None:
                return
            if errors:
                continue
            try:
                slam.map_frame(*item)
            except Exception as exc:           # re-raised in the caller
                errors.append(exc)
                slam.kf_pending = False

    worker = threading.Thread(target=mapper, name="mapping", daemon=True)
    worker.start()
    try:
        for img, ts in zip(images, timestamps):
            if errors:
                break
            frame, is_kf = slam.track(img, ts)
            if frame is not None:
                q.put((frame, is_kf))
    finally:
        q.put(None)
        worker.join()
    if errors:
        raise errors[0]
    slam.finish()
    return slam
