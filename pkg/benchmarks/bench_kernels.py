"""Time the numba kernels against their numpy fallbacks on a real local window.

    python benchmarks/bench_kernels.py [--frames 40] [--repeat 5]

A short synthetic sequence is processed first; the benchmark then reuses the
last local window (keyframes, points, candidates) so the inputs have the
sizes seen during mapping.  Compilation time is excluded by a warm-up call.
"""
import argparse
import copy
import time

import numpy as np

from pbaslam import kernels
from pbaslam.frontend import FrontendConfig, update_candidates
from pbaslam.map_lmcw import build_distance_map
from pbaslam.pba import PbaConfig, PbaProblem, solve
from pbaslam.synthetic import make_sequence
from pbaslam.system import SlamConfig, run_sequence


def best_of(fn, repeat):
    fn()                                   # warm-up / JIT compile
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--frames", type=int, default=40)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if "numba" not in kernels.BACKENDS:
        raise SystemExit("numba is not installed; nothing to compare")

    seq = make_sequence("revisit-loop", args.frames, noise_sigma=1.0)
    slam = run_sequence(seq.images, seq.timestamps, seq.camera, SlamConfig.from_flat({"depletion_radius": 8}))
    m = slam.map
    latest = m.latest()
    w = slam.windows[-1]
    ids = w.temporal + w.covisible
    kfs = [m.keyframes[k] for k in ids + w.fixed]
    points = m.points(ids + w.fixed)
    prob = PbaProblem(kfs, ids if w.fixed else ids[1:], w.fixed or ids[:1], points)
    # candidates of an older temporal keyframe searched in the last frame
    host_id = next(k for k in sorted(w.temporal) if k in slam.candidates and k != latest.id)
    host, cands = m.keyframes[host_id], slam.candidates[host_id]
    frame = seq.images[-1]
    pose = slam.frame_trajectory().poses[-1]
    print(f"window: {len(kfs)} keyframes, {len(points)} points, {prob.n_obs} observations; "
          f"{len(cands)} candidates")

    def lin(b):
        return lambda: prob.linearize(0, backend=b)

    def acc(b):
        r, valid, wg, Jp, Jr, Ja = prob.linearize(0)
        w = np.where(valid, wg, 0.0)
        return lambda: prob.normal_equations(w, r, Jp, Jr, Ja, backend=b)

    def dmap(b):
        return lambda: build_distance_map(latest, kfs, 4, b)

    def search(b):
        cfg = FrontendConfig(backend=b)
        return lambda: update_candidates(copy.deepcopy(cands), host, pose, latest.affine, frame, cfg)

    def pba(b):
        def run():
            p = copy.deepcopy(prob)
            solve(p, PbaConfig(backend=b, max_iters=5))
        return run

    rows = []
    for name, make in [("linearize (level 0)", lin), ("normal equations", acc), ("distance map", dmap),
                       ("epipolar search", search), ("local PBA, 5 iters", pba)]:
        t_nb = best_of(make("numba"), args.repeat)
        t_np = best_of(make("numpy"), args.repeat)
        rows.append((name, t_nb, t_np))
    print(f"{'kernel':<22}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for name, a, b in rows:
        print(f"{name:<22}{1e3 * a:>12.2f}{1e3 * b:>12.2f}{b / a:>9.1f}x")


if __name__ == "__main__":
    main()
