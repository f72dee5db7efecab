"""Acceptance suite: one PASS/FAIL line per criterion, at the stated tolerances.

Run with ``pytest tests/test_acceptance.py -v``; the lines are also repeated
in the terminal summary.  The end-to-end criteria render and process eleven
100-frame sequences, so the whole file takes roughly ten minutes on one core.
"""
import hashlib
import os
import time
from pathlib import Path

import numpy as np
import pytest
from scenes import perturb, plane_scene, problem_scene
from test_map_lmcw import covisible_oracle, drop_oracle, kf_at, random_map
from test_photometric import fd_jacobian, random_config

from pbaslam.geometry import CameraModel
from pbaslam.io_eval import Trajectory, evaluate, write_trajectory
from pbaslam.map_lmcw import build_distance_map, select_covisible, temporal_drop, update_masks
from pbaslam.pba import PbaConfig, PbaProblem, should_discard, should_remove, solve
from pbaslam.robust import (
    fit_error_model, fit_tdist, prefilter, t_logpdf, weight_gaussian, weight_huber,
    weight_tdist)
from pbaslam.synthetic import make_sequence, surface_points
from pbaslam.system import SlamConfig, run_sequence

pytestmark = pytest.mark.acceptance

SUMMARY = []
LOOP_RADIUS = 8.0          # depletion radius for 256x192 renders (see configs/synthetic.yaml)


def report(n, ok, detail, capsys):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}"
    SUMMARY.append(line)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


# ---------------------------------------------------------------- 1

def test_criterion_1_jacobians(capsys):
    cam = CameraModel(80.0, 80.0, 47.5, 35.5, 96, 72)
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(500):
        host, tgt, uv, rho, (r, valid, wg, Jp, Jr, Ja) = random_config(rng, cam)
        an = np.concatenate([Jp, -Jp, Jr[:, None], Ja], axis=1)
        fd = fd_jacobian(host, tgt, cam, uv, rho)
        worst = max(worst, float(np.max(np.abs(an - fd) / np.maximum(np.abs(fd), 1e-6))))
    dt = time.perf_counter() - t0
    report(1, worst < 1e-3 and dt < 10, f"max relative error {worst:.2e} over 500 configurations, {dt:.1f} s",
           capsys)


# ---------------------------------------------------------------- 2

def test_criterion_2_weights(capsys):
    rs = np.linspace(-60, 60, 241)
    worst = 0.0
    for sigma in (0.3, 1.0, 2.5, 9.0):
        g = weight_gaussian(rs, sigma)
        worst = max(worst, float(np.max(np.abs(g - 1 / sigma ** 2) * sigma ** 2)))
        for nu in (0.7, 2.0, 5.0, 40.0):
            want = (nu + 1) / (nu + (rs / sigma) ** 2)
            worst = max(worst, float(np.max(np.abs(weight_tdist(rs, nu, sigma) - want) / want)))
        for lam in (0.5, 1.345 * sigma, 9.0):
            want = np.array([1 / sigma ** 2 if abs(r) < lam else lam / (sigma ** 2 * abs(r)) for r in rs])
            worst = max(worst, float(np.max(np.abs(weight_huber(rs, sigma, lam) - want) / want)))
    # weight = -d log p / dr / r, up to the constant 1/sigma^2 absorbed in the t weight
    fd_worst = 0.0
    for nu in (1.0, 3.0, 5.0, 30.0):
        for sigma in (0.5, 1.0, 4.0):
            for r in np.linspace(-20, 20, 40):
                h = 1e-5 * max(1.0, abs(r))
                dlogp = (t_logpdf(r + h, nu, sigma) - t_logpdf(r - h, nu, sigma)) / (2 * h)
                got = -dlogp / r * sigma ** 2
                fd_worst = max(fd_worst, abs(got / weight_tdist(r, nu, sigma) - 1))
    report(2, worst <= 1e-12 and fd_worst <= 1e-6,
           f"closed forms max relative deviation {worst:.1e}; log-density derivative {fd_worst:.1e}", capsys)


# ---------------------------------------------------------------- 3

def test_criterion_3_tfit_and_prefilter(capsys):
    ok = 0
    for seed in range(100):
        x = 2.0 * np.random.default_rng(seed).standard_t(5, size=10_000)
        nu, sigma = fit_tdist(x)
        ok += (3.5 <= nu <= 7) and (1.85 <= sigma <= 2.15)
    removed = []
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        x = 2.0 * rng.standard_t(5, size=10_000)
        bad = 100 * 2.0 * rng.choice([-1.0, 1.0], size=100)
        kept = prefilter(np.concatenate([x, bad]))
        removed.append(1 - np.isin(kept, bad).sum() / len(bad))
    frac = float(np.min(removed))
    report(3, ok >= 95 and frac >= 0.99,
           f"{ok}/100 fits inside nu in [3.5, 7], sigma in [1.85, 2.15]; prefilter removes {100 * frac:.1f}% "
           "of 100-sigma contaminants (worst of 20)", capsys)


# ---------------------------------------------------------------- 4

def test_criterion_4_coarse_to_fine(capsys):
    t0 = time.perf_counter()
    seq, kfs, pts = problem_scene()
    truth = [(kf.pose, kf.affine) for kf in kfs], [p.rho for p in pts]
    scale = seq.scene.scale
    out = {}
    for n_levels in (1, 2):
        for kf, (T, a) in zip(kfs, truth[0]):
            kf.pose, kf.affine = T, a
        for p, r in zip(pts, truth[1]):
            p.rho = r
        perturb(kfs, [1, 2, 3, 4], np.random.default_rng(1), 0.02 * scale, 0.02 * scale / 6)
        rep = solve(PbaProblem(kfs, [1, 2, 3, 4], [0], pts), PbaConfig(n_levels=n_levels))
        T0, G0 = kfs[0].pose, truth[0][0][0]
        err = max(np.linalg.norm((T0.inverse() @ kf.pose).t - (G0.inverse() @ g).t)
                  for kf, (g, _) in zip(kfs, truth[0]))
        out[n_levels] = rep.final_energy, err
    dt = time.perf_counter() - t0
    ratio = out[1][0] / out[2][0]
    rel = out[2][1] / scale
    report(4, ratio >= 10 and rel <= 0.0005 and dt < 60,
           f"energy 1-level / 2-level = {ratio:.1f}; 2-level relative pose error {100 * rel:.4f}% of scale; "
           f"{dt:.1f} s", capsys)


# ---------------------------------------------------------------- 5

def test_criterion_5_window_selection(capsys):
    rng = np.random.default_rng(5)
    drop_bad = 0
    for _ in range(1000):
        n = int(rng.integers(4, 9))
        kfs = [kf_at(i, rng.normal(size=3) * rng.uniform(0.1, 3)) for i in range(n)]
        drop_bad += temporal_drop(kfs, n - 1) != drop_oracle(kfs)
    cov_bad = 0
    nonempty = 0
    for _ in range(100):
        latest, temporal, old = random_map(rng, n_old=20)
        got, _ = select_covisible(old, latest, build_distance_map(latest, temporal), 3)
        want = covisible_oracle(latest, temporal, old, 3)
        cov_bad += got != want
        nonempty += bool(want)
    report(5, drop_bad == 0 and cov_bad == 0 and nonempty > 0,
           f"temporal drop mismatches {drop_bad}/1000; covisible selection mismatches {cov_bad}/100 "
           f"({nonempty} with a non-empty selection)", capsys)


# ---------------------------------------------------------------- 6

def _corrupt(kfs, p, n_bad):
    from pbaslam.image import PATTERN, GrayImage, build_pyramid
    kf = kfs[p.host]
    data = kf.image.data.copy()
    for off in PATTERN[1:1 + n_bad]:
        x, y = (p.pixel + off).astype(int)
        data[y, x] += 120.0
    kf.pyramid = build_pyramid(GrayImage(data), kf.camera, len(kf.pyramid))


def test_criterion_6_outlier_rules(capsys):
    notes, ok = [], True
    for n_bad in (3, 5):
        kfs, pts = plane_scene(n_kf=3, seed=11, noise=1.0)
        prob = PbaProblem(kfs, [1, 2], [0], pts)
        rep = solve(prob, PbaConfig(n_levels=1))
        clean = [o for o in range(prob.n_obs) if rep.outliers[o] == 0]
        o = clean[len(clean) // 2]
        p, oi = prob.obs_ref[o]
        target = p.observations[oi].target
        _corrupt(kfs, p, n_bad)
        prob = PbaProblem(kfs, [1, 2], [0], pts)
        rep = solve(prob, PbaConfig(n_levels=1))
        discarded = bool(~prob.enabled[o])
        update_masks(prob, rep)
        removed = all(ob.target != target for ob in p.observations)
        ok &= rep.outliers[o] == n_bad and removed and discarded == (n_bad == 5)
        notes.append(f"{n_bad}/8 outliers: removed={removed}, discarded mid-optimization={discarded}")
    rules = [bool(should_remove(k)) for k in range(9)], [bool(should_discard(k)) for k in range(9)]
    ok &= rules == ([k >= 3 for k in range(9)], [k >= 5 for k in range(9)])
    worst = 0.0
    rng = np.random.default_rng(6)
    for trial in range(50):
        x = rng.standard_t(4, size=int(rng.integers(60, 3000))) * rng.uniform(0.5, 5)
        a = np.sort(np.abs(x))
        pos = 0.95 * (len(a) - 1)
        lo = int(pos)
        want = a[lo] + (pos - lo) * (a[min(lo + 1, len(a) - 1)] - a[lo])
        worst = max(worst, abs(fit_error_model(x, "tdist").percentile95 - want))
    ok &= worst <= 1e-12
    report(6, bool(ok), "; ".join(notes) + f"; percentile95 vs sorted oracle max deviation {worst:.1e}", capsys)


# ---------------------------------------------------------------- 7-9: end-to-end runs

_RUNS = {}


def loop_run(seed, n_c):
    key = (seed, n_c)
    if key not in _RUNS:
        seq = make_sequence("revisit-loop", 100, noise_sigma=1.0, seed=seed)
        cfg = SlamConfig.from_flat({"n_c": n_c, "depletion_radius": LOOP_RADIUS})
        t0 = time.perf_counter()
        slam = run_sequence(seq.images, seq.timestamps, seq.camera, cfg)
        dt = time.perf_counter() - t0
        gt = Trajectory(seq.timestamps, seq.truth.poses)
        pts, _ = slam.point_cloud()
        rep = evaluate(slam.keyframe_trajectory(), gt, pts, surface_points(seq.scene, 0.02))
        _RUNS[key] = dict(slam=slam, seq=seq, rep=rep, seconds=dt, scale=seq.scene.scale)
    return _RUNS[key]


def test_criterion_7_end_to_end(capsys):
    run = loop_run(0, 3)
    slam, rep, scale = run["slam"], run["rep"], run["scale"]
    ate = rep.rms_ate / scale
    pse50 = rep.pse[50] / scale
    revisit = slam.windows[-1]
    budget = slam.cfg.frontend.n_candidates
    explore = [w.activated for w in slam.windows[1:] if not w.covisible]
    # near-zero: at most 5% of the candidate budget and below every exploration keyframe past the first
    near_zero = revisit.activated <= 0.05 * budget and revisit.activated < min(explore[1:] or explore)
    ok = ate < 0.01 and pse50 < 0.01 and bool(revisit.covisible) and near_zero and run["seconds"] < 300
    report(7, ok,
           f"ATE {100 * ate:.4f}% of scale, PSE median {100 * pse50:.3f}%, revisit keyframe {revisit.keyframe} "
           f"covisible {revisit.covisible} activates {revisit.activated} points (exploration {explore}), "
           f"{run['seconds']:.0f} s", capsys)


def test_criterion_8_map_reuse(capsys):
    ratios = []
    for seed in range(5):
        dsm = loop_run(seed, 3)["rep"].rms_ate
        sw = loop_run(seed, 0)["rep"].rms_ate
        ratios.append(dsm / sw)
    med = float(np.median(ratios))
    report(8, med <= 0.7,
           f"median ATE ratio covisible/sliding window {med:.2f} over 5 seeds "
           f"(per seed {', '.join(f'{r:.2f}' for r in ratios)})", capsys)


def test_criterion_9_determinism(tmp_path, capsys):
    first = loop_run(0, 3)
    seq = first["seq"]
    cfg = SlamConfig.from_flat({"n_c": 3, "depletion_radius": LOOP_RADIUS})
    again = run_sequence(seq.images, seq.timestamps, seq.camera, cfg)
    digests = []
    for i, slam in enumerate((first["slam"], again)):
        path = tmp_path / f"run{i}.txt"
        write_trajectory(slam.keyframe_trajectory(), path)
        write_trajectory(slam.frame_trajectory(), tmp_path / f"frames{i}.txt")
        digests.append(hashlib.sha256(path.read_bytes() + (tmp_path / f"frames{i}.txt").read_bytes()).hexdigest())
    report(9, digests[0] == digests[1], f"trajectory hashes {digests[0][:12]} / {digests[1][:12]}", capsys)


def test_criterion_10_euroc(capsys):
    root = os.environ.get("PBASLAM_EUROC_V101")
    if not root or not Path(root).is_dir():
        line = "[SKIP] criterion 10: set PBASLAM_EUROC_V101 to a V1_01_easy ASL directory to run"
        SUMMARY.append(line)
        with capsys.disabled():
            print("\n" + line)
        pytest.skip("dataset not available")
    from pbaslam.io_eval import load_sequence, read_trajectory
    seq = load_sequence(root)
    slam = run_sequence((seq.image(i) for i in range(len(seq))), seq.timestamps, seq.camera)
    gt = read_trajectory(Path(root) / "state_groundtruth_estimate0" / "data.csv")
    ate = evaluate(slam.keyframe_trajectory(), gt).rms_ate
    report(10, ate <= 0.15, f"V1_01_easy RMS ATE {ate:.3f} m", capsys)
