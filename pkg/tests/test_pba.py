import numpy as np
import pytest
from scenes import perturb, plane_scene, problem_scene

from pbaslam import kernels
from pbaslam.errors import ConfigError, SolverFailure
from pbaslam.geometry import SE3, se3_exp
from pbaslam.image import PATTERN
from pbaslam.map_lmcw import Observation
from pbaslam.pba import (
    PbaConfig, PbaProblem, fix_gauge, global_pba, lm_step, schur_reduce, should_discard,
    should_remove, solve, solve_dense, solve_reduced)
from pbaslam.photometric import linearize_observation


def random_system(rng, n_cam=3, n_pts=20, n_obs=90):
    r = rng.normal(size=(n_obs, 8))
    Jp = rng.normal(size=(n_obs, 8, 6))
    Jr = rng.normal(size=(n_obs, 8))
    Ja = rng.normal(size=(n_obs, 8, 4))
    # camera index -1 is a fixed keyframe, which removes the global gauge freedom
    host = rng.integers(-1, n_cam, n_obs)
    tgt = (host + 1 + rng.integers(1, n_cam + 1, n_obs)) % (n_cam + 1) - 1
    pv = np.arange(n_obs) % n_pts
    w = rng.uniform(0.5, 1.5, size=(n_obs, 8))
    return kernels.accumulate(w, r, Jp, Jr, Ja, host, tgt, pv, n_cam, n_pts)


def test_schur_matches_dense():
    rng = np.random.default_rng(0)
    for lam in (0.0, 1e-4, 1.0):
        Hcc, Hcp, Hpp, bc, bp = random_system(rng)
        dc, dp, excl = solve_reduced(Hcc, Hcp, Hpp, bc, bp, lam)
        rc, rp = solve_dense(Hcc, Hcp, Hpp, bc, bp, lam)
        assert len(excl) == 0
        np.testing.assert_allclose(dc, rc, atol=1e-8, rtol=1e-8)
        np.testing.assert_allclose(dp, rp, atol=1e-8, rtol=1e-8)


def test_schur_bookkeeping_and_excluded_point():
    rng = np.random.default_rng(1)
    Hcc, Hcp, Hpp, bc, bp = random_system(rng, n_cam=4, n_pts=20, n_obs=95)
    Hcp[:, 7] = 0.0
    Hpp[7] = 0.0
    bp[7] = 0.0
    S, g, inv, excl = schur_reduce(Hcc, Hcp, Hpp, bc, bp)
    assert S.shape == (32, 32) and g.shape == (32,)
    assert list(excl) == [7]
    dc, dp, _ = solve_reduced(Hcc, Hcp, Hpp, bc, bp, 1e-4)
    assert dp[7] == 0.0
    rc, rp = solve_dense(Hcc, Hcp, Hpp, bc, bp, 1e-4)
    np.testing.assert_allclose(dc, rc, atol=1e-8)


def test_quadratic_newton_step():
    # one inverse depth, residuals linear in it: r = J rho + c
    J = np.array([[1.5, -0.5, 2.0, 0.3, 0.0, 1.0, -1.0, 0.7]])
    c = np.array([[0.2, 1.0, -0.4, 0.1, 0.5, -0.3, 0.0, 0.9]])
    rho0 = 0.8
    r = J * rho0 + c
    z = np.zeros((1, 8, 6)), np.zeros((1, 8, 4))
    _, _, Hpp, bc, bp = kernels.accumulate(np.ones((1, 8)), r, z[0], J, z[1], np.array([-1]),
                                           np.array([-1]), np.array([0]), 0, 1)
    dc, dp, _ = solve_reduced(np.zeros((0, 0)), np.zeros((0, 1)), Hpp, bc, bp, 0.0)
    best = -np.sum(J * c) / np.sum(J * J)
    assert rho0 + dp[0] == pytest.approx(best, abs=1e-12)


def test_damping_limit():
    rng = np.random.default_rng(2)
    sysm = random_system(rng)
    norms = [np.linalg.norm(np.concatenate(solve_reduced(*sysm, lam)[:2])) for lam in (1e-2, 1e2, 1e6)]
    assert norms[0] > norms[1] > norms[2] and norms[2] < 1e-4


def test_rules():
    assert not should_remove(2) and should_remove(3)
    assert not should_discard(4) and should_discard(5)
    with pytest.raises(ConfigError):
        PbaConfig(n_levels=0)
    with pytest.raises(ConfigError):
        PbaConfig(lambda_init=0.0)


def test_fixed_point_converges_immediately():
    kfs, pts = plane_scene()
    before = [kf.pose for kf in kfs]
    prob = PbaProblem(kfs, [1, 2], [0], pts)
    r, valid, *_ = prob.linearize(0)
    assert valid.sum() > 500 and np.abs(r[valid]).max() < 1e-9
    rep = solve(prob, PbaConfig(n_levels=2))
    for lv in rep.levels:
        assert lv.iterations <= 2
        assert all(n < 1e-6 for n in lv.update_norms)
    for kf, T in zip(kfs, before):
        assert np.allclose(kf.pose.matrix(), T.matrix(), atol=1e-9)


def test_normal_equations_match_row_assembly():
    kfs, pts = plane_scene(seed=3)
    perturb(kfs, [1, 2], np.random.default_rng(0), 0.01, 0.002)
    prob = PbaProblem(kfs, [1, 2], [0], pts)
    r, valid, wg, Jp, Jr, Ja = prob.linearize(0)
    w = np.where(valid, wg, 0.0)
    Hcc, Hcp, Hpp, bc, bp = prob.normal_equations(w, r, Jp, Jr, Ja)
    nc, npv = 8 * prob.n_cam, prob.n_pvar
    rows, res, wts = [], [], []
    for o, (p, _) in enumerate(prob.obs_ref):
        host, tgt = kfs[p.host], kfs[prob.obs_target_id[o]]
        ro, vo, wgo, jp, jr, ja = linearize_observation(host, tgt, host.camera, p.pixel, p.rho)
        for k in range(len(PATTERN)):
            row = np.zeros(nc + npv)
            hc, tc = prob.obs_host_cam[o], prob.obs_target_cam[o]
            if hc >= 0:
                row[8 * hc:8 * hc + 6] = jp[k]
                row[8 * hc + 6:8 * hc + 8] = ja[k, :2]
            if tc >= 0:
                row[8 * tc:8 * tc + 6] = -jp[k]
                row[8 * tc + 6:8 * tc + 8] = ja[k, 2:]
            if prob.obs_point_var[o] >= 0:
                row[nc + prob.obs_point_var[o]] = jr[k]
            rows.append(row)
            res.append(ro[k])
            wts.append(wgo[k] if vo[k] else 0.0)
    J, res, wts = np.array(rows), np.array(res), np.array(wts)
    H = J.T @ (wts[:, None] * J)
    g = J.T @ (wts * res)
    np.testing.assert_allclose(Hcc, H[:nc, :nc], rtol=1e-9, atol=1e-6)
    np.testing.assert_allclose(Hcp, H[:nc, nc:], rtol=1e-9, atol=1e-6)
    np.testing.assert_allclose(Hpp, np.diag(H)[nc:], rtol=1e-9, atol=1e-6)
    np.testing.assert_allclose(np.concatenate([bc, bp]), g, rtol=1e-9, atol=1e-6)


def test_gauge_invariance_of_residuals():
    kfs, pts = plane_scene(seed=4)
    perturb(kfs, [1, 2], np.random.default_rng(1), 0.02, 0.004)
    r0 = PbaProblem(kfs, [1, 2], [0], pts).linearize(0)[0]
    G = se3_exp([0.2, -0.1, 0.3, 0.3, -0.2, 0.5])
    for kf in kfs:
        kf.pose = G @ kf.pose
    r1 = PbaProblem(kfs, [1, 2], [0], pts).linearize(0)[0]
    np.testing.assert_allclose(r1, r0, atol=1e-10)


@pytest.fixture(scope="module")
def loop_scene():
    seq, kfs, pts = problem_scene()
    truth = [(kf.pose, kf.affine) for kf in kfs], [p.rho for p in pts]
    return seq, kfs, pts, truth


def reset(kfs, pts, truth):
    for kf, (T, a) in zip(kfs, truth[0]):
        kf.pose, kf.affine = T, a
    for p, r in zip(pts, truth[1]):
        p.rho = r


def rel_error(kfs, truth):
    T0, G0 = kfs[0].pose, truth[0][0][0]
    return max(np.linalg.norm((T0.inverse() @ kf.pose).t - (G0.inverse() @ g).t)
               for kf, (g, _) in zip(kfs, truth[0]))


def test_recovers_perturbed_window(loop_scene):
    seq, kfs, pts, truth = loop_scene
    reset(kfs, pts, truth)
    scale = seq.scene.scale
    perturb(kfs, [1, 2, 3, 4], np.random.default_rng(5), 0.005 * scale, 0.001)
    fixed = kfs[0].pose
    a0 = kfs[0].affine
    rep = solve(PbaProblem(kfs, [1, 2, 3, 4], [0], pts))
    assert kfs[0].pose is fixed and kfs[0].affine is a0
    assert rel_error(kfs, truth) < 0.0005 * scale
    rho_err = np.abs(np.array([p.rho for p in pts]) / np.array(truth[1]) - 1)
    assert np.median(rho_err) < 0.01
    for lv in rep.levels:
        assert lv.final_energy <= lv.initial_energy
    assert rep.final_energy <= rep.initial_energy0


def test_coarse_to_fine_widens_basin(loop_scene):
    seq, kfs, pts, truth = loop_scene
    out = {}
    for n_levels in (1, 2):
        reset(kfs, pts, truth)
        perturb(kfs, [1, 2, 3, 4], np.random.default_rng(1), 0.02 * seq.scene.scale, 0.02 * seq.scene.scale / 6)
        rep = solve(PbaProblem(kfs, [1, 2, 3, 4], [0], pts), PbaConfig(n_levels=n_levels))
        out[n_levels] = rep.final_energy, rel_error(kfs, truth)
    assert out[1][0] > 10 * out[2][0]
    assert out[2][1] < 0.0005 * seq.scene.scale


def test_determinism(loop_scene):
    seq, kfs, pts, truth = loop_scene
    runs = []
    for _ in range(2):
        reset(kfs, pts, truth)
        perturb(kfs, [1, 2, 3, 4], np.random.default_rng(9), 0.02, 0.004)
        rep = solve(PbaProblem(kfs, [1, 2, 3, 4], [0], pts))
        runs.append(([kf.pose.matrix().tobytes() for kf in kfs], [p.rho for p in pts],
                     [(lv.iterations, lv.final_energy) for lv in rep.levels]))
    assert runs[0] == runs[1]


def test_bootstrap_gauge_normalizes_scale():
    kfs, pts = plane_scene(seed=5)
    for p in pts:
        p.rho *= 1.3
    prob = PbaProblem(kfs, [0, 1, 2], [], pts)
    assert prob.held == [0] and prob.n_cam == 2
    held = kfs[0].pose
    solve(prob)
    assert kfs[0].pose is held
    assert np.mean([p.rho for p in pts]) == pytest.approx(1.0, abs=1e-9)


def test_fix_gauge():
    kfs, pts = plane_scene(n_kf=4, seed=6)
    assert fix_gauge(kfs, [2, 3], pts) == [0, 1]
    for p in pts:
        if p.host in (2, 3):
            p.observations = [o for o in p.observations if o.target in (2, 3)]
        elif p.host == 0:
            p.observations = []
        else:
            p.observations = [o for o in p.observations if o.target != 2 and o.target != 3]
    assert fix_gauge(kfs, [2, 3], pts) == []


def test_lm_step_shapes():
    kfs, pts = plane_scene(seed=7)
    perturb(kfs, [1, 2], np.random.default_rng(3), 0.01, 0.002)
    prob = PbaProblem(kfs, [1, 2], [0], pts)
    dc, dp = lm_step(prob, 0, 1e-4)
    assert dc.shape == (16,) and dp.shape == (prob.n_pvar,)
    small = lm_step(prob, 0, 1e8)
    assert np.linalg.norm(small[0]) < 1e-3 * np.linalg.norm(dc)


def test_global_pba_keeps_minimum_and_reduces_drift(loop_scene):
    kfs, pts = plane_scene(seed=8)
    before = [kf.pose.matrix() for kf in kfs]
    global_pba(kfs, pts)
    for kf, M in zip(kfs, before):
        assert np.allclose(kf.pose.matrix(), M, atol=1e-6)

    from pbaslam.io_eval import Trajectory, align_sim3, rms_ate
    seq, kfs, pts, truth = loop_scene
    reset(kfs, pts, truth)
    rng = np.random.default_rng(11)
    drift = SE3()
    for kf in kfs[1:]:
        drift = se3_exp(np.concatenate([rng.normal(scale=0.002, size=3), rng.normal(scale=0.01, size=3)])) @ drift
        kf.pose = drift @ kf.pose
    gt = Trajectory(np.arange(len(kfs)), [T for T, _ in truth[0]])

    def ate():
        est = Trajectory(np.arange(len(kfs)), [kf.pose for kf in kfs])
        return rms_ate(est, gt, align_sim3(est, gt))

    pre = ate()
    global_pba(kfs, pts)
    assert ate() <= pre


def test_empty_problem_rejected():
    kfs, pts = plane_scene(seed=9)
    for p in pts:
        p.observations = []
    with pytest.raises(SolverFailure):
        solve(PbaProblem(kfs, [1, 2], [0], pts))
