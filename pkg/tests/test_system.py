import json
from pathlib import Path

import numpy as np
import pytest

from pbaslam.cli import main
from pbaslam.errors import ConfigError
from pbaslam.image import GrayImage
from pbaslam.io_eval import Trajectory, align_sim3, read_pointcloud, read_trajectory, rms_ate, write_asl
from pbaslam.synthetic import make_sequence
from pbaslam.system import SlamConfig, run_threaded

SYNTH_CFG = str(Path(__file__).resolve().parents[1] / "configs" / "synthetic.yaml")


@pytest.fixture(scope="module")
def asl(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth") / "loop"
    assert main(["synth", "--kind", "revisit-loop", "--frames", "50", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def first_run(asl, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "a"
    assert main(["run", "--input", str(asl), "--config", SYNTH_CFG, "--output", str(out),
                 "--assume-undistorted"]) == 0
    return out


def test_config_from_flat():
    cfg = SlamConfig.from_flat({"n_c": 0, "depletion_radius": 8, "rho_range": [0.2, 5.0], "max_iters": 7,
                                "backend": "numpy"})
    assert cfg.n_c == 0 and cfg.frontend.depletion_radius == 8 and cfg.frontend.rho_range == (0.2, 5.0)
    assert cfg.pba.max_iters == 7 and cfg.pba.backend == "numpy"
    for bad in ({"nope": 1}, {"n_t": 1}, {"lambda_up": 0.5}, {"n_t": "four"}):
        with pytest.raises(ConfigError):
            SlamConfig.from_flat(bad)


def test_synth_layout(asl):
    assert (asl / "cam0" / "data.csv").is_file() and (asl / "cam0" / "sensor.yaml").is_file()
    assert len(read_trajectory(asl / "groundtruth.txt")) == 50
    assert len(read_pointcloud(asl / "surface.ply")[0]) > 1000


def test_synth_run_eval(asl, first_run, capsys):
    names = sorted(p.name for p in first_run.iterdir())
    assert names == ["frames.txt", "points.ply", "report.json", "trajectory.txt"]
    rep = json.loads((first_run / "report.json").read_text())
    assert set(rep["timings"]) == {"tracking", "local_pba", "keyframe"}
    assert rep["mode"] == "sequential" and rep["frames"] == 50 and rep["keyframes"] >= 4
    pts, hosts = read_pointcloud(first_run / "points.ply")
    assert len(pts) == rep["points"] and set(hosts) <= set(range(rep["keyframes"]))
    capsys.readouterr()
    assert main(["eval", "--est", str(first_run), "--gt", str(asl / "groundtruth.txt"),
                 "--surface", str(asl / "surface.ply")]) == 0
    table = json.loads(capsys.readouterr().out)
    scale = 4.0
    assert table["rms_ate"] < 0.01 * scale
    assert table["pse_p50"] < 0.01 * scale
    assert main(["eval", "--est", str(first_run / "frames.txt"), "--gt", str(asl / "groundtruth.txt"),
                 "--format", "csv"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "metric,value" and any(ln.startswith("rms_ate,") for ln in lines)


def test_sequential_runs_are_bit_identical(asl, first_run, tmp_path):
    out = tmp_path / "b"
    assert main(["run", "--input", str(asl), "--config", SYNTH_CFG, "--output", str(out),
                 "--assume-undistorted"]) == 0
    for name in ("trajectory.txt", "frames.txt", "points.ply"):
        assert (out / name).read_bytes() == (first_run / name).read_bytes()


@pytest.mark.parametrize("text", ["n_t: [1, 2", "just a string", "frontend:\n  n_t: 4\n", "n_tt: 4\n",
                                  "n_t: 1\n"])
def test_malformed_config_exits_1_without_output(asl, tmp_path, text):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text(text)
    out = tmp_path / "out"
    assert main(["run", "--input", str(asl), "--config", str(cfg), "--output", str(out)]) == 1
    assert not out.exists()


def test_io_errors_exit_2(tmp_path):
    out = tmp_path / "out"
    assert main(["run", "--input", str(tmp_path / "missing"), "--output", str(out)]) == 2
    assert not out.exists()
    assert main(["eval", "--est", str(tmp_path / "none.txt"), "--gt", str(tmp_path / "none.txt")]) == 2


def test_static_camera_exits_4(tmp_path):
    seq = make_sequence("line", 2, noise_sigma=0.0, length=0.0)
    root = write_asl(tmp_path / "static", seq.images * 3, np.arange(6) / 20.0, seq.camera)
    out = tmp_path / "out"
    assert main(["run", "--input", str(root), "--config", SYNTH_CFG, "--output", str(out),
                 "--assume-undistorted"]) == 4
    assert not out.exists()


def test_tracking_lost_exits_3(tmp_path):
    seq = make_sequence("revisit-loop", 12, noise_sigma=1.0)
    rng = np.random.default_rng(0)
    noise = [GrayImage(rng.uniform(0, 255, size=(seq.camera.height, seq.camera.width))) for _ in range(3)]
    root = write_asl(tmp_path / "lost", seq.images[:9] + noise, seq.timestamps, seq.camera)
    out = tmp_path / "out"
    assert main(["run", "--input", str(root), "--config", SYNTH_CFG, "--output", str(out),
                 "--assume-undistorted"]) == 3
    assert not out.exists()


def test_threaded_mode():
    seq = make_sequence("revisit-loop", 40, noise_sigma=1.0, seed=2)
    slam = run_threaded(seq.images, seq.timestamps, seq.camera, SlamConfig.from_flat({"depletion_radius": 8}))
    est = slam.frame_trajectory()
    # frames consumed while bootstrapping, other than the first keyframe, carry no pose
    assert 36 <= len(est) == len(slam.frames) and np.all(np.diff(est.timestamps) > 0)
    gt = Trajectory(seq.timestamps, seq.truth.poses)
    assert rms_ate(est, gt, align_sim3(est, gt)) < 0.01 * seq.scene.scale
    assert len(slam.map.keyframes) >= 3
