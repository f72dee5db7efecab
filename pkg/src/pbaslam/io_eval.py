"""Dataset ingestion, trajectory / point-cloud files and accuracy metrics."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (AlignmentError, CalibrationError, EmptySequence, MissingFile,
                     NonMonotonicTimestamps)
from .geometry import SE3, CameraModel, Sim3, quaternion_from_rotation, rotation_from_quaternion
from .image import GrayImage

ASSOC_WINDOW = 0.02


# --------------------------------------------------------------------------
# ASL / EuRoC layout

def _read_yaml(path):
    import yaml

    class _Loader(yaml.SafeLoader):
        pass

    # OpenCV-style files carry a "%YAML:1.0" header and custom tags
    _Loader.add_multi_constructor("", lambda loader, suffix, node: loader.construct_mapping(node)
                                  if isinstance(node, yaml.MappingNode) else loader.construct_scalar(node))
    text = "\n".join(line for line in Path(path).read_text().splitlines() if not line.startswith("%"))
    try:
        return yaml.load(text, Loader=_Loader) or {}
    except yaml.YAMLError as exc:
        raise CalibrationError(f"{path}: {exc}") from exc


def read_calibration(path):
    """CameraModel and distortion coefficients from an ASL ``sensor.yaml``."""
    if not Path(path).is_file():
        raise MissingFile(str(path))
    y = _read_yaml(path)
    try:
        fx, fy, cx, cy = (float(v) for v in y["intrinsics"])
        w, h = (int(v) for v in y["resolution"])
        cam = CameraModel(fx, fy, cx, cy, w, h)
    except (KeyError, TypeError, ValueError) as exc:
        raise CalibrationError(f"{path}: bad intrinsics/resolution ({exc})") from exc
    model = y.get("distortion_model", "radial-tangential")
    coeffs = [float(v) for v in y.get("distortion_coefficients", [])] or [0.0] * 4
    if model not in ("radial-tangential", "radtan", "none"):
        raise CalibrationError(f"{path}: unsupported distortion model {model!r}")
    return cam, np.array(coeffs, dtype=float)


@dataclass
class SequenceSource:
    timestamps: np.ndarray          # seconds
    stamps_ns: np.ndarray
    paths: list
    camera: CameraModel
    distortion: np.ndarray
    undistort: bool = True
    _maps: tuple | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.paths)

    def image(self, i):
        import cv2
        data = cv2.imread(str(self.paths[i]), cv2.IMREAD_UNCHANGED)
        if data is None:
            raise MissingFile(str(self.paths[i]))
        if data.ndim == 3:
            data = cv2.cvtColor(data, cv2.COLOR_BGR2GRAY)
        if (data.shape[1], data.shape[0]) != (self.camera.width, self.camera.height):
            raise CalibrationError(f"{self.paths[i]}: size {data.shape[::-1]} differs from calibration")
        img = data.astype(np.float64)
        if self.undistort and np.any(self.distortion != 0):
            if self._maps is None:
                K = self.camera.K
                self._maps = cv2.initUndistortRectifyMap(K, self.distortion, None, K,
                                                         (self.camera.width, self.camera.height),
                                                         cv2.CV_32FC1)
            img = cv2.remap(img, *self._maps, interpolation=cv2.INTER_LINEAR,
                            borderMode=cv2.BORDER_REPLICATE)
        return GrayImage(img)

    def __iter__(self):
        for i in range(len(self)):
            yield self.timestamps[i], self.image(i)


def load_sequence(directory, assume_undistorted=False, camera="cam0"):
    """Validated ASL sequence: ``<camera>/data.csv``, ``<camera>/data/``, ``<camera>/sensor.yaml``."""
    root = Path(directory)
    cam_dir = root / camera
    csv_path = cam_dir / "data.csv"
    if not root.is_dir():
        raise MissingFile(str(root))
    if not csv_path.is_file():
        raise MissingFile(str(csv_path))
    cam, dist = read_calibration(cam_dir / "sensor.yaml")
    stamps, paths = [], []
    with open(csv_path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].lstrip().startswith("#"):
                continue
            if len(row) < 2:
                raise EmptySequence(f"{csv_path}: malformed row {row}")
            stamps.append(int(row[0].strip()))
            paths.append(cam_dir / "data" / row[1].strip())
    if not stamps:
        raise EmptySequence(str(csv_path))
    ns = np.array(stamps, dtype=np.int64)
    if np.any(np.diff(ns) <= 0):
        raise NonMonotonicTimestamps(str(csv_path))
    for p in paths:
        if not p.is_file():
            raise MissingFile(str(p))
    return SequenceSource(ns / 1e9, ns, paths, cam, dist, undistort=not assume_undistorted)


def write_asl(out_dir, images, timestamps, camera, poses=None, distortion=None):
    """Emit an ASL directory (8-bit PNG frames, data.csv, sensor.yaml, optional ground truth)."""
    import cv2
    import yaml
    root = Path(out_dir)
    data = root / "cam0" / "data"
    data.mkdir(parents=True, exist_ok=True)
    ns = [int(round(t * 1e9)) for t in timestamps]
    with open(root / "cam0" / "data.csv", "w", newline="") as fh:
        fh.write("#timestamp [ns],filename\n")
        for t, img in zip(ns, images):
            name = f"{t}.png"
            arr = np.clip(np.rint(img.data if hasattr(img, "data") else img), 0, 255).astype(np.uint8)
            cv2.imwrite(str(data / name), arr)
            fh.write(f"{t},{name}\n")
    calib = {"sensor_type": "camera", "camera_model": "pinhole",
             "intrinsics": [camera.fx, camera.fy, camera.cx, camera.cy],
             "resolution": [camera.width, camera.height],
             "distortion_model": "radial-tangential",
             "distortion_coefficients": list(map(float, distortion)) if distortion is not None else [0.0] * 4}
    (root / "cam0" / "sensor.yaml").write_text(yaml.safe_dump(calib, sort_keys=False))
    if poses is not None:
        gt = root / "state_groundtruth_estimate0"
        gt.mkdir(exist_ok=True)
        with open(gt / "data.csv", "w") as fh:
            fh.write("#timestamp, p_x [m], p_y [m], p_z [m], q_w [], q_x [], q_y [], q_z []\n")
            for t, T in zip(ns, poses):
                q = quaternion_from_rotation(T.R)
                vals = list(T.t) + [q[3], q[0], q[1], q[2]]
                fh.write(f"{t}," + ",".join(_fmt(v) for v in vals) + "\n")
    return root


# --------------------------------------------------------------------------
# trajectories

@dataclass
class Trajectory:
    timestamps: np.ndarray
    poses: list

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        if len(self.timestamps) != len(self.poses):
            raise ValueError("timestamps and poses differ in length")
        if np.any(np.diff(self.timestamps) <= 0):
            raise NonMonotonicTimestamps("trajectory timestamps must increase strictly")

    def __len__(self):
        return len(self.poses)

    @property
    def positions(self):
        return np.array([T.t for T in self.poses]).reshape(-1, 3)


def _fmt(x):
    return format(float(x) + 0.0, ".17g")


def write_trajectory(traj, path):
    """Lines ``timestamp tx ty tz qx qy qz qw``."""
    lines = []
    for t, T in zip(traj.timestamps, traj.poses):
        q = quaternion_from_rotation(T.R)
        lines.append(" ".join(_fmt(v) for v in [t, *T.t, *q]))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_trajectory(path):
    """Trajectory text file, or an ASL ground-truth csv (ns timestamps, p, q_wxyz)."""
    p = Path(path)
    if not p.is_file():
        raise MissingFile(str(p))
    ts, poses = [], []
    if p.suffix == ".csv":
        with open(p, newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].lstrip().startswith("#"):
                    continue
                v = [float(x) for x in row[1:8]]
                ts.append(int(row[0]) / 1e9)
                poses.append(SE3(rotation_from_quaternion([v[4], v[5], v[6], v[3]]), v[:3]))
    else:
        for line in p.read_text().splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            v = [float(x) for x in line.split()]
            ts.append(v[0])
            poses.append(SE3(rotation_from_quaternion(v[4:8]), v[1:4]))
    return Trajectory(np.array(ts), poses)


def associate(est, gt, window=ASSOC_WINDOW):
    """Index pairs (i_est, i_gt) matching each estimate to the nearest gt stamp within ``window``."""
    gts = gt.timestamps
    pairs = []
    for i, t in enumerate(est.timestamps):
        j = int(np.searchsorted(gts, t))
        best = min((k for k in (j - 1, j) if 0 <= k < len(gts)), key=lambda k: abs(gts[k] - t), default=None)
        if best is not None and abs(gts[best] - t) <= window:
            pairs.append((i, best))
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)


def umeyama(src, dst):
    """Least-squares Sim(3) with dst ~ s R src + t."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if len(src) < 3:
        raise AlignmentError(f"need >= 3 associated positions, got {len(src)}")
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    sv_s = np.linalg.svd(xs, compute_uv=False)
    sv_d = np.linalg.svd(xd, compute_uv=False)
    if sv_s[1] <= 1e-9 * max(sv_s[0], 1e-300) or sv_d[1] <= 1e-9 * max(sv_d[0], 1e-300):
        raise AlignmentError("positions are collinear")
    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1
    R = U @ S @ Vt
    var_s = np.mean(np.sum(xs * xs, axis=1))
    s = float(np.trace(np.diag(D) @ S) / var_s)
    t = mu_d - s * R @ mu_s
    return Sim3(s, R, t)


def align_sim3(est, gt, window=ASSOC_WINDOW):
    pairs = associate(est, gt, window)
    if len(pairs) < 3:
        raise AlignmentError(f"only {len(pairs)} associated poses")
    return umeyama(est.positions[pairs[:, 0]], gt.positions[pairs[:, 1]])


def ate_errors(est, gt, alignment=None, window=ASSOC_WINDOW):
    pairs = associate(est, gt, window)
    if len(pairs) == 0:
        raise AlignmentError("no associated poses")
    S = alignment if alignment is not None else Sim3()
    p = S.apply(est.positions[pairs[:, 0]])
    return np.linalg.norm(p - gt.positions[pairs[:, 1]], axis=1)


def rms_ate(est, gt, alignment=None, window=ASSOC_WINDOW):
    e = ate_errors(est, gt, alignment, window)
    return float(np.sqrt(np.mean(e * e)))


def pse(points, surface, alignment=None):
    """Distance of each (aligned) map point to its nearest surface sample, plus percentiles."""
    from scipy.spatial import cKDTree
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("empty map")
    surf = np.asarray(surface, dtype=float).reshape(-1, 3)
    if len(surf) == 0:
        raise ValueError("empty surface")
    if alignment is not None:
        pts = alignment.apply(pts)
    d, _ = cKDTree(surf).query(pts)
    return d, {q: float(np.percentile(d, q)) for q in (50, 90, 95)}


def cumulative_table(errors, thresholds):
    """Fraction of errors at or below each threshold (accumulated error distribution)."""
    e = np.sort(np.asarray(errors, dtype=float))
    return [(float(t), float(np.searchsorted(e, t, side="right") / max(len(e), 1))) for t in thresholds]


@dataclass
class EvalReport:
    rms_ate: float
    errors: np.ndarray
    alignment: Sim3
    pse: dict | None = None
    n_points: int = 0

    def as_dict(self):
        S = self.alignment
        out = {"rms_ate": self.rms_ate, "n_keyframes": int(len(self.errors)),
               "max_error": float(np.max(self.errors)), "scale": S.scale,
               "rotation": S.R.tolist(), "translation": S.t.tolist()}
        if self.pse is not None:
            out.update({f"pse_p{q}": v for q, v in self.pse.items()})
            out["n_points"] = self.n_points
        return out

    def to_json(self):
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)


def evaluate(est, gt, points=None, surface=None):
    S = align_sim3(est, gt)
    e = ate_errors(est, gt, S)
    rep = EvalReport(float(np.sqrt(np.mean(e * e))), e, S)
    if points is not None and surface is not None and len(points):
        _, rep.pse = pse(points, surface, S)
        rep.n_points = len(points)
    return rep


# --------------------------------------------------------------------------
# point clouds

def write_pointcloud(points, path, hosts=None):
    """ASCII PLY with x y z and the host keyframe id of every point."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    hosts = np.zeros(len(pts), dtype=np.int64) if hosts is None else np.asarray(hosts, dtype=np.int64)
    head = ["ply", "format ascii 1.0", f"element vertex {len(pts)}", "property double x",
            "property double y", "property double z", "property int host", "end_header"]
    body = [f"{_fmt(x)} {_fmt(y)} {_fmt(z)} {int(h)}" for (x, y, z), h in zip(pts, hosts)]
    Path(path).write_text("\n".join(head + body) + "\n")


def read_pointcloud(path):
    p = Path(path)
    if not p.is_file():
        raise MissingFile(str(p))
    lines = p.read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n = 0
    i = 0
    for i, line in enumerate(lines):
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
        if line.strip() == "end_header":
            break
    rows = [list(map(float, ln.split())) for ln in lines[i + 1: i + 1 + n]]
    arr = np.array(rows).reshape(n, -1)
    return arr[:, :3], (arr[:, 3].astype(np.int64) if arr.shape[1] > 3 else np.zeros(n, np.int64))


def map_cloud(m):
    """World points and host ids of every active or mature map point."""
    from .map_lmcw import world_points
    pts, hosts = [], []
    for kf in m.keyframes.values():
        live = kf.live_points()
        if live:
            pts.append(world_points(kf, live))
            hosts.extend([kf.id] * len(live))
    return (np.concatenate(pts) if pts else np.zeros((0, 3))), np.array(hosts, dtype=np.int64)

