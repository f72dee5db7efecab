"""Command line entry point: ``pbaslam run | eval | synth``.

Exit codes: 0 ok, 1 configuration error, 2 I/O or dataset error,
3 tracking lost, 4 bootstrap failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .errors import BootstrapFailure, ConfigError, DatasetError, TrackingLost

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_TRACKING, EXIT_BOOTSTRAP = 0, 1, 2, 3, 4

log = logging.getLogger("pbaslam")


def load_config(path):
    """Flat key/value YAML file -> SlamConfig.  Any problem raises ConfigError."""
    import yaml

    from .system import SlamConfig
    if path is None:
        return SlamConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        values = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: {exc}") from exc
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(f"{p}: expected a flat mapping of keys to values")
    for k, v in values.items():
        if isinstance(v, dict):
            raise ConfigError(f"{p}: key {k!r} is nested; the config is flat")
    return SlamConfig.from_flat(values)


def cmd_run(args):
    from .io_eval import load_sequence, write_pointcloud, write_trajectory
    from .system import run_sequence, run_threaded

    cfg = load_config(args.config)
    seq = load_sequence(args.input, assume_undistorted=args.assume_undistorted)
    frames = list(range(len(seq))) if args.max_frames is None else list(range(min(args.max_frames, len(seq))))
    images = (seq.image(i) for i in frames)
    stamps = [float(seq.timestamps[i]) for i in frames]
    runner = run_threaded if args.threads == 2 else run_sequence
    slam = runner(images, stamps, seq.camera, cfg)
    if slam.map is None:
        raise BootstrapFailure("sequence ended before initialization succeeded")

    # outputs only after a complete run
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    write_trajectory(slam.keyframe_trajectory(), out / "trajectory.txt")
    write_trajectory(slam.frame_trajectory(), out / "frames.txt")
    pts, hosts = slam.point_cloud()
    write_pointcloud(pts, out / "points.ply", hosts)
    report = slam.report()
    report["mode"] = "threaded" if args.threads == 2 else "sequential"
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"{report['keyframes']} keyframes, {report['points']} points -> {out}")
    return EXIT_OK


def cmd_eval(args):
    from .io_eval import evaluate, read_pointcloud, read_trajectory

    est_path = Path(args.est)
    points = None
    if est_path.is_dir():
        if (est_path / "points.ply").is_file():
            args.points = args.points or est_path / "points.ply"
        est_path = est_path / "trajectory.txt"
    try:
        if args.points:
            points, _ = read_pointcloud(args.points)
        est = read_trajectory(est_path)
        gt = read_trajectory(args.gt)
        surface = read_pointcloud(args.surface)[0] if args.surface else None
    except ValueError as exc:
        raise DatasetError(str(exc)) from exc
    rep = evaluate(est, gt, points, surface)
    if args.format == "json":
        print(rep.to_json())
    else:
        w = csv.writer(sys.stdout)
        w.writerow(["metric", "value"])
        for k, v in sorted(rep.as_dict().items()):
            w.writerow([k, json.dumps(v) if isinstance(v, list) else v])
    return EXIT_OK


def cmd_synth(args):
    from .synthetic import emit_asl, make_sequence

    seq = make_sequence(args.kind, args.frames, noise_sigma=args.noise, seed=args.seed, length=args.length)
    root = emit_asl(seq, args.out)
    print(f"wrote {args.frames} frames to {root}")
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="pbaslam", description="Direct sparse monocular SLAM with local windows.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the pipeline on an ASL sequence")
    r.add_argument("--input", required=True)
    r.add_argument("--config")
    r.add_argument("--output", required=True)
    r.add_argument("--threads", type=int, choices=(1, 2), default=1)
    r.add_argument("--assume-undistorted", action="store_true")
    r.add_argument("--max-frames", type=int)
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="trajectory / structure accuracy")
    e.add_argument("--est", required=True, help="trajectory file or a run output directory")
    e.add_argument("--gt", required=True)
    e.add_argument("--surface", help="reference point cloud (PLY) for point-to-surface error")
    e.add_argument("--points", help="estimated point cloud (PLY); defaults to points.ply of a run directory")
    e.add_argument("--format", choices=("json", "csv"), default="json")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="render a synthetic ASL sequence with ground truth")
    s.add_argument("--kind", choices=("line", "orbit", "revisit-loop"), default="revisit-loop")
    s.add_argument("--frames", type=int, default=100)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", type=float, default=1.0)
    s.add_argument("--length", type=float, default=1.0)
    s.set_defaults(func=cmd_synth)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except TrackingLost as exc:
        print(f"tracking lost: {exc}", file=sys.stderr)
        return EXIT_TRACKING
    except BootstrapFailure as exc:
        print(f"bootstrap failed: {exc}", file=sys.stderr)
        return EXIT_BOOTSTRAP


if __name__ == "__main__":
    sys.exit(main())
