"""Command line entry point: ``lidarloc {synth,build-map,run,eval}``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import glob
import logging
import os
import sys
from typing import List, Optional

from .config import SCHEMA, RunConfig
from .errors import LidarLocError
from .io import FORMATS, parse_scan_file, write_kitti_bin, write_ply_ascii
from .pipeline import read_timestamps, run_pipeline
from .segmentation import build_segment_db
from .synth import SynthParams, synth_scene
from .trajectory import eval_abs_error, read_trajectory, write_error_csv, write_trajectory

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
SCAN_EXTENSIONS = (".bin", ".csv", ".xyz", ".ply")

log = logging.getLogger("lidarloc")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _cmd_synth(args) -> int:
    params = SynthParams(object_count=args.objects, scan_count=args.scans, drift_bias=args.drift_bias)
    scene = synth_scene(args.seed, params)
    out = args.out_dir
    scan_dir = os.path.join(out, "scans")
    os.makedirs(scan_dir, exist_ok=True)
    write_ply_ascii(scene.map_cloud, os.path.join(out, "map.ply"))
    for i, scan in enumerate(scene.scans):
        write_kitti_bin(scan, os.path.join(scan_dir, f"{i:06d}.bin"))
    with open(os.path.join(scan_dir, "times.txt"), "w", encoding="ascii", newline="\n") as fh:
        fh.writelines(f"{n.timestamp:.6f}\n" for n in scene.ground_truth)
    write_trajectory(scene.ground_truth, os.path.join(out, "groundtruth.txt"))
    write_trajectory(scene.drifted, os.path.join(out, "odometry_truth.txt"))
    p0 = scene.ground_truth[0].pose
    t, q = p0.translation, p0.as_quaternion()
    lidar = scene.lidar
    cfg = [
        f"# synthetic drive, seed {args.seed}",
        "initial_pose = " + " ".join(f"{v:.17g}" for v in (*t, *q)),
        f"sensor_rings = {lidar.rings}",
        f"sensor_elevation_min_deg = {lidar.elevation_min_deg!r}",
        f"sensor_elevation_max_deg = {lidar.elevation_max_deg!r}",
        f"scan_period_s = {params.scan_period_s!r}",
        f"odom_range_scale_bias = {params.drift_bias!r}",
        "seg_min_height_m = 0.3",
        "localization_enabled = true",
        "rng_seed = 0",
    ]
    with open(os.path.join(out, "run.cfg"), "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(cfg) + "\n")
    print(f"wrote {len(scene.scans)} scans, map of {len(scene.map_cloud)} points to {out}")
    return EXIT_OK


def _cmd_build_map(args) -> int:
    config = RunConfig.load(args.config) if args.config else RunConfig.defaults()
    cloud = parse_scan_file(args.map_file, args.format)
    db = build_segment_db(cloud, config.segmentation())
    db.save(args.out)
    print(f"{len(db)} segments from {len(cloud)} points written to {args.out}")
    return EXIT_OK


def _scan_paths(scan_dir) -> List[str]:
    if not os.path.isdir(scan_dir):
        raise LidarLocError(f"scan directory {scan_dir!r} does not exist")
    paths = sorted(p for p in glob.glob(os.path.join(scan_dir, "*"))
                   if os.path.splitext(p)[1].lower() in SCAN_EXTENSIONS)
    if not paths:
        raise LidarLocError(f"no scan files in {scan_dir!r}")
    return paths


def _cmd_run(args) -> int:
    config = RunConfig.load(args.config)
    paths = _scan_paths(args.scans)
    times_file = os.path.join(args.scans, "times.txt")
    stamps = read_timestamps(times_file) if os.path.exists(times_file) else None
    nodes, report = run_pipeline(config, paths, args.db, stamps)
    write_trajectory(nodes, args.out_traj)
    report.write(args.out_report)
    c, f, a, s = report.totals()
    print(f"{len(nodes)} poses; {len(report.rows)} localization attempts, {s} successful "
          f"(candidates {c}, filtered out {f}, accepted {a})")
    return EXIT_OK


def _cmd_eval(args) -> int:
    summary = eval_abs_error(read_trajectory(args.traj), read_trajectory(args.gt), args.bin_width)
    write_error_csv(summary, args.out)
    print(f"nodes {summary.errors.size} mean {summary.mean:.6f} max {summary.max:.6f} rmse {summary.rmse:.6f}")
    for lo, hi, n in zip(summary.hist_edges[:-1], summary.hist_edges[1:], summary.hist_counts):
        print(f"  [{lo:.2f}, {hi:.2f}) m: {n}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lidarloc", description="Lidar odometry with segment-based relocalization.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="generate a synthetic town, drive and config")
    p.add_argument("--seed", type=int, required=True, help="scene seed")
    p.add_argument("--out-dir", required=True, help="output directory")
    p.add_argument("--scans", type=int, default=100, help="number of scans (default 100)")
    p.add_argument("--objects", type=int, default=20, help="number of planted objects (default 20)")
    p.add_argument("--drift-bias", type=float, default=0.02,
                   help="fractional range error injected into odometry (default 0.02)")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("build-map", help="segment a target map into a segment database")
    p.add_argument("map_file", help="map point cloud (.bin, .csv or .ply)")
    p.add_argument("--out", required=True, help="segment database output path")
    p.add_argument("--config", help="run config supplying segmentation settings")
    p.add_argument("--format", choices=FORMATS, help="override the format implied by the extension")
    p.set_defaults(func=_cmd_build_map)

    keys = ", ".join(sorted(SCHEMA))
    p = sub.add_parser("run", help="run odometry and relocalization over a scan directory",
                       epilog=f"config keys: {keys}")
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--scans", required=True, help="directory of scans, processed in filename order")
    p.add_argument("--db", required=True, help="segment database from build-map")
    p.add_argument("--out-traj", required=True, help="trajectory output path")
    p.add_argument("--out-report", required=True, help="match report CSV output path")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("eval", help="absolute position error of a trajectory against ground truth")
    p.add_argument("--traj", required=True, help="estimated trajectory")
    p.add_argument("--gt", required=True, help="ground-truth trajectory")
    p.add_argument("--out", required=True, help="per-node error CSV output path")
    p.add_argument("--bin-width", type=float, default=0.5, help="histogram bin width in m (default 0.5)")
    p.set_defaults(func=_cmd_eval)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (LidarLocError, OSError) as exc:
        print(f"lidarloc {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
