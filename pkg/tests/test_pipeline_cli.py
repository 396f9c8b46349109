import os
import subprocess
import sys

import numpy as np
import pytest

from lidarloc.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from lidarloc.config import RunConfig
from lidarloc.errors import InvalidInputError
from lidarloc.geometry import PointCloud, RigidTransform
from lidarloc.pipeline import corrected_transitions, read_match_report, run_pipeline
from lidarloc.segmentation import SegmentDatabase, build_segment_db
from lidarloc.synth import Box, LidarModel, Room
from lidarloc.trajectory import CORRECTED, read_trajectory


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("drive")
    assert main(["synth", "--seed", "3", "--out-dir", str(d), "--scans", "20", "--objects", "8"]) == EXIT_OK
    assert main(["build-map", str(d / "map.ply"), "--out", str(d / "map.db"), "--config", str(d / "run.cfg")]) == EXIT_OK
    args = ["run", "--config", str(d / "run.cfg"), "--scans", str(d / "scans"), "--db", str(d / "map.db")]
    assert main(args + ["--out-traj", str(d / "t.txt"), "--out-report", str(d / "r.csv")]) == EXIT_OK
    return d, args


@pytest.fixture(scope="module")
def tiny_db():
    rng = np.random.default_rng(0)
    return build_segment_db(PointCloud(rng.normal((50, 50, 2), 0.3, size=(400, 3))))


def test_identical_scans_stay_at_identity(tiny_db):
    scan = LidarModel(max_range=30).scan(
        RigidTransform.from_translation([7, 4, 1.5]),
        [Room((1, 0.5, 0), (14, 9, 3), closed=False), Box((5, 3), (1, 1, 1), 0.3)])
    cfg = RunConfig.defaults().updated(localization_enabled=False)
    nodes, report = run_pipeline(cfg, [scan, scan], tiny_db)
    assert len(nodes) == 2 and report.rows == []
    np.testing.assert_allclose(nodes[1].pose.as_matrix(), np.eye(4), atol=1e-6)


def test_pipeline_input_validation(tiny_db):
    cfg = RunConfig.defaults()
    with pytest.raises(InvalidInputError):
        run_pipeline(cfg, [PointCloud.empty()], tiny_db)
    with pytest.raises(InvalidInputError):
        run_pipeline(cfg, [PointCloud.empty()] * 2, tiny_db, timestamps=[0.0])


def test_run_outputs(small_run):
    d, _ = small_run
    nodes = read_trajectory(d / "t.txt")
    gt = read_trajectory(d / "groundtruth.txt")
    assert [n.timestamp for n in nodes] == [n.timestamp for n in gt]
    report = read_match_report(d / "r.csv")
    assert [r.scan for r in report.rows] == [9, 19]
    assert report.config_echo[0].startswith("initial_pose")
    last = (d / "r.csv").read_text().splitlines()[-1]
    c, f, a, s = report.totals()
    assert last == f"total,{c},{f},{a},{s},"
    assert all(r.filtered_out + r.accepted == r.candidates for r in report.rows)
    assert s == 2


def test_success_count_matches_corrected_nodes(small_run):
    d, args = small_run
    cfg = RunConfig.load(d / "run.cfg")
    scans = sorted(str(p) for p in (d / "scans").glob("*.bin"))
    nodes, report = run_pipeline(cfg, scans, SegmentDatabase.load(d / "map.db"))
    assert corrected_transitions(nodes) == report.totals()[3]
    assert [i for i, n in enumerate(nodes) if n.source == CORRECTED] == [r.scan for r in report.rows if r.success]


def test_run_is_deterministic(small_run, tmp_path):
    d, args = small_run
    assert main(args + ["--out-traj", str(tmp_path / "t.txt"), "--out-report", str(tmp_path / "r.csv")]) == EXIT_OK
    assert (tmp_path / "t.txt").read_bytes() == (d / "t.txt").read_bytes()
    assert (tmp_path / "r.csv").read_bytes() == (d / "r.csv").read_bytes()


def test_eval_cli(small_run, tmp_path, capsys):
    d, _ = small_run
    gt = str(d / "groundtruth.txt")
    assert main(["eval", "--traj", gt, "--gt", gt, "--out", str(tmp_path / "e.csv")]) == EXIT_OK
    assert "mean 0.000000" in capsys.readouterr().out
    assert main(["eval", "--traj", str(d / "t.txt"), "--gt", gt, "--out", str(tmp_path / "e2.csv")]) == EXIT_OK
    errs = np.loadtxt(tmp_path / "e2.csv", delimiter=",", skiprows=1)[:, 1]
    assert errs.max() < 0.5


def test_single_object_scan_on_surface():
    box = Box((5.0, 0.0), (1.5, 1.0, 2.0), 0.4)
    scan = LidarModel(max_range=30).scan(RigidTransform.from_translation([0, 0, 1.0]), [box])
    assert len(scan) > 100
    pts = scan.points + [0, 0, 1.0]
    assert np.all(np.linalg.norm(scan.points, axis=1) <= 30)
    # signed distance to the box surface in the box frame
    c, s_ = np.cos(-box.yaw), np.sin(-box.yaw)
    rel = pts - [box.center_xy[0], box.center_xy[1], box.z0 + box.size[2] / 2]
    local = np.column_stack([c * rel[:, 0] - s_ * rel[:, 1], s_ * rel[:, 0] + c * rel[:, 1], rel[:, 2]])
    q = np.abs(local) - np.asarray(box.size) / 2
    sdf = np.linalg.norm(np.maximum(q, 0), axis=1) + np.minimum(q.max(axis=1), 0)
    assert np.max(np.abs(sdf)) < 1e-6


def test_synth_outputs_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["synth", "--seed", "5", "--out-dir", str(d), "--scans", "3", "--objects", "1"]) == EXIT_OK
    for name in ("map.ply", "groundtruth.txt", "odometry_truth.txt", "run.cfg", "scans/000002.bin"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert main(["build-map", str(a / "map.ply"), "--out", str(a / "db")]) == EXIT_OK
    assert len(SegmentDatabase.load(a / "db")) == 1


@pytest.mark.parametrize("cmd", [[], ["synth"], ["build-map"], ["run"], ["eval"]])
def test_help_exits_zero(cmd, capsys):
    assert main(cmd + ["--help"]) == EXIT_OK
    assert "usage" in capsys.readouterr().out


def test_usage_errors_exit_one(tmp_path):
    assert main([]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["run", "--config", "c", "--scans", "s", "--out-traj", "t", "--out-report", "r"]) == EXIT_USAGE
    assert main(["synth", "--seed", "x", "--out-dir", str(tmp_path)]) == EXIT_USAGE


def test_runtime_errors_exit_two(small_run, tmp_path):
    d, args = small_run
    assert main(["eval", "--traj", str(tmp_path / "nope"), "--gt", str(tmp_path / "nope"), "--out", "x"]) == EXIT_RUNTIME
    bad = tmp_path / "bad.cfg"
    bad.write_text("no_such_key = 1\n")
    out = ["--out-traj", str(tmp_path / "t"), "--out-report", str(tmp_path / "r")]
    assert main(["run", "--config", str(bad), "--scans", str(d / "scans"), "--db", str(d / "map.db")] + out) == EXIT_RUNTIME
    assert main(["run", "--config", str(d / "run.cfg"), "--scans", str(tmp_path), "--db", str(d / "map.db")] + out) == EXIT_RUNTIME
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    assert main(["build-map", str(empty), "--out", str(tmp_path / "db")]) == EXIT_RUNTIME


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "lidarloc.cli", "run", "--help"], capture_output=True, text=True,
                         env={**os.environ})
    assert out.returncode == 0 and "--out-report" in out.stdout
