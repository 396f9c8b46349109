import dataclasses

import numpy as np
import pytest

from lidarloc.errors import InvalidInputError, OutOfWindowError, UnderConstrainedError
from lidarloc.geometry import PointCloud, RigidTransform, VoxelGridSpec, transform_cloud, voxel_downsample
from lidarloc.odometry import (FeatureSet, OdometryConfig, OdometryState, advance, apply_correction,
                               compute_smoothness, estimate_motion, extract_features, map_refine)
from lidarloc.synth import Box, LidarModel, Room, rot_z

from conftest import drive_scans, homogeneous, random_transform

LIDAR = LidarModel(max_range=30.0)
ROOM = [Room((1.0, 0.5, 1.0), (14.0, 9.0, 5.0))]
# four walls only: no floor crease, and height stays at the guess
WALLS = [Room((1.0, 0.5, 0.0), (14.0, 9.0, 3.0), closed=False)]


def motion(dx, dy, yaw_deg, dz=0.0):
    return RigidTransform(rot_z(np.radians(yaw_deg)), [dx, dy, dz])


def moved_features(feats, G):
    def tf(c):
        return transform_cloud(c, G)

    return dataclasses.replace(feats, edge_points=tf(feats.edge_points), planar_points=tf(feats.planar_points),
                               edge_targets=tf(feats.edge_targets), planar_targets=tf(feats.planar_targets))


class TestSmoothness:
    def test_collinear_is_zero(self):
        line = np.column_stack([np.linspace(1, 5, 11), np.full(11, 2.0), np.zeros(11)])
        assert compute_smoothness(line, 5, 5) == pytest.approx(0.0, abs=1e-12)

    def test_right_angle_corner(self):
        arm = np.arange(1, 6, dtype=float)
        corner = np.array([5.0, 5.0, 0.0])
        line = np.concatenate([corner + np.column_stack([-arm[::-1], 0 * arm, 0 * arm]),
                               [corner], corner + np.column_stack([0 * arm, -arm, 0 * arm])])
        # each arm contributes sum(1..5) = 15 along one axis
        expected = np.linalg.norm([15.0, 15.0, 0.0]) / (10 * np.linalg.norm(corner))
        assert compute_smoothness(line, 5, 5) == pytest.approx(expected, abs=1e-12)

    def test_boundary(self):
        with pytest.raises(OutOfWindowError):
            compute_smoothness(np.ones((11, 3)), 0, 5)

    def test_zero_iff_difference_sum_vanishes(self, rng):
        pts = rng.normal(size=(11, 3)) + [10, 0, 0]
        s = (pts[5] - np.delete(pts, 5, axis=0)).sum(axis=0)
        assert (compute_smoothness(pts, 5, 5) == 0) == bool(np.allclose(s, 0, atol=1e-12))
        sym = np.array([[10.0, 0, 0]] * 11) + np.outer(np.arange(-5, 6), [0.1, 0.2, 0.0])
        assert compute_smoothness(sym, 5, 5) == pytest.approx(0.0, abs=1e-12)


class TestExtractFeatures:
    def test_plane_gives_no_edges(self):
        wall = [Box((8.0, 0.0), (0.2, 60.0, 40.0))]
        f = extract_features(LIDAR.scan(RigidTransform.identity(), wall))
        assert len(f.edge_points) == 0
        assert len(f.planar_points) > 0

    def test_room_edges_only_at_wall_corners(self):
        room = Room((0.0, 0.0, 0.0), (12.0, 8.0, 3.0), closed=False)
        cfg = OdometryConfig()
        f = extract_features(LIDAR.scan(RigidTransform.identity(), [room]), cfg)
        assert len(f.edge_points) > 0
        corners = np.array([[6, 4], [6, -4], [-6, 4], [-6, -4]], dtype=float)
        d = np.linalg.norm(f.edge_points.points[:, None, :2] - corners[None], axis=2).min(axis=1)
        assert np.all(d < 0.2)
        per_line = np.bincount(f.edge_points.ring)
        assert per_line.max() <= cfg.regions * cfg.edge_quota

    def test_empty(self):
        f = extract_features(PointCloud(np.empty((0, 3)), ring=np.empty(0, dtype=int)))
        assert len(f) == 0

    def test_requires_rings(self):
        with pytest.raises(InvalidInputError):
            extract_features(PointCloud(np.ones((20, 3))))

    def test_thresholds_and_disjointness(self):
        cfg = OdometryConfig()
        f = extract_features(LIDAR.scan(RigidTransform.identity(), ROOM), cfg)
        assert np.all(f.edge_c > cfg.edge_threshold)
        assert np.all(f.planar_c < cfg.planar_threshold)
        edges = {tuple(p) for p in np.round(f.edge_points.points, 6)}
        planes = {tuple(p) for p in np.round(f.planar_points.points, 6)}
        assert not edges & planes


@pytest.fixture(scope="module")
def room_scan():
    return LIDAR.scan(RigidTransform.identity(), ROOM)


@pytest.fixture(scope="module")
def room_features(room_scan):
    return extract_features(room_scan)


@pytest.fixture(scope="module")
def straight_drive():
    return drive_scans(3, 50, route_amplitude_m=0.0, drift_bias=0.0)


class TestEstimateMotion:
    def test_identical_sets_give_identity(self, room_features):
        T = estimate_motion(room_features, room_features)
        assert np.allclose(T.as_matrix(), np.eye(4), atol=1e-6)

    @pytest.mark.parametrize("step", [motion(0.1, 0, 1.0), motion(0, 0.1, -1.0), motion(0.07, 0.07, 1.0)])
    def test_recovers_small_motion(self, step):
        P0 = RigidTransform.identity()
        P1 = P0 @ step
        a = extract_features(LIDAR.scan(P0, ROOM))
        b = extract_features(LIDAR.scan(P1, ROOM))
        err = estimate_motion(a, b).inverse() @ (P1.inverse() @ P0)
        assert np.linalg.norm(err.translation) < 1e-3
        assert np.degrees(err.angle()) < 0.1

    def test_under_constrained(self):
        two = PointCloud([[5.0, 0, 0], [5.0, 1.0, 0]], ring=np.array([0, 0]))
        empty = PointCloud(np.empty((0, 3)), ring=np.empty(0, dtype=int))
        z = np.zeros(2)
        f = FeatureSet(two, empty, z, np.empty(0), two, z, empty, np.empty(0))
        with pytest.raises(UnderConstrainedError):
            estimate_motion(f, f)

    def test_equivariance(self, room_features):
        step = motion(0.05, -0.03, 0.5)
        curr = extract_features(LIDAR.scan(step, ROOM))
        T = estimate_motion(room_features, curr)
        G = motion(0.04, 0.02, 0.3, dz=0.01)
        TG = estimate_motion(room_features, moved_features(curr, G))
        assert np.allclose(TG.as_matrix(), (G @ T).as_matrix(), atol=1e-4)


@pytest.fixture(scope="module")
def walls_scan():
    return LIDAR.scan(RigidTransform.identity(), WALLS)


class TestMapRefine:
    @pytest.fixture
    def scan(self, walls_scan):
        return walls_scan

    def test_bootstrap(self, scan):
        state = OdometryState.start()
        state.scan_count = 1
        pose = map_refine(state, scan)
        assert np.array_equal(pose.as_matrix(), np.eye(4))
        expected = voxel_downsample(scan, VoxelGridSpec(state.config.map_voxel_m))
        assert len(state.map) == len(expected)

    def test_identity_when_scan_matches_map(self, scan):
        state = OdometryState.start()
        state.scan_count = 1
        map_refine(state, scan)
        state.scan_count = 2
        pose = map_refine(state, scan)
        assert np.allclose(pose.as_matrix(), np.eye(4), atol=1e-6)

    def test_drifted_guess_snaps_back(self, scan):
        state = OdometryState.start()
        state.scan_count = 1
        map_refine(state, scan)
        state.scan_count = 2
        state.loam_pose = RigidTransform.from_translation([0.2, 0.0, 0.0])
        pose = map_refine(state, scan)
        assert np.linalg.norm(pose.translation) < 0.02


class TestAdvance:
    def test_identical_scans_do_not_move(self):
        scan = LIDAR.scan(RigidTransform.identity(), ROOM)
        state = OdometryState.start()
        state, _ = advance(state, scan)
        state, pose = advance(state, scan)
        assert np.allclose(pose.as_matrix(), np.eye(4), atol=1e-6)

    def _run(self, scans, poses, bias=0.0):
        state = OdometryState.start(poses[0], OdometryConfig(range_scale_bias=bias))
        out = []
        for s in scans:
            state, p = advance(state, s)
            out.append(p)
        return out

    def test_straight_drive_under_one_percent(self, straight_drive):
        scans, poses = straight_drive
        est = self._run(scans, poses)
        path = np.linalg.norm(poses[-1].translation - poses[0].translation)
        assert np.linalg.norm(est[-1].translation - poses[-1].translation) < 0.01 * path

    def test_bias_drift_grows_monotonically(self, straight_drive):
        scans, poses = straight_drive
        est = self._run(scans, poses, bias=0.02)
        err = np.array([np.linalg.norm(e.translation - g.translation) for e, g in zip(est, poses)])
        assert err[-1] > 0.5
        assert np.all(np.diff(err) >= 0)

    def test_deterministic(self, straight_drive):
        scans, poses = straight_drive
        a = self._run(scans[:15], poses)
        b = self._run(scans[:15], poses)
        assert all(np.array_equal(x.as_matrix(), y.as_matrix()) for x, y in zip(a, b))


class TestApplyCorrection:
    def test_identity(self, rng):
        state = OdometryState.start(random_transform(rng))
        before = state.current_pose.as_matrix()
        assert np.array_equal(apply_correction(state, RigidTransform.identity()).current_pose.as_matrix(), before)

    def test_hand_product(self):
        state = OdometryState.start(RigidTransform.from_translation([5.0, 0, 0]))
        out = apply_correction(state, RigidTransform.from_translation([-1.0, 0, 0]))
        assert np.allclose(out.current_pose.translation, [4.0, 0, 0], atol=0)

    def test_matches_homogeneous_oracle(self, rng):
        for _ in range(100):
            We, Wu = random_transform(rng), random_transform(rng)
            state = apply_correction(OdometryState.start(We), Wu)
            assert np.allclose(state.current_pose.as_matrix(), homogeneous(Wu) @ homogeneous(We), atol=1e-12)

    def test_internal_map_untouched(self):
        scan = LIDAR.scan(RigidTransform.identity(), ROOM)
        state, _ = advance(OdometryState.start(), scan)
        before = state.map.points.copy()
        apply_correction(state, RigidTransform.from_translation([3.0, 0, 0]))
        assert np.array_equal(state.map.points, before)
