import numpy as np
import pytest
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from lidarloc.geometry import RigidTransform


def random_transform(rng, max_translation=10.0, max_angle=np.pi):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(-max_angle, max_angle)
    R = Rotation.from_rotvec(axis * angle).as_matrix()
    return RigidTransform(R, rng.uniform(-max_translation, max_translation, 3))


def homogeneous(T):
    M = np.eye(4)
    M[:3, :3] = T.rotation
    M[:3, 3] = T.translation
    return M


@st.composite
def transforms(draw, max_translation=10.0):
    seed = draw(st.integers(0, 2**32 - 1))
    return random_transform(np.random.default_rng(seed), max_translation)


@st.composite
def point_arrays(draw, min_points=1, max_points=60, scale=10.0):
    seed = draw(st.integers(0, 2**32 - 1))
    n = draw(st.integers(min_points, max_points))
    return np.random.default_rng(seed).uniform(-scale, scale, size=(n, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def drive_scans(seed, n, **params):
    """Scans and true poses along the synthetic route, without building a target map."""
    from lidarloc.synth import Ground, LidarModel, SynthParams, place_objects, route_pose

    p = SynthParams(scan_count=n, **params)
    objects = place_objects(np.random.default_rng(seed), p)
    lidar = LidarModel(max_range=p.sensor_range_m)
    world = objects + [Ground()]
    poses = [route_pose(i * p.step_m, p) for i in range(n)]
    return [lidar.scan(P, world) for P in poses], poses


def half_visible_trial(rng):
    """Surface RMSE after the centroid prior and after ICP for one partially seen object.

    The local segment is a lidar view of a random object (only sensor-facing
    surfaces), displaced by a small unknown motion; the target is the full surface.
    """
    from scipy.spatial import cKDTree

    from lidarloc.geometry import PointCloud
    from lidarloc.matching import MatchCandidate
    from lidarloc.relocalization import prior_transform, refine_with_icp
    from lidarloc.synth import Box, Cylinder, LidarModel, object_surface_cloud, rot_z

    if rng.uniform() < 0.7:
        obj = Box((0.0, 0.0), tuple(rng.uniform([1, 1, 1], [3, 3, 3.5])), rng.uniform(-np.pi, np.pi))
    else:
        obj = Cylinder((0.0, 0.0), rng.uniform(0.3, 0.6), rng.uniform(2, 5))
    target = object_surface_cloud([obj], spacing=0.05)
    a, d = rng.uniform(-np.pi, np.pi), rng.uniform(5, 10)
    sensor = RigidTransform(rot_z(a + np.pi), [d * np.cos(a), d * np.sin(a), 1.8])
    visible = sensor.apply(LidarModel(max_range=30).scan(sensor, [obj]).points)
    motion = RigidTransform(rot_z(rng.uniform(-0.02, 0.02)), [*rng.uniform(-1, 1, 2), 0.0])
    local = PointCloud(motion.apply(visible))
    offset = target.points.mean(axis=0) - local.points.mean(axis=0)
    W_p = prior_transform([MatchCandidate(0, 0, 0.0, offset)])
    W_ICP, _ = refine_with_icp(local, target, W_p)
    tree = cKDTree(target.points)

    def surface_rmse(T):
        return float(np.sqrt(np.mean(tree.query(T.apply(local.points))[0] ** 2)))

    return surface_rmse(W_p), surface_rmse(W_p @ W_ICP.inverse())


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record a criterion outcome; lines are printed in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(criterion, ok, detail):
        line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
