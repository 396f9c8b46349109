import numpy as np
import pytest
from hypothesis import given, settings

from conftest import half_visible_trial, homogeneous, random_transform, transforms
from lidarloc.errors import InvalidInputError, InvalidParameterError, NoOverlapError
from lidarloc.geometry import PointCloud, RigidTransform
from lidarloc.matching import MatchCandidate
from lidarloc.relocalization import (
    LocalMap,
    RelocalizationConfig,
    compose_update,
    densify_local_map,
    localize,
    prior_transform,
    refine_with_icp,
)
from lidarloc.segmentation import build_segment_db
from lidarloc.synth import Box, Cylinder, object_surface_cloud, rot_z

OBJECTS = [
    Box((6.0, 4.0), (2.0, 1.2, 2.5), 0.3),
    Box((-5.0, 6.0), (4.5, 0.2, 2.0), 1.1, kind="plane"),
    Cylinder((3.0, -7.0), 0.3, 4.0),
    Box((-8.0, -3.0), (1.5, 2.8, 1.2), -0.7),
    Cylinder((10.0, -1.0), 0.55, 2.2),
    Box((0.0, 11.0), (3.0, 3.0, 3.0), 0.2),
]


@pytest.fixture(scope="module")
def scene():
    cloud = object_surface_cloud(OBJECTS, spacing=0.05)
    return cloud, build_segment_db(cloud)


def cand(offset):
    return MatchCandidate(0, 0, 0.0, np.asarray(offset, dtype=float))


def test_local_map_keeps_last_k(rng):
    lm = LocalMap(k=3)
    scans = [PointCloud(rng.normal(size=(5, 3))) for _ in range(5)]
    for s in scans:
        lm = densify_local_map(lm, s, RigidTransform.identity())
    assert len(lm) == 3
    assert np.array_equal(lm.cloud.points, np.concatenate([s.points for s in scans[2:]]))


def test_local_map_k1_and_pose_union(rng):
    a, b = PointCloud(rng.normal(size=(4, 3))), PointCloud(rng.normal(size=(6, 3)))
    Ta, Tb = random_transform(rng), random_transform(rng)
    lm = densify_local_map(densify_local_map(LocalMap(k=5), a, Ta), b, Tb)
    np.testing.assert_allclose(lm.cloud.points, np.vstack([Ta.apply(a.points), Tb.apply(b.points)]))
    one = densify_local_map(lm, a, Ta, k=1)
    assert len(one) == 1 and len(one.cloud) == 4
    with pytest.raises(InvalidParameterError):
        densify_local_map(lm, a, Ta, k=0)


def test_local_map_corrected_left_multiplies(rng):
    scan = PointCloud(rng.normal(size=(5, 3)))
    P, U = random_transform(rng), random_transform(rng)
    lm = densify_local_map(LocalMap(), scan, P).corrected(U)
    np.testing.assert_allclose(lm.cloud.points, (U @ P).apply(scan.points), atol=1e-12)


def test_prior_transform_mean():
    T = prior_transform([cand((1, 2, 3)), cand((3, 2, 1))])
    assert np.array_equal(T.rotation, np.eye(3))
    np.testing.assert_allclose(T.translation, [2, 2, 2], atol=1e-12)
    T = prior_transform([cand((1, 2, 3)), cand((3, 2, 1))], planar=True)
    assert T.translation[2] == 0.0
    with pytest.raises(InvalidInputError):
        prior_transform([])


def test_prior_transform_oracle(rng):
    offs = rng.normal(size=(17, 3)) * 5
    T = prior_transform([cand(o) for o in offs])
    np.testing.assert_allclose(T.translation, offs.mean(axis=0), atol=1e-12)
    assert np.array_equal(T.rotation, np.eye(3))


def test_refine_identity_when_aligned(scene):
    cloud, _ = scene
    W_ICP, rmse = refine_with_icp(cloud, cloud, RigidTransform.identity())
    np.testing.assert_allclose(W_ICP.as_matrix(), np.eye(4), atol=1e-9)
    assert rmse < 1e-9


def test_refine_improves_half_visible_segment(rng):
    reductions = []
    for _ in range(10):
        prior, refined = half_visible_trial(rng)
        assert refined <= prior
        reductions.append(1 - refined / prior)
    assert np.median(reductions) >= 0.3


def test_refine_empty_target_raises():
    with pytest.raises(NoOverlapError):
        refine_with_icp(PointCloud(np.zeros((3, 3))), PointCloud.empty(), RigidTransform.identity())


def test_compose_update_examples():
    W_p = RigidTransform.from_translation([1, 0, 0])
    W_u, W_t = compose_update(RigidTransform.identity(), W_p, RigidTransform.identity())
    np.testing.assert_allclose(W_u.translation, [1, 0, 0])
    np.testing.assert_allclose(W_t.translation, [1, 0, 0])
    W_e = RigidTransform.from_translation([0, 5, 0])
    W_ICP = RigidTransform.from_translation([0.5, 0, 0])
    W_u, W_t = compose_update(W_e, W_p, W_ICP)
    np.testing.assert_allclose(W_u.translation, [0.5, 0, 0])
    np.testing.assert_allclose(W_t.translation, [0.5, 5, 0])
    W_u, W_t = compose_update(RigidTransform.identity(), RigidTransform.from_translation([2, 0, 0]),
                              RigidTransform.from_translation([0.1, 0, 0]))
    np.testing.assert_allclose(W_t.as_matrix(), RigidTransform.from_translation([1.9, 0, 0]).as_matrix(), atol=1e-15)


def test_compose_identity_parts_keep_estimate(rng):
    W_e = random_transform(rng, 50.0)
    _, W_t = compose_update(W_e, RigidTransform.identity(), RigidTransform.identity())
    assert np.array_equal(W_t.translation, W_e.translation)


@settings(max_examples=100, deadline=None)
@given(transforms(), transforms(), transforms())
def test_compose_update_matches_matrix_product(W_e, W_p, W_ICP):
    W_u, W_t = compose_update(W_e, W_p, W_ICP)
    oracle = homogeneous(W_p) @ np.linalg.inv(homogeneous(W_ICP)) @ homogeneous(W_e)
    np.testing.assert_allclose(W_t.as_matrix(), oracle, atol=1e-12)


def test_self_localization(scene):
    cloud, db = scene
    lm = densify_local_map(LocalMap(), cloud, RigidTransform.identity())
    att = localize(lm, db, RigidTransform.identity())
    assert att.success
    assert att.accepted >= 4
    assert np.linalg.norm(att.update.W_u.translation) < 1e-3
    assert np.degrees(att.update.W_u.angle()) < 0.05


def test_localization_removes_offset(scene):
    cloud, db = scene
    err = RigidTransform.from_translation([2.0, 1.0, 0.0])
    lm = densify_local_map(LocalMap(), cloud, err)
    att = localize(lm, db, err)
    assert att.success
    np.testing.assert_allclose((att.update.W_u @ err).translation, [0, 0, 0], atol=0.1)


def test_localization_reduces_planted_offsets(scene):
    cloud, db = scene
    rng = np.random.default_rng(11)
    for _ in range(100):
        offset = np.append(rng.uniform(-1, 1, 2), 0.0)
        offset *= rng.uniform(0.2, 15.0) / np.linalg.norm(offset)
        err = RigidTransform.from_translation(offset)
        att = localize(densify_local_map(LocalMap(), cloud, err), db, err)
        assert att.success
        assert np.linalg.norm((att.update.W_u @ err).translation) < np.linalg.norm(offset)


def test_localization_outside_gate(scene):
    cloud, db = scene
    far = RigidTransform.from_translation([500.0, 0.0, 0.0])
    lm = densify_local_map(LocalMap(), cloud, far)
    att = localize(lm, db, far)
    assert not att.success
    assert att.candidates == 0 and att.accepted == 0


def test_localization_deterministic(scene):
    cloud, db = scene
    err = RigidTransform(rot_z(0.01), [1.0, -0.5, 0.0])
    lm = densify_local_map(LocalMap(), cloud, err)
    a, b = localize(lm, db, err), localize(lm, db, err)
    assert a.inliers == b.inliers
    assert np.array_equal(a.update.W_u.as_matrix(), b.update.W_u.as_matrix())


def test_rotated_correction_needs_extra_inlier(scene):
    cloud, db = scene
    err = RigidTransform(rot_z(np.radians(4.0)), [0.0, 0.0, 0.0])
    lm = densify_local_map(LocalMap(), cloud, err)
    cfg = RelocalizationConfig(max_offset_diff_m=5.0)
    att = localize(lm, db, err, cfg)
    assert att.success and att.accepted > cfg.min_cluster_size
    assert np.degrees((att.update.W_u @ err).angle()) < 0.5
    strict = RelocalizationConfig(max_offset_diff_m=5.0, min_cluster_size=att.accepted)
    rejected = localize(lm, db, err, strict)
    assert not rejected.success and rejected.accepted == att.accepted


def test_empty_local_map_rejected(scene):
    _, db = scene
    with pytest.raises(InvalidInputError):
        localize(LocalMap(), db, RigidTransform.identity())
