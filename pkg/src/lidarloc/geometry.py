"""3D point clouds, rigid transforms and the numeric kernels built on them."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from . import kernels
from .errors import (
    DegenerateGeometryError,
    InsufficientDataError,
    InvalidInputError,
    InvalidParameterError,
    NoOverlapError,
)

ORTHO_TOL = 1e-9


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


class PointCloud:
    """An ordered (n, 3) array of finite points with optional per-point attributes.

    ``ring`` holds the scan-line index of each point and ``intensity`` the
    return strength; either may be ``None``. Arrays are stored read-only.
    """

    __slots__ = ("points", "ring", "intensity")

    def __init__(self, points, ring=None, intensity=None):
        pts = np.asarray(points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InvalidInputError(f"points must have shape (n, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InvalidInputError("point coordinates must be finite")
        n = pts.shape[0]
        if ring is not None:
            ring = np.asarray(ring)
            if ring.shape != (n,):
                raise InvalidInputError("ring attribute length must equal point count")
            if n and (ring.min() < 0 or not np.issubdtype(ring.dtype, np.integer)):
                raise InvalidInputError("ring indices must be non-negative integers")
            ring = _frozen(ring, np.int64)
        if intensity is not None:
            intensity = np.asarray(intensity, dtype=np.float64)
            if intensity.shape != (n,):
                raise InvalidInputError("intensity attribute length must equal point count")
            intensity = _frozen(intensity)
        self.points = pts if not pts.flags.writeable and pts.dtype == np.float64 else _frozen(pts)
        self.ring = ring
        self.intensity = intensity

    def __len__(self):
        return self.points.shape[0]

    def __repr__(self):
        attrs = [a for a in ("ring", "intensity") if getattr(self, a) is not None]
        return f"PointCloud(n={len(self)}, attrs={attrs})"

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        return (
            np.array_equal(self.points, other.points)
            and _opt_equal(self.ring, other.ring)
            and _opt_equal(self.intensity, other.intensity)
        )

    __hash__ = None

    @classmethod
    def empty(cls):
        return cls(np.empty((0, 3)))

    def select(self, mask_or_index) -> "PointCloud":
        """Subset of points (boolean mask or integer index) keeping attributes."""
        return PointCloud(
            self.points[mask_or_index],
            None if self.ring is None else self.ring[mask_or_index],
            None if self.intensity is None else self.intensity[mask_or_index],
        )

    @staticmethod
    def concatenate(clouds) -> "PointCloud":
        clouds = list(clouds)
        if not clouds:
            return PointCloud.empty()
        pts = np.concatenate([c.points for c in clouds], axis=0)
        ring = intensity = None
        if all(c.ring is not None for c in clouds):
            ring = np.concatenate([c.ring for c in clouds])
        if all(c.intensity is not None for c in clouds):
            intensity = np.concatenate([c.intensity for c in clouds])
        return PointCloud(pts, ring, intensity)


def _opt_equal(a, b):
    if a is None or b is None:
        return a is None and b is None
    return np.array_equal(a, b)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """A proper rigid motion ``x -> rotation @ x + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise InvalidParameterError("rotation must be 3x3 and translation a 3-vector")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidParameterError("transform entries must be finite")
        if np.max(np.abs(R @ R.T - np.eye(3))) > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise InvalidParameterError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", _frozen(R))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_translation(cls, translation):
        return cls(np.eye(3), translation)

    @classmethod
    def from_matrix(cls, matrix):
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise InvalidParameterError("homogeneous matrix must be 4x4")
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_quaternion(cls, quat_xyzw, translation=(0.0, 0.0, 0.0)):
        q = np.asarray(quat_xyzw, dtype=np.float64)
        norm = np.linalg.norm(q)
        if norm == 0 or not np.isfinite(norm):
            raise InvalidParameterError("quaternion must be non-zero and finite")
        return cls(Rotation.from_quat(q / norm).as_matrix(), translation)

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)):
        return cls(so3_exp(rotvec), translation)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def as_quaternion(self) -> np.ndarray:
        """Unit quaternion (x, y, z, w) with non-negative scalar part."""
        q = Rotation.from_matrix(self.rotation).as_quat()
        if q[3] < 0:
            q = -q
        return q / np.linalg.norm(q)

    def rotvec(self) -> np.ndarray:
        return Rotation.from_matrix(self.rotation).as_rotvec()

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self @ other``: apply ``other`` first, then ``self``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def __matmul__(self, other):
        if isinstance(other, RigidTransform):
            return self.compose(other)
        return NotImplemented

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def angle(self) -> float:
        """Rotation angle in radians."""
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.arccos(np.clip(c, -1.0, 1.0)))

    def __repr__(self):
        t = np.array2string(self.translation, precision=4)
        return f"RigidTransform(t={t}, angle={np.degrees(self.angle()):.4f}deg)"


def compose(t2: RigidTransform, t1: RigidTransform) -> RigidTransform:
    """Transform that applies ``t1`` then ``t2``."""
    return t2.compose(t1)


def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(w):
    """Rodrigues' formula."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    K = skew(w)
    if theta < 1e-12:
        return np.eye(3) + K
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    R = np.eye(3) + a * K + b * (K @ K)
    # re-orthonormalize to keep the 1e-9 invariant under long chains
    u, _, vt = np.linalg.svd(R)
    return u @ vt


@dataclass(frozen=True)
class VoxelGridSpec:
    leaf_size: float
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not (np.isfinite(self.leaf_size) and self.leaf_size > 0):
            raise InvalidParameterError(f"voxel leaf size must be positive, got {self.leaf_size}")


def transform_cloud(cloud: PointCloud, t: RigidTransform) -> PointCloud:
    if len(cloud) == 0:
        return cloud
    return PointCloud(t.apply(cloud.points), cloud.ring, cloud.intensity)


def voxel_keys(points, spec: VoxelGridSpec) -> np.ndarray:
    origin = np.asarray(spec.origin, dtype=np.float64)
    return np.floor((np.asarray(points) - origin) / spec.leaf_size).astype(np.int64)


def voxel_downsample(cloud: PointCloud, spec: VoxelGridSpec) -> PointCloud:
    """One point per occupied voxel, at the mean of its members.

    Output voxels are in lexicographic (ix, iy, iz) order. Ring indices are
    dropped; intensity is averaged.
    """
    if not isinstance(spec, VoxelGridSpec):
        spec = VoxelGridSpec(float(spec))
    if len(cloud) == 0:
        return PointCloud.empty()
    means, inverse = kernels.voxel_mean(cloud.points, voxel_keys(cloud.points, spec))
    intensity = None
    if cloud.intensity is not None:
        counts = np.bincount(inverse, minlength=means.shape[0])
        intensity = np.bincount(inverse, weights=cloud.intensity, minlength=means.shape[0]) / counts
    return PointCloud(means, intensity=intensity)


class SpatialIndex:
    """Immutable k-d tree snapshot of a cloud for kNN and radius queries.

    kNN results are ordered by (distance, index); radius results by index.
    """

    def __init__(self, points):
        pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise InvalidInputError("cannot index an empty cloud")
        self.points = _frozen(pts)
        self._tree = cKDTree(self.points)

    def __len__(self):
        return self.points.shape[0]

    def knn(self, query, k=1, max_distance=np.inf):
        """Return ``(distances, indices)``, each shaped ``(m, k)``.

        Missing neighbours (fewer than k points, or beyond ``max_distance``)
        have distance ``inf`` and index ``len(self)``.
        """
        q = np.atleast_2d(np.asarray(query, dtype=np.float64))
        d, i = self._tree.query(q, k=k, distance_upper_bound=max_distance)
        d = np.asarray(d, dtype=np.float64).reshape(q.shape[0], k)
        i = np.asarray(i, dtype=np.int64).reshape(q.shape[0], k)
        order = np.lexsort((i, d), axis=1)
        return np.take_along_axis(d, order, 1), np.take_along_axis(i, order, 1)

    def nearest(self, query, max_distance=np.inf):
        q = np.atleast_2d(np.asarray(query, dtype=np.float64))
        d, i = self._tree.query(q, k=1, distance_upper_bound=max_distance)
        return np.asarray(d, dtype=np.float64), np.asarray(i, dtype=np.int64)

    def radius(self, center, r) -> np.ndarray:
        idx = self._tree.query_ball_point(np.asarray(center, dtype=np.float64), r)
        return np.array(sorted(idx), dtype=np.int64)

    def pairs(self, r) -> np.ndarray:
        """All index pairs (i < j) closer than ``r``."""
        return self._tree.query_pairs(r, output_type="ndarray").astype(np.int64)


def build_index(cloud) -> SpatialIndex:
    return SpatialIndex(cloud)


def centroid(cloud) -> np.ndarray:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if pts.shape[0] == 0:
        raise InvalidInputError("centroid of an empty cloud")
    return pts.mean(axis=0)


def umeyama_align(source, target) -> RigidTransform:
    """Least-squares rigid transform (no scale) taking ``source[i]`` to ``target[i]``."""
    src = np.asarray(source.points if isinstance(source, PointCloud) else source, dtype=np.float64)
    dst = np.asarray(target.points if isinstance(target, PointCloud) else target, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise InvalidInputError("source and target must be equally sized (n, 3) arrays")
    if src.shape[0] < 3:
        raise InsufficientDataError(f"need at least 3 correspondences, got {src.shape[0]}")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    sc = src - mu_s
    dc = dst - mu_d
    sv = np.linalg.svd(sc, compute_uv=False)
    scale = max(sv[0], np.abs(src).max(), 1.0)
    if sv[1] <= 1e-10 * scale:
        raise DegenerateGeometryError("correspondences are collinear or coincident")
    H = sc.T @ dc
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ D @ U.T
    return RigidTransform(R, mu_d - R @ mu_s)


def umeyama_align_yaw(source, target, fix_z: bool = False) -> RigidTransform:
    """Least-squares transform restricted to a rotation about z plus a translation.

    ``fix_z`` also pins the vertical translation to zero.
    """
    src = np.asarray(source.points if isinstance(source, PointCloud) else source, dtype=np.float64)
    dst = np.asarray(target.points if isinstance(target, PointCloud) else target, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise InvalidInputError("source and target must be equally sized (n, 3) arrays")
    if src.shape[0] < 3:
        raise InsufficientDataError(f"need at least 3 correspondences, got {src.shape[0]}")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    sc = src[:, :2] - mu_s[:2]
    dc = dst[:, :2] - mu_d[:2]
    scale = max(np.abs(src).max(), 1.0)
    if np.linalg.norm(sc, axis=1).max() <= 1e-10 * scale:
        raise DegenerateGeometryError("correspondences coincide in the horizontal plane")
    # optimal angle of the 2D Procrustes problem
    yaw = np.arctan2(np.sum(sc[:, 0] * dc[:, 1] - sc[:, 1] * dc[:, 0]), np.sum(sc * dc))
    c, s_ = np.cos(yaw), np.sin(yaw)
    R = np.array([[c, -s_, 0.0], [s_, c, 0.0], [0.0, 0.0, 1.0]])
    t = mu_d - R @ mu_s
    if fix_z:
        t[2] = 0.0
    return RigidTransform(R, t)


@dataclass(frozen=True)
class ICPConfig:
    max_iterations: int = 50
    convergence_tol: float = 1e-4
    max_correspondence_dist: float = 2.0
    # restrict each step to yaw plus horizontal translation
    planar: bool = False

    def __post_init__(self):
        if self.max_iterations < 1 or self.convergence_tol <= 0 or self.max_correspondence_dist <= 0:
            raise InvalidParameterError("ICP parameters must be positive")


def icp_point_to_point(
    source: PointCloud,
    target: PointCloud,
    max_iterations: int = 50,
    convergence_tol: float = 1e-4,
    max_correspondence_dist: float = 2.0,
    initial: Optional[RigidTransform] = None,
    target_index: Optional[SpatialIndex] = None,
    planar: bool = False,
) -> Tuple[RigidTransform, float]:
    """Align ``source`` onto ``target`` with source-to-target nearest neighbours.

    An iteration is accepted only if it does not increase the correspondence
    RMSE; the first rejected step ends the loop. Returns the cumulative
    transform and the RMSE over correspondences within
    ``max_correspondence_dist`` at that transform. ``planar`` limits every
    step to a yaw rotation and a horizontal translation.
    """
    ICPConfig(max_iterations, convergence_tol, max_correspondence_dist)
    if len(source) == 0 or len(target) == 0:
        raise NoOverlapError("ICP needs two non-empty clouds")
    src = source.points
    index = target_index if target_index is not None else SpatialIndex(target)
    tgt = index.points
    T = initial if initial is not None else RigidTransform.identity()

    def align(a, b):
        return umeyama_align_yaw(a, b, fix_z=True) if planar else umeyama_align(a, b)

    def associate(tf):
        q = tf.apply(src)
        d, i = index.nearest(q, max_distance=max_correspondence_dist)
        ok = np.isfinite(d)
        rmse = float(np.sqrt(np.mean(d[ok] ** 2))) if ok.any() else np.inf
        return q, d, i, ok, rmse

    q, d, idx, ok, rmse = associate(T)
    if not ok.any():
        raise NoOverlapError(
            f"no correspondences within {max_correspondence_dist} m at the initial alignment"
        )
    for _ in range(max_iterations):
        if ok.sum() < 3:
            break
        try:
            step = align(q[ok], tgt[idx[ok]])
        except DegenerateGeometryError:
            break
        T_new = step @ T
        q_n, d_n, idx_n, ok_n, rmse_n = associate(T_new)
        if rmse_n > rmse:
            break
        T, q, d, idx, ok, rmse = T_new, q_n, d_n, idx_n, ok_n, rmse_n
        if np.linalg.norm(step.translation) < convergence_tol:
            break
    return T, rmse
