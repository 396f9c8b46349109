"""Turn verified segment matches into a global pose update.

The update is ``W_u = W_p @ inv(W_ICP)``: ``W_p`` is the translation-only
centroid prior (mean matched-centroid offset) and ``W_ICP`` a small
refinement from aligning the prior-shifted local inlier segments with the
target inlier segments. The corrected pose is ``W_t = W_u @ W_e``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import InvalidInputError, InvalidParameterError, NoOverlapError
from .geometry import ICPConfig, PointCloud, RigidTransform, icp_point_to_point
from .matching import MatchCandidate, candidate_matches, consistency_filter, ransac_verify
from .segmentation import SegmentationConfig, SegmentDatabase, segment_cloud

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LocalMap:
    """Last ``k`` scans (sensor frame) with their world poses; immutable snapshot."""

    entries: Tuple[Tuple[PointCloud, RigidTransform], ...] = ()
    k: int = 10
    _cloud: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        if self.k < 1:
            raise InvalidParameterError("local map size k must be >= 1")

    def __len__(self):
        return len(self.entries)

    @property
    def cloud(self) -> PointCloud:
        """Densified cloud: every stored scan moved into the world frame, oldest first."""
        if not self._cloud:
            if not self.entries:
                self._cloud.append(PointCloud.empty())
            else:
                pts = np.concatenate([pose.apply(scan.points) for scan, pose in self.entries])
                self._cloud.append(PointCloud(pts))
        return self._cloud[0]

    def corrected(self, update: RigidTransform) -> "LocalMap":
        """Same scans with every pose left-multiplied by ``update``."""
        return LocalMap(tuple((s, update @ p) for s, p in self.entries), self.k)


def densify_local_map(local: LocalMap, scan: PointCloud, pose: RigidTransform, k: Optional[int] = None) -> LocalMap:
    k = local.k if k is None else int(k)
    if k < 1:
        raise InvalidParameterError("local map size k must be >= 1")
    entries = (local.entries + ((scan, pose),))[-k:]
    return LocalMap(entries, k)


@dataclass(frozen=True)
class PoseUpdate:
    W_p: RigidTransform
    W_ICP: RigidTransform
    W_u: RigidTransform
    residual_rmse: float
    inlier_count: int
    icp_applied: bool = True


def prior_transform(inliers, planar: bool = False) -> RigidTransform:
    """Translation-only prior: mean of the inlier centroid offsets.

    ``planar`` drops the vertical component.
    """
    inliers = list(inliers)
    if not inliers:
        raise InvalidInputError("prior transform needs at least one inlier")
    off = np.array([c.offset if isinstance(c, MatchCandidate) else c for c in inliers], dtype=np.float64)
    t = off.sum(axis=0) / off.shape[0]
    if planar:
        t[2] = 0.0
    return RigidTransform(np.eye(3), t)


def refine_with_icp(local_cloud: PointCloud, target_inlier_cloud: PointCloud, W_p: RigidTransform,
                    icp_config: ICPConfig = ICPConfig()) -> Tuple[RigidTransform, float]:
    """Refinement ``W_ICP`` and the final ICP RMSE.

    ICP aligns ``W_p``-shifted local points (source) onto the target points,
    giving ``T``. ``W_ICP`` is expressed so that ``W_p @ inv(W_ICP) = T @ W_p``.
    Raises ``NoOverlapError`` when the clouds do not overlap.
    """
    if len(target_inlier_cloud) == 0 or len(local_cloud) == 0:
        raise NoOverlapError("ICP refinement needs non-empty local and target clouds")
    src = PointCloud(W_p.apply(local_cloud.points))
    T, rmse = icp_point_to_point(src, target_inlier_cloud, icp_config.max_iterations,
                                 icp_config.convergence_tol, icp_config.max_correspondence_dist,
                                 planar=icp_config.planar)
    return W_p.inverse() @ T.inverse() @ W_p, rmse


def compose_update(W_e: RigidTransform, W_p: RigidTransform, W_ICP: RigidTransform
                   ) -> Tuple[RigidTransform, RigidTransform]:
    """``W_u = W_p @ inv(W_ICP)`` and ``W_t = W_u @ W_e``."""
    W_u = W_p @ W_ICP.inverse()
    return W_u, W_u @ W_e


@dataclass(frozen=True)
class RelocalizationConfig:
    segmentation: SegmentationConfig = SegmentationConfig()
    gate_radius_m: float = 30.0
    k_nn: int = 3
    max_descriptor_dist: float = 0.25
    max_offset_diff_m: float = 2.0
    min_cluster_size: int = 3
    ransac_inlier_tol_m: float = 0.7
    ransac_max_iterations: int = 300
    rng_seed: int = 0
    icp: ICPConfig = ICPConfig(planar=True)
    # RANSAC hypotheses keep roll and pitch fixed
    ransac_yaw_only: bool = True
    # the applied correction leaves height, roll and pitch to odometry
    planar_correction: bool = True
    # corrections rotating more than this need an inlier beyond min_cluster_size
    max_correction_rotation_deg: float = 2.0

    def __post_init__(self):
        if not (self.gate_radius_m > 0 and self.max_offset_diff_m > 0 and self.ransac_inlier_tol_m > 0):
            raise InvalidParameterError("radii and tolerances must be positive")
        if not self.max_correction_rotation_deg > 0:
            raise InvalidParameterError("max_correction_rotation_deg must be positive")
        if self.k_nn < 1 or self.min_cluster_size < 2 or self.ransac_max_iterations < 1:
            raise InvalidParameterError("k_nn >= 1, min_cluster_size >= 2, ransac_max_iterations >= 1")


@dataclass(frozen=True)
class LocalizationAttempt:
    """Outcome of one attempt; ``update`` is ``None`` for no-localization."""

    candidates: int
    filtered_out: int
    accepted: int
    update: Optional[PoseUpdate]
    timings: Dict[str, float]
    inliers: tuple = ()

    @property
    def success(self) -> bool:
        return self.update is not None


def localize(local: LocalMap, db: SegmentDatabase, W_e: RigidTransform,
             config: RelocalizationConfig = RelocalizationConfig()) -> LocalizationAttempt:
    if len(local) == 0:
        raise InvalidInputError("local map is empty")
    timings = {}
    t0 = time.perf_counter()
    segs = segment_cloud(local.cloud, config.segmentation) if len(local.cloud) else []
    t1 = time.perf_counter()
    timings["segmentation"] = t1 - t0
    cands = candidate_matches(segs, db, W_e, config.gate_radius_m, config.k_nn, config.max_descriptor_dist)
    t2 = time.perf_counter()
    timings["matching"] = t2 - t1
    consistent = consistency_filter(cands, config.max_offset_diff_m)
    verified = ransac_verify(consistent, segs, db, config.min_cluster_size, config.ransac_inlier_tol_m,
                             config.ransac_max_iterations, config.rng_seed, config.ransac_yaw_only)
    t3 = time.perf_counter()
    timings["verification"] = t3 - t2
    if verified is None:
        timings["icp"] = 0.0
        return LocalizationAttempt(len(cands), len(cands), 0, None, timings)

    W_p = prior_transform(verified.inliers, config.planar_correction)
    local_by_id = {s.id: s for s in segs}
    local_ids = sorted({c.local_segment_id for c in verified.inliers})
    target_ids = sorted({c.target_segment_id for c in verified.inliers})
    local_pts = PointCloud(np.concatenate([local_by_id[i].points for i in local_ids]))
    target_pts = PointCloud(np.concatenate([db.get(i).points for i in target_ids]))
    try:
        W_ICP, rmse = refine_with_icp(local_pts, target_pts, W_p, config.icp)
        applied = True
    except NoOverlapError as exc:
        log.info("ICP refinement rejected (%s); using the centroid prior alone", exc)
        W_ICP, rmse, applied = RigidTransform.identity(), float("nan"), False
    timings["icp"] = time.perf_counter() - t3
    W_u, _ = compose_update(W_e, W_p, W_ICP)
    angle = float(np.degrees(W_u.angle()))
    if angle > config.max_correction_rotation_deg and verified.accepted <= config.min_cluster_size:
        log.info("correction rotates %.2f deg with only %d inliers; rejected", angle, verified.accepted)
        return LocalizationAttempt(len(cands), len(cands) - verified.accepted, verified.accepted, None,
                                   timings, verified.inliers)
    update = PoseUpdate(W_p, W_ICP, W_u, rmse, verified.accepted, applied)
    return LocalizationAttempt(len(cands), len(cands) - verified.accepted, verified.accepted, update,
                               timings, verified.inliers)
