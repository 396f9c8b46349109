"""Descriptor-space match candidates and their geometric verification.

Candidates are gated by centroid distance to the pose estimate, pruned to a
mutually translation-consistent group, then verified by RANSAC over matched
centroids.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from .errors import DegenerateGeometryError, InvalidParameterError
from .geometry import RigidTransform, umeyama_align, umeyama_align_yaw
from .segmentation import Segment, SegmentDatabase


@dataclass(frozen=True)
class MatchCandidate:
    local_segment_id: int
    target_segment_id: int
    descriptor_distance: float
    offset: np.ndarray  # target centroid - local centroid, world frame

    def key(self):
        """Deterministic ordering/tie-break key."""
        return (self.descriptor_distance, self.local_segment_id, self.target_segment_id)

    def __eq__(self, other):
        if not isinstance(other, MatchCandidate):
            return NotImplemented
        return (self.local_segment_id == other.local_segment_id
                and self.target_segment_id == other.target_segment_id
                and self.descriptor_distance == other.descriptor_distance
                and np.array_equal(self.offset, other.offset))

    def __hash__(self):
        return hash((self.local_segment_id, self.target_segment_id, self.descriptor_distance))


@dataclass(frozen=True)
class VerificationResult:
    inliers: tuple
    candidate_transform: RigidTransform
    filtered_out: int
    accepted: int
    residuals: np.ndarray

    @property
    def residual_rmse(self) -> float:
        return float(np.sqrt(np.mean(self.residuals**2))) if self.residuals.size else 0.0


def canonical(candidates: Sequence[MatchCandidate]) -> List[MatchCandidate]:
    return sorted(candidates, key=MatchCandidate.key)


def candidate_matches(local: Sequence[Segment], db: SegmentDatabase, pose_estimate: RigidTransform,
                      gate_radius: float, k_nn: int = 3, max_descriptor_dist: float = 0.25
                      ) -> List[MatchCandidate]:
    """k nearest gated database segments in descriptor space for every local segment.

    Local segments must already be expressed in the world frame.
    """
    if not gate_radius > 0:
        raise InvalidParameterError("gate radius must be positive")
    if k_nn < 1 or max_descriptor_dist < 0:
        raise InvalidParameterError("k_nn must be >= 1 and max_descriptor_dist >= 0")
    pool = db.query_by_location(pose_estimate.translation, gate_radius)
    if not pool or not local:
        return []
    pool_desc = np.array([s.descriptor for s in pool])
    pool_ids = np.array([s.id for s in pool])
    out = []
    for seg in local:
        d = np.linalg.norm(pool_desc - seg.descriptor, axis=1)
        order = np.lexsort((pool_ids, d))[:k_nn]
        for j in order:
            if d[j] <= max_descriptor_dist:
                tgt = pool[j]
                out.append(MatchCandidate(seg.id, tgt.id, float(d[j]), tgt.centroid - seg.centroid))
    return out


def _consistency_matrix(cands: Sequence[MatchCandidate], max_offset_diff: float) -> np.ndarray:
    off = np.array([c.offset for c in cands]).reshape(-1, 3)
    diff = np.linalg.norm(off[:, None, :] - off[None, :, :], axis=2)
    return diff <= max_offset_diff


def consistency_filter(candidates: Sequence[MatchCandidate], max_offset_diff: float) -> List[MatchCandidate]:
    """Largest group of candidates whose offsets pairwise differ by at most ``max_offset_diff``.

    Greedy clique growth started from every candidate (highest consistency
    degree first); each step adds the member with most partners inside the
    remaining pool. Ties break on (descriptor distance, local id, target id),
    and the result is returned in that canonical order.
    """
    if not max_offset_diff > 0:
        raise InvalidParameterError("max_offset_diff must be positive")
    cands = canonical(candidates)
    n = len(cands)
    if n <= 1:
        return cands
    A = _consistency_matrix(cands, max_offset_diff)
    degree = A.sum(axis=1)
    seeds = sorted(range(n), key=lambda i: (-degree[i], i))
    best: List[int] = []
    for s in seeds:
        if degree[s] <= len(best):
            break
        clique = [s]
        pool = np.flatnonzero(A[s])
        pool = pool[pool != s]
        while pool.size:
            inner = A[np.ix_(pool, pool)].sum(axis=1)
            pick = pool[np.lexsort((pool, -inner))[0]]
            clique.append(int(pick))
            pool = pool[(pool != pick) & A[pick, pool]]
        if len(clique) > len(best):
            best = clique
    return [cands[i] for i in sorted(best)]


def _centroid_table(segs: Union[Mapping[int, Segment], Sequence[Segment], SegmentDatabase]) -> Dict[int, np.ndarray]:
    if isinstance(segs, Mapping):
        return {k: v.centroid for k, v in segs.items()}
    return {s.id: s.centroid for s in segs}


def ransac_verify(candidates: Sequence[MatchCandidate], local_segs, target_segs, min_cluster_size: int = 3,
                  inlier_tol: float = 0.7, max_iterations: int = 300, rng_seed: int = 0,
                  yaw_only: bool = False) -> Optional[VerificationResult]:
    """RANSAC over matched centroid pairs; ``None`` means no localization.

    Minimal samples are 3 pairs over distinct segments fit with Umeyama.
    When every 3-subset fits in the iteration budget they are enumerated
    instead of sampled. Inliers are one-to-one between local and target
    segments. The best model is refit on its inliers, and inliers are
    re-evaluated under the returned transform. ``yaw_only`` restricts
    models to yaw plus translation.
    """
    if min_cluster_size < 2:
        raise InvalidParameterError("min_cluster_size must be >= 2")
    if not inlier_tol > 0 or max_iterations < 1:
        raise InvalidParameterError("inlier_tol and max_iterations must be positive")
    cands = canonical(candidates)
    n = len(cands)
    if n < 3:
        return None
    align = umeyama_align_yaw if yaw_only else umeyama_align
    lc = _centroid_table(local_segs)
    tc = _centroid_table(target_segs)
    src = np.array([lc[c.local_segment_id] for c in cands])
    dst = np.array([tc[c.target_segment_id] for c in cands])

    lid = np.array([c.local_segment_id for c in cands])
    tid = np.array([c.target_segment_id for c in cands])

    def score(T):
        # inliers are one-to-one: a segment on either side backs at most one
        # inlier, the one with the smallest residual
        res = np.linalg.norm(T.apply(src) - dst, axis=1)
        mask = np.zeros(n, dtype=bool)
        used_l, used_t = set(), set()
        for i in np.lexsort((np.arange(n), res)):
            if res[i] > inlier_tol:
                break
            if lid[i] not in used_l and tid[i] not in used_t:
                mask[i] = True
                used_l.add(lid[i])
                used_t.add(tid[i])
        return mask, res

    if math.comb(n, 3) <= max_iterations:
        samples = itertools.combinations(range(n), 3)
    else:
        rng = np.random.default_rng(rng_seed)
        samples = (tuple(rng.choice(n, size=3, replace=False)) for _ in range(max_iterations))

    best_T, best_mask, best_cost = None, None, np.inf
    for sample in samples:
        idx = list(sample)
        if len(set(lid[idx])) < 3 or len(set(tid[idx])) < 3:
            continue
        try:
            T = align(src[idx], dst[idx])
        except DegenerateGeometryError:
            continue
        mask, res = score(T)
        count = int(mask.sum())
        cost = float(np.sum(res[mask]))
        if best_mask is None or count > best_mask.sum() or (count == best_mask.sum() and cost < best_cost):
            best_T, best_mask, best_cost = T, mask, cost
    if best_T is None or best_mask.sum() < min_cluster_size:
        return None
    T, mask = best_T, best_mask
    try:
        refit = align(src[mask], dst[mask])
        rmask, _ = score(refit)
        if rmask.sum() >= mask.sum():
            T, mask = refit, rmask
    except DegenerateGeometryError:
        pass
    if mask.sum() < min_cluster_size:
        return None
    _, res = score(T)
    inliers = tuple(c for c, m in zip(cands, mask) if m)
    return VerificationResult(inliers, T, n - len(inliers), len(inliers), res[mask])
