"""Scan-to-scan lidar odometry with a low-rate scan-to-map refinement.

Feature points are picked per scan line by local-surface smoothness (sharp
edges and flat patches), matched against the previous scan's features
(point-to-line, point-to-plane) and the motion is solved by damped
Gauss-Newton. Every ``map_every`` scans the pose is refined against an
accumulated, 5 cm voxelized map using a ten times denser feature budget.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Tuple

import numpy as np

from . import kernels
from .errors import (
    InvalidInputError,
    InvalidParameterError,
    InvalidStateError,
    NoOverlapError,
    OutOfWindowError,
    UnderConstrainedError,
)
from .geometry import (
    PointCloud,
    RigidTransform,
    SpatialIndex,
    VoxelGridSpec,
    icp_point_to_point,
    so3_exp,
    transform_cloud,
    voxel_downsample,
)

log = logging.getLogger(__name__)

STATUS_BOOTSTRAP = "bootstrap"
STATUS_OK = "ok"
STATUS_DEGRADED = "degraded"


@dataclass(frozen=True)
class OdometryConfig:
    half_window: int = 5
    edge_threshold: float = 0.01
    planar_threshold: float = 0.002
    regions: int = 4
    edge_quota: int = 2
    planar_quota: int = 4
    edge_target_quota: int = 20
    gap_m: float = 1.0
    parallel_ratio: float = 0.02
    max_iterations: int = 25
    map_max_iterations: int = 10
    update_tol: float = 1e-6
    reassociate_every: int = 5
    max_corr_dist_m: float = 1.0
    robust_min_scale_m: float = 0.001
    robust_start_scale_m: float = 0.1
    # update directions whose weighted information is below this stay at the guess
    degeneracy_min_eig: float = 5.0
    edge_weight: float = 1.0
    map_every: int = 10
    map_voxel_m: float = 0.05
    map_feature_multiplier: int = 10
    map_radius_m: float = 200.0
    range_scale_bias: float = 0.0
    seed_icp_voxel_m: float = 0.2
    seed_icp_max_dist_m: float = 2.0
    seed_ground_clearance_m: float = 0.3

    def __post_init__(self):
        ints = ("half_window", "regions", "edge_quota", "planar_quota", "edge_target_quota",
                "max_iterations", "map_max_iterations", "reassociate_every", "map_every",
                "map_feature_multiplier")
        for name in ints:
            if int(getattr(self, name)) < 1:
                raise InvalidParameterError(f"{name} must be >= 1")
        pos = ("edge_threshold", "planar_threshold", "gap_m", "parallel_ratio", "update_tol",
               "max_corr_dist_m", "robust_min_scale_m", "robust_start_scale_m", "map_voxel_m", "map_radius_m",
               "seed_icp_voxel_m", "seed_icp_max_dist_m", "seed_ground_clearance_m")
        for name in pos:
            if not getattr(self, name) > 0:
                raise InvalidParameterError(f"{name} must be positive")
        if self.planar_threshold >= self.edge_threshold:
            raise InvalidParameterError("planar threshold must be below the edge threshold")
        if self.edge_weight < 0 or self.range_scale_bias <= -1.0 or self.degeneracy_min_eig < 0:
            raise InvalidParameterError("edge_weight and degeneracy_min_eig must be >= 0, range_scale_bias > -1")

    def dense(self) -> "OdometryConfig":
        """Feature budget used by the mapping pass."""
        m = self.map_feature_multiplier
        return replace(self, edge_quota=self.edge_quota * m, planar_quota=self.planar_quota * m)


@dataclass(frozen=True)
class FeatureSet:
    """Selected features of one scan (sensor frame) plus denser match targets.

    ``edge_points``/``planar_points`` are the quota-limited sharp and flat
    picks. ``edge_targets`` (sharp, larger quota) and ``planar_targets``
    (every non-sharp point) are what the next scan is matched against.
    """

    edge_points: PointCloud
    planar_points: PointCloud
    edge_c: np.ndarray
    planar_c: np.ndarray
    edge_targets: PointCloud
    edge_target_c: np.ndarray
    planar_targets: PointCloud
    planar_target_c: np.ndarray

    @classmethod
    def empty(cls):
        e = PointCloud(np.empty((0, 3)), ring=np.empty(0, dtype=np.int64))
        z = np.empty(0)
        return cls(e, e, z, z, e, z, e, z)

    def __len__(self):
        return len(self.edge_points) + len(self.planar_points)


def compute_smoothness(scan_line, i: int, half_window: int = 5) -> float:
    """Smoothness ``c`` of point ``i`` on an ordered scan line.

    c = |sum_{j in S, j != i} (X_i - X_j)| / (|S| |X_i|), S the ``2*half_window``
    neighbours of ``i``.
    """
    pts = np.asarray(scan_line.points if isinstance(scan_line, PointCloud) else scan_line,
                     dtype=np.float64)
    if half_window < 1:
        raise InvalidParameterError("half_window must be >= 1")
    n = pts.shape[0]
    if i < half_window or i > n - 1 - half_window:
        raise OutOfWindowError(
            f"index {i} needs {half_window} neighbours on each side of a {n}-point line")
    xi = pts[i]
    nbrs = np.concatenate([pts[i - half_window:i], pts[i + 1:i + half_window + 1]])
    s = (xi - nbrs).sum(axis=0)
    return float(np.linalg.norm(s) / (2 * half_window * np.linalg.norm(xi)))


def _azimuth_order(pts):
    return np.argsort(np.arctan2(pts[:, 1], pts[:, 0]), kind="stable")


def _fit_line(pts):
    mu = pts.mean(axis=0)
    _, _, vt = np.linalg.svd(pts - mu)
    return mu, vt[0]


def _refine_corner(P, i, h, min_angle_deg=20.0):
    """Sub-sample corner position: closest point of lines fit on either side of ``i``.

    Corner samples are quantized to the beam grid; intersecting the two
    adjacent surface traces removes that offset. Returns ``P[i]`` when the
    traces are near parallel or the intersection is implausibly far away.
    """
    a0, da = _fit_line(P[i - h:i])
    b0, db = _fit_line(P[i + 1:i + h + 1])
    cosang = abs(float(da @ db))
    if cosang > np.cos(np.radians(min_angle_deg)):
        return P[i]
    w = a0 - b0
    b = float(da @ db)
    d, e = float(da @ w), float(db @ w)
    den = 1.0 - b * b
    s = (b * e - d) / den
    t = (e - b * d) / den
    x = 0.5 * ((a0 + s * da) + (b0 + t * db))
    spacing = 0.5 * (np.linalg.norm(P[i] - P[i - 1]) + np.linalg.norm(P[i + 1] - P[i]))
    if np.linalg.norm(x - P[i]) > 1.5 * spacing:
        return P[i]
    return x


def extract_features(scan: PointCloud, config: OdometryConfig = OdometryConfig()) -> FeatureSet:
    if len(scan) == 0:
        return FeatureSet.empty()
    if scan.ring is None:
        raise InvalidInputError("feature extraction needs per-point scan-line indices")
    h = config.half_window
    pts_all = scan.points
    sel = {"edge": [], "planar": [], "edge_t": [], "planar_t": []}
    corners = {"edge": {}, "edge_t": {}}
    for r in np.unique(scan.ring):
        ring_idx = np.flatnonzero(scan.ring == r)
        ring_idx = ring_idx[_azimuth_order(pts_all[ring_idx])]
        n = ring_idx.size
        if n < 2 * h + 1:
            continue
        # start the ring at its widest gap so no surface straddles the seam
        P = pts_all[ring_idx]
        wrap_steps = np.linalg.norm(np.roll(P, -1, axis=0) - P, axis=1)
        ring_idx = np.roll(ring_idx, -((int(np.argmax(wrap_steps)) + 1) % n))
        P = pts_all[ring_idx]
        rng_ = np.linalg.norm(P, axis=1)
        step = np.linalg.norm(np.diff(P, axis=0), axis=1)
        # run boundaries: depth jumps, missing returns
        breaks = np.flatnonzero(step > config.gap_m) + 1
        starts = np.concatenate([[0], breaks])
        ends = np.concatenate([breaks, [n]])
        c = np.full(n, np.nan)
        run_id = np.empty(n, dtype=np.int64)
        for k, (a, b) in enumerate(zip(starts, ends)):
            run_id[a:b] = k
            if b - a >= 2 * h + 1:
                c[a:b] = kernels.line_smoothness(P[a:b], h)
        # beams grazing a surface: neighbour spacing large relative to range
        gap_prev = np.concatenate([[np.inf], step])
        gap_next = np.concatenate([step, [np.inf]])
        same_prev = np.concatenate([[False], run_id[1:] == run_id[:-1]])
        same_next = np.concatenate([run_id[:-1] == run_id[1:], [False]])
        spacing = np.maximum(np.where(same_prev, gap_prev, 0.0), np.where(same_next, gap_next, 0.0))
        grazing = spacing > config.parallel_ratio * rng_
        valid = np.isfinite(c) & ~grazing
        vidx = np.flatnonzero(valid)
        if vidx.size == 0:
            continue
        picked = np.zeros(n, dtype=bool)

        def suppress(i):
            lo, hi = max(0, i - h), min(n, i + h + 1)
            same = run_id[lo:hi] == run_id[i]
            picked[lo:hi][same] = True

        for region in np.array_split(vidx, config.regions):
            if region.size == 0:
                continue
            by_desc = region[np.argsort(-c[region], kind="stable")]
            n_edge = n_edge_t = 0
            for i in by_desc:
                if c[i] <= config.edge_threshold:
                    break
                if n_edge_t < config.edge_target_quota:
                    sel["edge_t"].append((ring_idx[i], c[i]))
                    corners["edge_t"][int(ring_idx[i])] = _refine_corner(P, i, h)
                    n_edge_t += 1
                if n_edge < config.edge_quota and not picked[i]:
                    sel["edge"].append((ring_idx[i], c[i]))
                    corners["edge"][int(ring_idx[i])] = _refine_corner(P, i, h)
                    n_edge += 1
                    suppress(i)
            by_asc = region[np.argsort(c[region], kind="stable")]
            n_planar = 0
            for i in by_asc:
                if c[i] >= config.planar_threshold or n_planar >= config.planar_quota:
                    break
                if not picked[i]:
                    sel["planar"].append((ring_idx[i], c[i]))
                    n_planar += 1
                    suppress(i)
        flat = vidx[c[vidx] <= config.edge_threshold]
        sel["planar_t"].extend(zip(ring_idx[flat], c[flat]))

    def cloud(key):
        if not sel[key]:
            return PointCloud(np.empty((0, 3)), ring=np.empty(0, dtype=np.int64)), np.empty(0)
        idx = np.array([i for i, _ in sel[key]], dtype=np.int64)
        cc = np.array([v for _, v in sel[key]], dtype=np.float64)
        sub = scan.select(idx)
        if key in corners:
            pts = np.array([corners[key].get(int(i), pts_all[i]) for i in idx])
            sub = PointCloud(pts, ring=sub.ring, intensity=sub.intensity)
        return sub, cc

    e, ec = cloud("edge")
    p, pc = cloud("planar")
    et, etc = cloud("edge_t")
    pt, ptc = cloud("planar_t")
    return FeatureSet(e, p, ec, pc, et, etc, pt, ptc)


# --------------------------------------------------------------------------
# damped Gauss-Newton over point-to-plane style rows


@dataclass
class _Rows:
    """Linear constraints ``normal . (U p - anchor) = 0`` on a pose ``U``.

    ``group`` ties the two rows of a point-to-line constraint together so they
    share one robust weight; ``weight`` is a fixed per-row prior.
    """

    src: np.ndarray
    normal: np.ndarray
    anchor: np.ndarray
    group: np.ndarray
    weight: np.ndarray

    def __len__(self):
        return self.src.shape[0]

    @staticmethod
    def concat(parts):
        parts = [p for p in parts if p is not None and len(p)]
        if not parts:
            z = np.empty((0, 3))
            return _Rows(z, z, z, np.empty(0, dtype=np.int64), np.empty(0))
        offs = 0
        groups = []
        for p in parts:
            groups.append(p.group + offs)
            offs += (p.group.max() + 1) if len(p) else 0
        return _Rows(
            np.concatenate([p.src for p in parts]),
            np.concatenate([p.normal for p in parts]),
            np.concatenate([p.anchor for p in parts]),
            np.concatenate(groups),
            np.concatenate([p.weight for p in parts]),
        )

    @property
    def n_constraints(self):
        return 0 if len(self) == 0 else int(np.unique(self.group).size)


def _line_rows(src, a, b, weight):
    """Two orthogonal plane rows per point encoding distance to line a-b."""
    d = b - a
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    helper = np.where(np.abs(d[:, [0]]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    n1 = np.cross(d, helper)
    n1 /= np.linalg.norm(n1, axis=1, keepdims=True)
    n2 = np.cross(d, n1)
    m = src.shape[0]
    g = np.arange(m)
    return _Rows(
        np.concatenate([src, src]),
        np.concatenate([n1, n2]),
        np.concatenate([a, a]),
        np.concatenate([g, g]),
        np.full(2 * m, weight),
    )


def _plane_rows(src, normal, anchor, weight=1.0):
    m = src.shape[0]
    return _Rows(src, normal, anchor, np.arange(m), np.full(m, weight))


def _residuals(U: RigidTransform, rows: _Rows):
    q = U.apply(rows.src)
    r = np.einsum("ij,ij->i", rows.normal, q - rows.anchor)
    return q, r


def _robust_weights(rows: _Rows, r, min_scale):
    """Tukey biweight on per-constraint distance with a MAD scale."""
    ng = int(rows.group.max()) + 1
    dist = np.sqrt(np.bincount(rows.group, weights=r * r, minlength=ng))
    used = np.bincount(rows.group, minlength=ng) > 0
    med = np.median(dist[used])
    scale = max(min_scale, 1.4826 * np.median(np.abs(dist[used] - med)) + med)
    cut = 4.685 * scale
    u = dist / cut
    w = np.where(u < 1.0, (1.0 - u * u) ** 2, 0.0)
    return w[rows.group] * rows.weight


def _cost(r, w):
    return float(np.sum(w * r * r))


def _gauss_newton(U0: RigidTransform, associate: Callable[[RigidTransform], _Rows],
                  max_iterations: int, tol: float, reassociate_every: int, min_scale: float,
                  start_scale: float, min_eig: float = 0.0, min_constraints: int = 6
                  ) -> Tuple[RigidTransform, int]:
    """Damped Gauss-Newton with iteratively reweighted rows.

    The robust scale floor starts at ``start_scale`` and halves every
    iteration down to ``min_scale``, so sparse but informative constraints
    are not rejected before the bulk has converged. Update components along
    eigenvectors of the weighted normal matrix with eigenvalue below
    ``min_eig`` are dropped, leaving those directions at the initial guess.
    """
    U = U0
    rows = associate(U)
    if rows.n_constraints < min_constraints:
        raise UnderConstrainedError(
            f"only {rows.n_constraints} valid correspondences (need {min_constraints})")
    lam = 1e-6
    fresh = True
    since = 0
    for it in range(max_iterations):
        q, r = _residuals(U, rows)
        floor = max(min_scale, start_scale * 0.5**it)
        w = _robust_weights(rows, r, floor)
        if not np.any(w > 0):
            break
        J = np.hstack([np.cross(q, rows.normal), rows.normal])
        JW = J * w[:, None]
        H = JW.T @ J
        g = JW.T @ r
        cost0 = _cost(r, w)
        scale = np.trace(H) / 6.0 + 1e-12
        ev, V = np.linalg.eigh(H)
        keep = ev >= min_eig
        if not keep.any():
            break
        accepted = False
        for _ in range(8):
            delta = -np.linalg.solve(H + lam * scale * np.eye(6), g)
            if not keep.all():
                delta = V[:, keep] @ (V[:, keep].T @ delta)
            U_try = RigidTransform(so3_exp(delta[:3]), np.zeros(3)) @ U
            U_try = RigidTransform(U_try.rotation, U_try.translation + delta[3:])
            _, r_try = _residuals(U_try, rows)
            if _cost(r_try, w) <= cost0 + 1e-15:
                accepted = True
                lam = max(lam / 10.0, 1e-9)
                break
            lam *= 10.0
        step = float(np.linalg.norm(delta))
        if accepted:
            U = U_try
        since += 1
        small = step < tol or not accepted
        if small and fresh and floor <= min_scale:
            return U, it + 1
        if small or since >= reassociate_every:
            new_rows = associate(U)
            if new_rows.n_constraints >= min_constraints:
                rows = new_rows
            since = 0
            fresh = True
        else:
            fresh = False
    return U, max_iterations


# --------------------------------------------------------------------------
# scan-to-scan


def _edge_rows(prev: FeatureSet, curr_pts, curr_ring, U, config, index=None):
    tgt = prev.edge_targets
    if len(tgt) < 2 or curr_pts.shape[0] == 0:
        return None
    index = index or SpatialIndex(tgt)
    q = U.apply(curr_pts)
    k = min(10, len(tgt))
    d, nn = index.knn(q, k=k, max_distance=config.max_corr_dist_m)
    ok_j = np.isfinite(d[:, 0])
    nn_c = np.minimum(nn, len(tgt) - 1)
    rings = tgt.ring[nn_c]
    rj = rings[:, [0]]
    cand = np.isfinite(d) & (rings != rj) & (np.abs(rings - rj) <= 3)
    cand[:, 0] = False
    has_l = cand.any(axis=1)
    l_col = np.argmax(cand, axis=1)
    j = nn_c[:, 0]
    l = nn_c[np.arange(len(l_col)), l_col]
    ok = ok_j & has_l
    # smoothness re-check: both line points must themselves be sharp
    ok &= (prev.edge_target_c[j] > config.edge_threshold) & (prev.edge_target_c[l] > config.edge_threshold)
    a, b = tgt.points[j], tgt.points[l]
    ok &= np.linalg.norm(b - a, axis=1) > 1e-3
    if not ok.any():
        return None
    return _line_rows(curr_pts[ok], a[ok], b[ok], config.edge_weight)


def _planar_rows(prev: FeatureSet, curr_pts, U, config, index=None):
    tgt = prev.planar_targets
    if len(tgt) < 3 or curr_pts.shape[0] == 0:
        return None
    index = index or SpatialIndex(tgt)
    q = U.apply(curr_pts)
    k = min(30, len(tgt))
    d, nn = index.knn(q, k=k, max_distance=config.max_corr_dist_m)
    fin = np.isfinite(d)
    nn_c = np.minimum(nn, len(tgt) - 1)
    rings = tgt.ring[nn_c]
    rj = rings[:, [0]]
    same = fin & (rings == rj)
    same[:, 0] = False
    other = fin & (rings != rj) & (np.abs(rings - rj) <= 3)
    ok = fin[:, 0] & same.any(axis=1) & other.any(axis=1)
    rows_i = np.arange(q.shape[0])
    j = nn_c[:, 0]
    l = nn_c[rows_i, np.argmax(same, axis=1)]
    m = nn_c[rows_i, np.argmax(other, axis=1)]
    pc = prev.planar_target_c
    ok &= (pc[j] < config.planar_threshold) & (pc[l] < config.planar_threshold) & (pc[m] < config.planar_threshold)
    pj, pl, pm = tgt.points[j], tgt.points[l], tgt.points[m]
    nrm = np.cross(pl - pj, pm - pj)
    nn_len = np.linalg.norm(nrm, axis=1)
    span = np.maximum(np.linalg.norm(pl - pj, axis=1), np.linalg.norm(pm - pj, axis=1))
    ok &= nn_len > 1e-3 * span**2
    if not ok.any():
        return None
    nrm = nrm[ok] / nn_len[ok, None]
    return _plane_rows(curr_pts[ok], nrm, pj[ok])


def estimate_motion(prev: FeatureSet, curr: FeatureSet, initial_guess: Optional[RigidTransform] = None,
                    config: OdometryConfig = OdometryConfig()) -> RigidTransform:
    """Rigid motion ``T`` with ``curr ~= T . prev`` in sensor coordinates.

    ``T`` maps previous-frame coordinates into the current frame, so the
    sensor's ego-motion is ``T.inverse()``. Raises ``UnderConstrainedError``
    with fewer than 6 valid correspondences.
    """
    if len(prev.edge_targets) + len(prev.planar_targets) == 0:
        raise UnderConstrainedError("previous feature set is empty")
    guess = initial_guess if initial_guess is not None else RigidTransform.identity()
    e_idx = SpatialIndex(prev.edge_targets) if len(prev.edge_targets) >= 2 else None
    p_idx = SpatialIndex(prev.planar_targets) if len(prev.planar_targets) >= 3 else None

    def associate(U):
        parts = []
        if e_idx is not None:
            parts.append(_edge_rows(prev, curr.edge_points.points, curr.edge_points.ring, U, config, e_idx))
        if p_idx is not None:
            parts.append(_planar_rows(prev, curr.planar_points.points, U, config, p_idx))
        return _Rows.concat(parts)

    U, _ = _gauss_newton(guess.inverse(), associate, config.max_iterations, config.update_tol,
                         config.reassociate_every, config.robust_min_scale_m,
                         config.robust_start_scale_m, config.degeneracy_min_eig)
    return U.inverse()


# --------------------------------------------------------------------------
# mapping


@dataclass
class OdometryState:
    """Single-owner odometry state.

    ``loam_pose`` lives in the odometry's own map frame. ``correction`` is
    the accumulated relocalization update, so the world pose reported to the
    outside is ``correction @ loam_pose`` while the internal map is never
    rewritten.
    """

    loam_pose: RigidTransform = field(default_factory=RigidTransform.identity)
    correction: RigidTransform = field(default_factory=RigidTransform.identity)
    previous: Optional[FeatureSet] = None
    last_motion: RigidTransform = field(default_factory=RigidTransform.identity)
    map: PointCloud = field(default_factory=PointCloud.empty)
    scan_count: int = 0
    status: str = STATUS_BOOTSTRAP
    config: OdometryConfig = field(default_factory=OdometryConfig)
    _map_index: Optional[SpatialIndex] = field(default=None, repr=False)
    _first_scan: Optional[PointCloud] = field(default=None, repr=False)

    @classmethod
    def start(cls, initial_pose: Optional[RigidTransform] = None, config: OdometryConfig = OdometryConfig()):
        return cls(loam_pose=initial_pose or RigidTransform.identity(), config=config)

    @property
    def current_pose(self) -> RigidTransform:
        return self.correction @ self.loam_pose

    def map_index(self) -> Optional[SpatialIndex]:
        if self._map_index is None and len(self.map):
            self._map_index = SpatialIndex(self.map)
        return self._map_index


def _map_rows(index: SpatialIndex, feats: FeatureSet, P: RigidTransform, config: OdometryConfig):
    parts = []
    mp = index.points
    if len(feats.planar_points):
        src = feats.planar_points.points
        q = P.apply(src)
        d, nn = index.knn(q, k=5, max_distance=config.max_corr_dist_m)
        ok = np.all(np.isfinite(d), axis=1)
        if ok.any():
            nb = mp[nn[ok]]
            mu = nb.mean(axis=1)
            cov = np.einsum("nki,nkj->nij", nb - mu[:, None], nb - mu[:, None]) / 5.0
            evals, evecs = np.linalg.eigh(cov)
            normal = evecs[:, :, 0]
            off = np.abs(np.einsum("nkj,nj->nk", nb - mu[:, None], normal))
            # reject collinear neighbourhoods (a single scan ring): normal undefined
            spread = evals[:, 1] > 0.1 * evals[:, 2]
            flat = (off.max(axis=1) < 0.05) & spread
            parts.append(_plane_rows(src[ok][flat], normal[flat], mu[flat]))
    if len(feats.edge_points):
        src = feats.edge_points.points
        q = P.apply(src)
        d, nn = index.knn(q, k=5, max_distance=config.max_corr_dist_m)
        ok = np.all(np.isfinite(d), axis=1)
        if ok.any():
            nb = mp[nn[ok]]
            mu = nb.mean(axis=1)
            cov = np.einsum("nki,nkj->nij", nb - mu[:, None], nb - mu[:, None]) / 5.0
            evals, evecs = np.linalg.eigh(cov)
            line = evals[:, 2] > 3.0 * evals[:, 1]
            direction = evecs[:, :, 2][line]
            if line.any():
                a = mu[line]
                parts.append(_line_rows(src[ok][line], a - 0.1 * direction, a + 0.1 * direction,
                                        config.edge_weight))
    return _Rows.concat(parts)


def _merge_into_map(state: OdometryState, scan: PointCloud, pose: RigidTransform):
    cfg = state.config
    reg = transform_cloud(PointCloud(scan.points), pose)
    merged = PointCloud.concatenate([state.map, reg]) if len(state.map) else reg
    merged = voxel_downsample(merged, VoxelGridSpec(cfg.map_voxel_m))
    dist = np.linalg.norm(merged.points - pose.translation, axis=1)
    if np.any(dist > cfg.map_radius_m):
        merged = merged.select(dist <= cfg.map_radius_m)
    state.map = merged
    state._map_index = None


def map_refine(state: OdometryState, scan: PointCloud) -> RigidTransform:
    """Refine ``state.loam_pose`` for ``scan`` against the map and merge the scan.

    On the bootstrap call (empty map, first scan) the map is seeded with the
    registered scan and the pose is returned unchanged. Mutates ``state``.
    """
    cfg = state.config
    if len(state.map) == 0:
        if state.scan_count > 1:
            raise InvalidStateError("map is empty after bootstrap")
        _merge_into_map(state, scan, state.loam_pose)
        return state.loam_pose
    feats = extract_features(scan, cfg.dense())
    index = state.map_index()
    try:
        P, _ = _gauss_newton(state.loam_pose, lambda P: _map_rows(index, feats, P, cfg),
                             cfg.map_max_iterations, cfg.update_tol, 1, cfg.robust_min_scale_m,
                             cfg.robust_start_scale_m, cfg.degeneracy_min_eig)
    except UnderConstrainedError as exc:
        log.warning("map refinement skipped: %s", exc)
        P = state.loam_pose
    state.loam_pose = P
    _merge_into_map(state, scan, P)
    return P


def _seed_motion(prev_scan: PointCloud, scan: PointCloud, cfg: OdometryConfig) -> RigidTransform:
    """Coarse motion for the first scan pair, which has no velocity prior.

    Ground returns travel with the sensor and pull point-to-point ICP towards
    zero motion, so the lowest height band of each scan is left out.
    """
    spec = VoxelGridSpec(cfg.seed_icp_voxel_m)

    def above_ground(pts):
        if pts.shape[0] == 0:
            return pts
        floor = np.percentile(pts[:, 2], 1.0)
        return pts[pts[:, 2] > floor + cfg.seed_ground_clearance_m]

    src = voxel_downsample(PointCloud(above_ground(scan.points)), spec)
    tgt = voxel_downsample(PointCloud(above_ground(prev_scan.points)), spec)
    try:
        U, _ = icp_point_to_point(src, tgt, max_correspondence_dist=cfg.seed_icp_max_dist_m)
    except (NoOverlapError, ValueError) as exc:
        log.warning("motion seed failed: %s", exc)
        return RigidTransform.identity()
    return U.inverse()


def advance(state: OdometryState, scan: PointCloud) -> Tuple[OdometryState, RigidTransform]:
    """Process one scan; returns the (mutated) state and the new world pose.

    Under-constrained scans are not an error: the pose is extrapolated with
    the previous motion and ``state.status`` becomes ``"degraded"``.
    """
    cfg = state.config
    if cfg.range_scale_bias:
        scan = PointCloud(scan.points * (1.0 + cfg.range_scale_bias), scan.ring, scan.intensity)
    feats = extract_features(scan, cfg)
    if state.previous is None:
        state.scan_count = 1
        map_refine(state, scan)
        state.previous = feats
        state.status = STATUS_BOOTSTRAP
        state._first_scan = scan
        return state, state.current_pose
    guess = state.last_motion
    if state._first_scan is not None:
        guess = _seed_motion(state._first_scan, scan, cfg)
        state._first_scan = None
    try:
        T = estimate_motion(state.previous, feats, guess, cfg)
        state.status = STATUS_OK
    except UnderConstrainedError as exc:
        log.warning("scan %d: tracking degraded (%s)", state.scan_count, exc)
        T = guess
        state.status = STATUS_DEGRADED
    state.loam_pose = state.loam_pose @ T.inverse()
    state.last_motion = T
    index = state.scan_count
    state.scan_count += 1
    if index % cfg.map_every == 0:
        map_refine(state, scan)
    state.previous = feats
    return state, state.current_pose


def apply_correction(state: OdometryState, update: RigidTransform) -> OdometryState:
    """Left-multiply the reported pose by ``update``; the internal map is untouched."""
    state.correction = update @ state.correction
    return state
