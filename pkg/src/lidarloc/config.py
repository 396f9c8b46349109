"""Run configuration: flat ``key = value`` text with unit-suffixed keys.

Lines starting with ``#`` and blank lines are ignored; unknown keys and
out-of-range values are rejected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

from .errors import ConfigError, InvalidParameterError
from .geometry import ICPConfig, RigidTransform
from .odometry import OdometryConfig
from .relocalization import RelocalizationConfig
from .segmentation import SegmentationConfig


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _opt_float(text: str) -> Optional[float]:
    return None if text.strip().lower() in ("none", "") else float(text)


def _pose(text: str) -> Tuple[float, ...]:
    vals = tuple(float(v) for v in text.split())
    if len(vals) != 7:
        raise ValueError("expected 'tx ty tz qx qy qz qw'")
    return vals


def _pos(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _finite(v):
    return math.isfinite(v)


def format_value(val) -> str:
    """Config text for a value; poses become 'tx ty tz qx qy qz qw'."""
    if isinstance(val, RigidTransform):
        val = (*val.translation, *val.as_quaternion())
    if isinstance(val, bool):
        return "true" if val else "false"
    if val is None:
        return "none"
    if isinstance(val, (tuple, list)):
        return " ".join(f"{float(v):.17g}" for v in val)
    if isinstance(val, float):
        return repr(val)
    return str(val)


# key -> (parser, default, check, description)
SCHEMA: Dict[str, Tuple[Callable, object, Callable, str]] = {
    # sensor
    "sensor_rings": (int, 48, _pos, "number of scan lines"),
    "sensor_elevation_min_deg": (float, -17.5, _finite, "lowest beam elevation"),
    "sensor_elevation_max_deg": (float, 6.0, _finite, "highest beam elevation"),
    "scan_period_s": (float, 0.1, _pos, "timestamp step when no times.txt is present"),
    "initial_pose": (_pose, (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0), lambda v: True,
                     "first pose 'tx ty tz qx qy qz qw'"),
    # odometry
    "odom_half_window": (int, 5, _pos, "smoothness half window (points)"),
    "odom_edge_threshold": (float, 0.01, _pos, "smoothness above which a point is sharp"),
    "odom_planar_threshold": (float, 0.002, _pos, "smoothness below which a point is flat"),
    "odom_regions": (int, 4, _pos, "sub-regions per scan line"),
    "odom_edge_quota": (int, 2, _pos, "sharp features per region"),
    "odom_planar_quota": (int, 4, _pos, "flat features per region"),
    "odom_edge_target_quota": (int, 20, _pos, "sharp match targets per region"),
    "odom_gap_m": (float, 1.0, _pos, "neighbour spacing that splits a scan line"),
    "odom_parallel_ratio": (float, 0.02, _pos, "spacing/range ratio marking grazing beams"),
    "odom_max_iterations": (int, 25, _pos, "scan-to-scan solver iterations"),
    "odom_map_max_iterations": (int, 10, _pos, "scan-to-map solver iterations"),
    "odom_update_tol": (float, 1e-6, _pos, "convergence threshold on the update norm"),
    "odom_reassociate_every": (int, 5, _pos, "iterations between correspondence searches"),
    "odom_max_corr_dist_m": (float, 1.0, _pos, "correspondence search radius"),
    "odom_robust_min_scale_m": (float, 0.001, _pos, "robust weight scale floor"),
    "odom_robust_start_scale_m": (float, 0.1, _pos, "initial robust weight scale floor"),
    "odom_degeneracy_min_eig": (float, 5.0, _nonneg, "information floor below which an update direction is held"),
    "odom_edge_weight": (float, 1.0, _nonneg, "weight of point-to-line rows"),
    "odom_map_every_n_scans": (int, 10, _pos, "scan-to-map refinement cadence"),
    "odom_map_voxel_m": (float, 0.05, _pos, "odometry map voxel size"),
    "odom_map_feature_multiplier": (int, 10, _pos, "feature budget factor for mapping"),
    "odom_map_radius_m": (float, 200.0, _pos, "odometry map retention radius"),
    "odom_range_scale_bias": (float, 0.0, lambda v: v > -1.0, "injected fractional range error"),
    "odom_seed_icp_voxel_m": (float, 0.2, _pos, "voxel size for the first-motion seed"),
    "odom_seed_icp_max_dist_m": (float, 2.0, _pos, "correspondence radius for the first-motion seed"),
    "odom_seed_ground_clearance_m": (float, 0.3, _pos, "height band ignored by the first-motion seed"),
    # segmentation
    "seg_voxel_leaf_m": (float, 0.1, _pos, "segmentation voxel size"),
    "seg_cluster_radius_m": (float, 0.2, _pos, "single-linkage radius"),
    "seg_min_segment_size": (int, 50, _pos, "minimum voxels per segment"),
    "seg_max_segment_size": (int, 15000, _pos, "maximum voxels per segment"),
    "seg_min_height_m": (_opt_float, None, lambda v: v is None or math.isfinite(v),
                         "drop points below this height ('none' keeps all)"),
    # matching and verification
    "gate_radius_m": (float, 30.0, _pos, "centroid gate around the pose estimate"),
    "k_nn": (int, 3, _pos, "descriptor neighbours per local segment"),
    "max_descriptor_dist": (float, 0.25, _nonneg, "descriptor distance cut"),
    "max_offset_diff_m": (float, 2.0, _pos, "pairwise offset consistency bound"),
    "min_cluster_size": (int, 3, lambda v: v >= 2, "minimum RANSAC inliers"),
    "ransac_inlier_tol_m": (float, 0.7, _pos, "RANSAC centroid residual bound"),
    "ransac_max_iterations": (int, 300, _pos, "RANSAC hypotheses"),
    "rng_seed": (int, 0, _nonneg, "RANSAC seed"),
    "ransac_yaw_only": (_bool, True, lambda v: True, "RANSAC models keep roll and pitch fixed"),
    # ICP refinement
    "icp_max_iterations": (int, 50, _pos, "ICP iterations"),
    "icp_convergence_tol_m": (float, 1e-4, _pos, "ICP step threshold"),
    "icp_max_correspondence_m": (float, 2.0, _pos, "ICP correspondence radius"),
    "planar_correction": (_bool, True, lambda v: True,
                          "corrections change x, y and yaw only; odometry keeps height, roll and pitch"),
    "max_correction_rotation_deg": (float, 2.0, _pos, "corrections rotating more need an inlier beyond min_cluster_size"),
    # pipeline
    "local_map_scans": (int, 10, _pos, "scans in the densified local map"),
    "localize_every_n_scans": (int, 10, _pos, "localization cadence"),
    "localization_enabled": (_bool, True, lambda v: True, "run relocalization"),
}


@dataclass(frozen=True)
class RunConfig:
    values: Dict[str, object] = field(default_factory=lambda: {k: v[1] for k, v in SCHEMA.items()})
    source_lines: Tuple[str, ...] = ()

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls()

    @classmethod
    def from_text(cls, text: str, origin: str = "<config>") -> "RunConfig":
        values = {k: v[1] for k, v in SCHEMA.items()}
        lines: List[str] = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, val = line.partition("=")
            key, val = key.strip(), val.split("#", 1)[0].strip()
            if not sep or not key:
                raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
            if key not in SCHEMA:
                raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
            parse, _, check, _ = SCHEMA[key]
            try:
                parsed = parse(val)
            except ValueError as exc:
                raise ConfigError(f"{origin}:{lineno}: bad value for {key}: {exc}") from None
            if not check(parsed):
                raise ConfigError(f"{origin}:{lineno}: value out of range for {key}: {val}")
            values[key] = parsed
            lines.append(f"{key} = {val}")
        cfg = cls(values, tuple(lines))
        try:
            cfg.odometry()
            cfg.relocalization()
            cfg.initial_pose()
        except (InvalidParameterError, ValueError) as exc:
            raise ConfigError(f"{origin}: {exc}") from None
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read(), str(path))

    def updated(self, **overrides) -> "RunConfig":
        """Copy with values replaced; values go through the same text parser as a file."""
        lines = [ln for ln in self.source_lines if ln.split("=", 1)[0].strip() not in overrides]
        for key, val in overrides.items():
            lines.append(f"{key} = {format_value(val)}")
        return RunConfig.from_text("\n".join(lines), "<overrides>")

    def echo(self) -> List[str]:
        """Config lines as read, for report headers."""
        return list(self.source_lines)

    def initial_pose(self) -> RigidTransform:
        v = self.values["initial_pose"]
        return RigidTransform.from_quaternion(v[3:7], v[0:3])

    def odometry(self) -> OdometryConfig:
        v = self.values
        return OdometryConfig(
            half_window=v["odom_half_window"],
            edge_threshold=v["odom_edge_threshold"],
            planar_threshold=v["odom_planar_threshold"],
            regions=v["odom_regions"],
            edge_quota=v["odom_edge_quota"],
            planar_quota=v["odom_planar_quota"],
            edge_target_quota=v["odom_edge_target_quota"],
            gap_m=v["odom_gap_m"],
            parallel_ratio=v["odom_parallel_ratio"],
            max_iterations=v["odom_max_iterations"],
            map_max_iterations=v["odom_map_max_iterations"],
            update_tol=v["odom_update_tol"],
            reassociate_every=v["odom_reassociate_every"],
            max_corr_dist_m=v["odom_max_corr_dist_m"],
            robust_min_scale_m=v["odom_robust_min_scale_m"],
            robust_start_scale_m=v["odom_robust_start_scale_m"],
            edge_weight=v["odom_edge_weight"],
            degeneracy_min_eig=v["odom_degeneracy_min_eig"],
            map_every=v["odom_map_every_n_scans"],
            map_voxel_m=v["odom_map_voxel_m"],
            map_feature_multiplier=v["odom_map_feature_multiplier"],
            map_radius_m=v["odom_map_radius_m"],
            range_scale_bias=v["odom_range_scale_bias"],
            seed_icp_voxel_m=v["odom_seed_icp_voxel_m"],
            seed_icp_max_dist_m=v["odom_seed_icp_max_dist_m"],
            seed_ground_clearance_m=v["odom_seed_ground_clearance_m"],
        )

    def segmentation(self) -> SegmentationConfig:
        v = self.values
        return SegmentationConfig(
            voxel_leaf_m=v["seg_voxel_leaf_m"],
            cluster_radius_m=v["seg_cluster_radius_m"],
            min_segment_size=v["seg_min_segment_size"],
            max_segment_size=v["seg_max_segment_size"],
            min_height_m=v["seg_min_height_m"],
        )

    def icp(self) -> ICPConfig:
        v = self.values
        return ICPConfig(v["icp_max_iterations"], v["icp_convergence_tol_m"], v["icp_max_correspondence_m"],
                         v["planar_correction"])

    def relocalization(self) -> RelocalizationConfig:
        v = self.values
        return RelocalizationConfig(
            segmentation=self.segmentation(),
            gate_radius_m=v["gate_radius_m"],
            k_nn=v["k_nn"],
            max_descriptor_dist=v["max_descriptor_dist"],
            max_offset_diff_m=v["max_offset_diff_m"],
            min_cluster_size=v["min_cluster_size"],
            ransac_inlier_tol_m=v["ransac_inlier_tol_m"],
            ransac_max_iterations=v["ransac_max_iterations"],
            rng_seed=v["rng_seed"],
            icp=self.icp(),
            ransac_yaw_only=v["ransac_yaw_only"],
            planar_correction=v["planar_correction"],
            max_correction_rotation_deg=v["max_correction_rotation_deg"],
        )
