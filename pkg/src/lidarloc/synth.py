"""Synthetic worlds and a ray-cast spinning lidar.

Used to produce desk-scale drives with exact ground truth: a ground-removed
target map from a separate mapping pass, a scan sequence (with ground) along
a gently curving route, and the matching ground-truth trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .errors import InvalidParameterError
from .geometry import PointCloud, RigidTransform, VoxelGridSpec, voxel_downsample
from .trajectory import TrajectoryNode

ARCHETYPES = ("box", "cylinder", "plane")


def rot_z(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Box:
    """Solid box standing on z = ``z0``; ``size`` is (length, width, height)."""

    center_xy: Tuple[float, float]
    size: Tuple[float, float, float]
    yaw: float = 0.0
    z0: float = 0.0
    kind: str = "box"

    @property
    def center(self):
        return np.array([self.center_xy[0], self.center_xy[1], self.z0 + self.size[2] / 2])

    @property
    def radius_xy(self):
        return 0.5 * float(np.hypot(self.size[0], self.size[1]))

    def _local(self, origin, dirs):
        Rt = rot_z(-self.yaw)
        o = Rt @ (np.asarray(origin) - np.array([self.center_xy[0], self.center_xy[1], 0.0]))
        return o, dirs @ Rt.T

    def intersect(self, origin, dirs):
        o, d = self._local(origin, dirs)
        lo = np.array([-self.size[0] / 2, -self.size[1] / 2, self.z0])
        hi = np.array([self.size[0] / 2, self.size[1] / 2, self.z0 + self.size[2]])
        tmin, tmax = _slab(o, d, lo, hi)
        hit = (tmax >= tmin) & (tmin > 1e-9)
        return np.where(hit, tmin, np.inf)

    def surface_distance(self, pts):
        Rt = rot_z(-self.yaw)
        p = (np.asarray(pts) - np.array([self.center_xy[0], self.center_xy[1], self.z0 + self.size[2] / 2])) @ Rt.T
        half = np.array(self.size) / 2
        q = np.abs(p) - half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(np.max(q, axis=1), 0.0)
        return np.abs(outside + inside)

    def sample_surface(self, spacing):
        lx, ly, h = self.size
        faces = []
        for axis, extent in ((0, lx), (1, ly), (2, h)):
            others = [a for a in range(3) if a != axis]
            dims = np.array([lx, ly, h])
            ua = np.arange(spacing / 2, dims[others[0]], spacing) - dims[others[0]] / 2
            ub = np.arange(spacing / 2, dims[others[1]], spacing) - dims[others[1]] / 2
            A, B = np.meshgrid(ua, ub, indexing="ij")
            for sign in (-1.0, 1.0):
                f = np.zeros((A.size, 3))
                f[:, others[0]] = A.ravel()
                f[:, others[1]] = B.ravel()
                f[:, axis] = sign * extent / 2
                faces.append(f)
        local = np.concatenate(faces)
        return local @ rot_z(self.yaw).T + self.center


@dataclass(frozen=True)
class Ground:
    """Horizontal plane ``z = height`` seen from above."""

    height: float = 0.0
    kind: str = "ground"
    center_xy: Tuple[float, float] = (0.0, 0.0)
    radius_xy: float = float("inf")

    def intersect(self, origin, dirs):
        dz = dirs[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.height - origin[2]) / dz
        return np.where((dz < 0) & (t > 1e-9), t, np.inf)


@dataclass(frozen=True)
class Cylinder:
    """Vertical solid cylinder standing on z = ``z0``."""

    center_xy: Tuple[float, float]
    radius: float
    height: float
    z0: float = 0.0
    kind: str = "cylinder"

    @property
    def center(self):
        return np.array([self.center_xy[0], self.center_xy[1], self.z0 + self.height / 2])

    @property
    def radius_xy(self):
        return float(self.radius)

    def intersect(self, origin, dirs):
        o = np.asarray(origin, dtype=np.float64) - np.array([self.center_xy[0], self.center_xy[1], 0.0])
        dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
        a = dx * dx + dy * dy
        b = 2.0 * (o[0] * dx + o[1] * dy)
        c = o[0] ** 2 + o[1] ** 2 - self.radius**2
        disc = b * b - 4 * a * c
        with np.errstate(invalid="ignore", divide="ignore"):
            t_side = (-b - np.sqrt(disc)) / (2 * a)
        z = o[2] + t_side * dz
        ok = (disc >= 0) & (a > 1e-15) & (t_side > 1e-9) & (z >= self.z0) & (z <= self.z0 + self.height)
        t = np.where(ok, t_side, np.inf)
        for zc in (self.z0, self.z0 + self.height):
            with np.errstate(invalid="ignore", divide="ignore"):
                tc = (zc - o[2]) / dz
                px = o[0] + tc * dx
                py = o[1] + tc * dy
            okc = (np.abs(dz) > 1e-15) & (tc > 1e-9) & (px * px + py * py <= self.radius**2)
            t = np.where(okc & (tc < t), tc, t)
        return t

    def surface_distance(self, pts):
        p = np.asarray(pts) - self.center
        rho = np.hypot(p[:, 0], p[:, 1]) - self.radius
        dz = np.abs(p[:, 2]) - self.height / 2
        outside = np.hypot(np.maximum(rho, 0), np.maximum(dz, 0))
        inside = np.minimum(np.maximum(rho, dz), 0.0)
        return np.abs(outside + inside)

    def sample_surface(self, spacing):
        n_around = max(8, int(np.ceil(2 * np.pi * self.radius / spacing)))
        ang = np.arange(n_around) * 2 * np.pi / n_around
        zs = np.arange(spacing / 2, self.height, spacing)
        A, Z = np.meshgrid(ang, zs, indexing="ij")
        side = np.column_stack([self.radius * np.cos(A.ravel()), self.radius * np.sin(A.ravel()),
                                Z.ravel() - self.height / 2])
        caps = []
        for r in np.arange(spacing / 2, self.radius, spacing):
            m = max(6, int(np.ceil(2 * np.pi * r / spacing)))
            a = np.arange(m) * 2 * np.pi / m
            for zc in (-self.height / 2, self.height / 2):
                caps.append(np.column_stack([r * np.cos(a), r * np.sin(a), np.full(m, zc)]))
        local = np.concatenate([side] + caps)
        return local + self.center


@dataclass(frozen=True)
class Room:
    """Interior of an axis-aligned box; rays hit its inside faces.

    With ``closed=False`` floor and ceiling are pushed far away, leaving four
    walls only.
    """

    center: Tuple[float, float, float]
    size: Tuple[float, float, float]
    closed: bool = True
    kind: str = "room"

    @property
    def radius_xy(self):
        return 0.5 * float(np.hypot(self.size[0], self.size[1]))

    @property
    def center_xy(self):
        return self.center[:2]

    def intersect(self, origin, dirs):
        half = np.array(self.size, dtype=np.float64) / 2
        if not self.closed:
            half[2] = 1e6
        o = np.asarray(origin, dtype=np.float64) - np.asarray(self.center)
        _, tmax = _slab(o, dirs, -half, half)
        return np.where(tmax > 1e-9, tmax, np.inf)


def _slab(o, d, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv
    t1 = np.nan_to_num(t1, nan=-np.inf)
    t2 = np.nan_to_num(t2, nan=np.inf)
    tmin = np.max(np.minimum(t1, t2), axis=1)
    tmax = np.min(np.maximum(t1, t2), axis=1)
    return tmin, tmax


@dataclass(frozen=True)
class LidarModel:
    """Spinning multi-beam lidar with uniformly spaced beams."""

    rings: int = 48
    elevation_min_deg: float = -17.5
    elevation_max_deg: float = 6.0
    azimuth_step_deg: float = 0.5
    azimuth_offset_deg: float = 0.0
    min_range: float = 1.0
    max_range: float = 30.0

    def elevations(self):
        return np.radians(np.linspace(self.elevation_min_deg, self.elevation_max_deg, self.rings))

    def directions(self):
        """Unit beam directions, ring-major then azimuth order, plus ring ids."""
        el = self.elevations()
        n_az = int(round(360.0 / self.azimuth_step_deg))
        az = np.radians(-180.0 + self.azimuth_offset_deg + np.arange(n_az) * self.azimuth_step_deg)
        E, A = np.meshgrid(el, az, indexing="ij")
        d = np.column_stack([np.cos(E.ravel()) * np.cos(A.ravel()),
                             np.cos(E.ravel()) * np.sin(A.ravel()),
                             np.sin(E.ravel())])
        ring = np.repeat(np.arange(self.rings), n_az)
        return d, ring

    def scan(self, pose: RigidTransform, objects) -> PointCloud:
        """Cast all beams from ``pose`` (sensor-to-world); points in the sensor frame."""
        d_local, ring = self.directions()
        d_world = d_local @ pose.rotation.T
        origin = pose.translation
        t = np.full(d_local.shape[0], np.inf)
        for obj in objects:
            dist = np.hypot(*(np.asarray(obj.center_xy) - origin[:2]))
            if dist - obj.radius_xy > self.max_range:
                continue
            t = np.minimum(t, obj.intersect(origin, d_world))
        keep = (t >= self.min_range) & (t <= self.max_range)
        pts = d_local[keep] * t[keep, None]
        return PointCloud(pts, ring=ring[keep], intensity=np.zeros(int(keep.sum())))


def assign_rings(points, rings, elevation_min_deg, elevation_max_deg) -> np.ndarray:
    """Recover scan-line indices of a sensor-frame cloud from beam elevation."""
    pts = np.asarray(points, dtype=np.float64)
    el = np.degrees(np.arctan2(pts[:, 2], np.hypot(pts[:, 0], pts[:, 1])))
    step = (elevation_max_deg - elevation_min_deg) / max(rings - 1, 1)
    idx = np.rint((el - elevation_min_deg) / step).astype(np.int64)
    return np.clip(idx, 0, rings - 1)


@dataclass(frozen=True)
class SynthParams:
    object_count: int = 20
    corridor_half_width_m: float = 14.0
    archetypes: Tuple[str, ...] = ARCHETYPES
    sensor_range_m: float = 30.0
    scan_count: int = 100
    step_m: float = 1.0
    drift_bias: float = 0.02
    scan_period_s: float = 0.1
    sensor_height_m: float = 1.8
    route_amplitude_m: float = 2.0
    route_period_m: float = 120.0
    map_lane_offset_m: float = -1.5
    map_step_m: float = 1.0
    ground: bool = True

    def __post_init__(self):
        if self.object_count < 1:
            raise InvalidParameterError("object count must be positive")
        if self.scan_count < 1 or self.step_m <= 0 or self.sensor_range_m <= 0:
            raise InvalidParameterError("scan count, step and sensor range must be positive")
        if self.drift_bias < 0 or self.scan_period_s <= 0 or self.corridor_half_width_m <= 6.0:
            raise InvalidParameterError("invalid synthetic scene parameters")
        bad = [a for a in self.archetypes if a not in ARCHETYPES]
        if bad or not self.archetypes:
            raise InvalidParameterError(f"unknown archetypes {bad}")

    @property
    def route_length_m(self):
        return (self.scan_count - 1) * self.step_m

    @property
    def area_m2(self):
        return (self.route_length_m + 20.0) * 2 * self.corridor_half_width_m


@dataclass
class SyntheticScene:
    params: SynthParams
    lidar: LidarModel
    objects: List
    map_cloud: PointCloud
    scans: List[PointCloud]
    ground_truth: List[TrajectoryNode]
    drifted: List[TrajectoryNode] = field(default_factory=list)


def route_point(s, p: SynthParams, lateral=0.0):
    """Position (x, y) and heading along the route at arc parameter ``s``."""
    w = 2 * np.pi / p.route_period_m
    x = s
    y = p.route_amplitude_m * np.sin(w * s)
    heading = np.arctan(p.route_amplitude_m * w * np.cos(w * s))
    x = x - lateral * np.sin(heading)
    y = y + lateral * np.cos(heading)
    return np.array([x, y]), heading


def route_pose(s, p: SynthParams, lateral=0.0) -> RigidTransform:
    xy, heading = route_point(s, p, lateral)
    return RigidTransform(rot_z(heading), [xy[0], xy[1], p.sensor_height_m])


def place_objects(rng, p: SynthParams, s_range=None) -> List:
    lo, hi = s_range if s_range is not None else (-5.0, p.route_length_m + 5.0)
    kinds = [p.archetypes[i % len(p.archetypes)] for i in range(p.object_count)]
    rng.shuffle(kinds)
    # spread objects evenly along the route with jitter, alternating sides
    slots = np.linspace(lo, hi, p.object_count)
    objects = []
    for i, kind in enumerate(kinds):
        for _attempt in range(200):
            obj = _random_object(rng, kind, p, slots[i], i)
            if _clear_of(obj, objects):
                objects.append(obj)
                break
        else:
            raise InvalidParameterError("could not place objects without overlap; widen the corridor")
    return objects


def _random_object(rng, kind, p: SynthParams, s_nominal, i):
    s = s_nominal + rng.uniform(-2.0, 2.0)
    side = 1.0 if (i % 2 == 0) else -1.0
    if rng.uniform() < 0.25:
        side = -side
    if kind == "box":
        size = (rng.uniform(1.0, 3.0), rng.uniform(1.0, 3.0), rng.uniform(1.0, 3.5))
        r = 0.5 * np.hypot(size[0], size[1])
    elif kind == "plane":
        size = (rng.uniform(3.0, 6.0), 0.2, rng.uniform(1.5, 3.0))
        r = 0.5 * np.hypot(size[0], size[1])
    else:
        radius = rng.uniform(0.15, 0.6)
        height = rng.uniform(2.0, 5.0)
        r = radius
    lat_min = 4.0 + r
    lat_max = max(lat_min + 0.5, p.corridor_half_width_m - r)
    lateral = side * rng.uniform(lat_min, lat_max)
    xy, heading = route_point(s, p, lateral)
    if kind == "cylinder":
        return Cylinder((float(xy[0]), float(xy[1])), float(radius), float(height))
    yaw = heading + (rng.uniform(-0.35, 0.35) if kind == "plane" else rng.uniform(-np.pi, np.pi))
    return Box((float(xy[0]), float(xy[1])), tuple(float(v) for v in size), float(yaw), kind=kind)


def _clear_of(obj, others, gap=1.5):
    for o in others:
        d = np.hypot(obj.center_xy[0] - o.center_xy[0], obj.center_xy[1] - o.center_xy[1])
        if d < obj.radius_xy + o.radius_xy + gap:
            return False
    return True


def synth_scene(seed: int, params: SynthParams = SynthParams(), lidar: LidarModel = None) -> SyntheticScene:
    """Deterministic town, mapping-pass target map, scans and ground truth."""
    rng = np.random.default_rng(seed)
    if lidar is None:
        lidar = LidarModel(max_range=params.sensor_range_m)
    objects = place_objects(rng, params)

    map_lidar = LidarModel(
        rings=lidar.rings,
        elevation_min_deg=lidar.elevation_min_deg,
        elevation_max_deg=lidar.elevation_max_deg,
        azimuth_step_deg=lidar.azimuth_step_deg,
        azimuth_offset_deg=lidar.azimuth_step_deg / 2,
        min_range=lidar.min_range,
        max_range=lidar.max_range,
    )
    map_parts = []
    for s in np.arange(-15.0, params.route_length_m + 15.0 + 1e-9, params.map_step_m):
        pose = route_pose(s, params, params.map_lane_offset_m)
        sc = map_lidar.scan(pose, objects)
        map_parts.append(pose.apply(sc.points))
    map_cloud = voxel_downsample(PointCloud(np.concatenate(map_parts)), VoxelGridSpec(0.05))

    world = objects + [Ground()] if params.ground else objects
    scans, gt, drifted = [], [], []
    p0 = None
    for i in range(params.scan_count):
        pose = route_pose(i * params.step_m, params)
        t = round(i * params.scan_period_s, 6)
        scans.append(lidar.scan(pose, world))
        gt.append(TrajectoryNode(t, pose))
        if p0 is None:
            p0 = pose.translation
        dpos = p0 + (1.0 + params.drift_bias) * (pose.translation - p0)
        drifted.append(TrajectoryNode(t, RigidTransform(pose.rotation, dpos)))
    return SyntheticScene(params, lidar, objects, map_cloud, scans, gt, drifted)


def object_surface_cloud(objects: Sequence, spacing=0.05) -> PointCloud:
    """Complete surface sampling (all faces) of a set of objects."""
    return PointCloud(np.concatenate([o.sample_surface(spacing) for o in objects]))
