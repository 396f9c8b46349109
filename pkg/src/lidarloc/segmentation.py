"""Euclidean segmentation, eigenvalue shape descriptors and the segment database."""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import kernels
from .errors import (
    DegenerateSegmentError,
    EmptyMapError,
    InvalidInputError,
    InvalidParameterError,
    ParseError,
)
from .geometry import PointCloud, SpatialIndex, VoxelGridSpec, voxel_downsample

log = logging.getLogger(__name__)

DESCRIPTOR_NAMES = (
    "linearity",
    "planarity",
    "scattering",
    "omnivariance",
    "anisotropy",
    "eigenentropy",
    "curvature_change",
)
DESCRIPTOR_SIZE = len(DESCRIPTOR_NAMES)


@dataclass(frozen=True)
class SegmentationConfig:
    voxel_leaf_m: float = 0.1
    cluster_radius_m: float = 0.2
    min_segment_size: int = 50
    max_segment_size: int = 15000
    # points below this height (map frame) are treated as ground and dropped;
    # None keeps everything
    min_height_m: Optional[float] = None

    def __post_init__(self):
        if not (self.voxel_leaf_m > 0 and self.cluster_radius_m > 0):
            raise InvalidParameterError("voxel leaf and cluster radius must be positive")
        if self.min_segment_size < 1 or self.max_segment_size < self.min_segment_size:
            raise InvalidParameterError("need 1 <= min_segment_size <= max_segment_size")

    def echo(self) -> Dict[str, str]:
        return {
            "voxel_leaf_m": repr(float(self.voxel_leaf_m)),
            "cluster_radius_m": repr(float(self.cluster_radius_m)),
            "min_segment_size": str(int(self.min_segment_size)),
            "max_segment_size": str(int(self.max_segment_size)),
            "min_height_m": "none" if self.min_height_m is None else repr(float(self.min_height_m)),
        }


@dataclass(frozen=True, eq=False)
class Segment:
    id: int
    points: np.ndarray
    centroid: np.ndarray
    descriptor: np.ndarray

    def __len__(self):
        return self.points.shape[0]

    @classmethod
    def from_points(cls, seg_id: int, points) -> "Segment":
        pts = np.array(points, dtype=np.float64, copy=True)
        pts.setflags(write=False)
        c = pts.mean(axis=0)
        c.setflags(write=False)
        d = describe_eigen(pts)
        d.setflags(write=False)
        return cls(int(seg_id), pts, c, d)


def _eigenvalues(pts):
    centred = pts - pts.mean(axis=0)
    cov = centred.T @ centred / pts.shape[0]
    ev = np.linalg.eigvalsh(cov)[::-1]
    return np.clip(ev, 0.0, None)


def features_from_eigenvalues(ev) -> np.ndarray:
    """Seven shape features from eigenvalues sorted descending."""
    ev = np.clip(np.asarray(ev, dtype=np.float64), 0.0, None)
    total = ev.sum()
    if not ev[0] > 0:
        raise DegenerateSegmentError("covariance has no spread (largest eigenvalue is 0)")
    e1, e2, e3 = ev / total
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(ev > 0, np.log(ev / total), 0.0)
    return np.array([
        (e1 - e2) / e1,
        (e2 - e3) / e1,
        e3 / e1,
        np.cbrt(e1 * e2 * e3),
        (e1 - e3) / e1,
        -float(np.sum((ev / total) * logs)),
        e3 / (e1 + e2 + e3),
    ])


def describe_eigen(points) -> np.ndarray:
    """7-vector of eigenvalue shape features of a point set."""
    pts = np.asarray(points.points if isinstance(points, PointCloud) else points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 3:
        raise InvalidInputError("need at least 3 points of shape (n, 3)")
    return features_from_eigenvalues(_eigenvalues(pts))


def segment_cloud(cloud: PointCloud, config: SegmentationConfig = SegmentationConfig()) -> List[Segment]:
    """Voxelize, cluster by single linkage and describe clusters of qualifying size.

    Segment ids count up from 0 in order of each cluster's first voxel.
    """
    if len(cloud) == 0:
        raise InvalidInputError("cannot segment an empty cloud")
    pts = cloud.points
    if config.min_height_m is not None:
        pts = pts[pts[:, 2] >= config.min_height_m]
    if pts.shape[0] == 0:
        return []
    vox = voxel_downsample(PointCloud(pts), VoxelGridSpec(config.voxel_leaf_m)).points
    pairs = SpatialIndex(vox).pairs(config.cluster_radius_m)
    labels = kernels.connected_components(vox.shape[0], pairs)
    roots, counts = np.unique(labels, return_counts=True)
    keep = roots[(counts >= config.min_segment_size) & (counts <= config.max_segment_size)]
    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], keep)
    segments = []
    for root, start in zip(keep, bounds):
        members = order[start:start + counts[np.searchsorted(roots, root)]]
        try:
            segments.append(Segment.from_points(len(segments), vox[members]))
        except DegenerateSegmentError:
            log.warning("skipping degenerate cluster of %d points", members.size)
    return segments


class SegmentDatabase:
    """Immutable segment collection with a centroid index and descriptor matrix."""

    def __init__(self, segments: Sequence[Segment], config_echo: Optional[Dict[str, str]] = None):
        self.segments = tuple(segments)
        ids = [s.id for s in self.segments]
        if len(set(ids)) != len(ids):
            raise InvalidInputError("segment ids must be unique")
        self.config_echo = dict(config_echo or {})
        self.centroids = np.array([s.centroid for s in self.segments]).reshape(-1, 3)
        self.descriptors = np.array([s.descriptor for s in self.segments]).reshape(-1, DESCRIPTOR_SIZE)
        self.centroids.setflags(write=False)
        self.descriptors.setflags(write=False)
        self._index = SpatialIndex(self.centroids) if self.segments else None
        self._by_id = {s.id: i for i, s in enumerate(self.segments)}

    def __len__(self):
        return len(self.segments)

    def __iter__(self):
        return iter(self.segments)

    def get(self, seg_id: int) -> Segment:
        return self.segments[self._by_id[seg_id]]

    def query_by_location(self, center, radius: float) -> List[Segment]:
        """Segments whose centroid lies within ``radius`` of ``center``, in storage order."""
        if not radius > 0:
            raise InvalidParameterError("radius must be positive")
        if self._index is None:
            return []
        c = np.asarray(center, dtype=np.float64).reshape(3)
        # widen the tree query slightly, then filter with the exact distance
        idx = self._index.radius(c, radius * (1 + 1e-9) + 1e-12)
        if idx.size:
            idx = idx[np.linalg.norm(self.centroids[idx] - c, axis=1) <= radius]
        return [self.segments[i] for i in idx]

    # ------------------------------------------------------------------
    # binary container, little-endian:
    #   magic b"LLSEGDB\0", u32 version, u32 echo byte length, echo (utf-8
    #   "key=value\n" lines), u64 segment count, then per segment
    #   i64 id, 3 x f64 centroid, 7 x f64 descriptor, u64 n, n x 3 x f32 points

    MAGIC = b"LLSEGDB\0"
    VERSION = 1

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        echo = "".join(f"{k}={v}\n" for k, v in sorted(self.config_echo.items())).encode("utf-8")
        buf.write(self.MAGIC)
        buf.write(struct.pack("<II", self.VERSION, len(echo)))
        buf.write(echo)
        buf.write(struct.pack("<Q", len(self.segments)))
        for s in self.segments:
            buf.write(struct.pack("<q", s.id))
            buf.write(np.asarray(s.centroid, dtype="<f8").tobytes())
            buf.write(np.asarray(s.descriptor, dtype="<f8").tobytes())
            buf.write(struct.pack("<Q", len(s)))
            buf.write(np.asarray(s.points, dtype="<f4").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "SegmentDatabase":
        view = memoryview(data)
        pos = 0

        def take(n, what):
            nonlocal pos
            if pos + n > len(view):
                raise ParseError(f"truncated segment database at byte {pos} while reading {what}")
            out = view[pos:pos + n]
            pos += n
            return out

        if bytes(take(len(cls.MAGIC), "magic")) != cls.MAGIC:
            raise ParseError("not a segment database (bad magic at byte 0)")
        version, echo_len = struct.unpack("<II", take(8, "header"))
        if version != cls.VERSION:
            raise ParseError(f"unsupported segment database version {version}")
        echo = {}
        for line in bytes(take(echo_len, "config echo")).decode("utf-8").splitlines():
            k, _, v = line.partition("=")
            echo[k] = v
        (count,) = struct.unpack("<Q", take(8, "segment count"))
        segments = []
        for _ in range(count):
            (seg_id,) = struct.unpack("<q", take(8, "segment id"))
            c = np.frombuffer(take(24, "centroid"), dtype="<f8").astype(np.float64)
            d = np.frombuffer(take(8 * DESCRIPTOR_SIZE, "descriptor"), dtype="<f8").astype(np.float64)
            (n,) = struct.unpack("<Q", take(8, "point count"))
            p = np.frombuffer(take(12 * n, "points"), dtype="<f4").astype(np.float64).reshape(n, 3)
            for a in (c, d, p):
                a.setflags(write=False)
            segments.append(Segment(int(seg_id), p, c, d))
        if pos != len(view):
            raise ParseError(f"trailing data after segment {count} at byte {pos}")
        return cls(segments, echo)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "SegmentDatabase":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def build_segment_db(target_map: PointCloud, config: SegmentationConfig = SegmentationConfig()) -> SegmentDatabase:
    if len(target_map) == 0:
        raise EmptyMapError("target map is empty")
    segments = segment_cloud(target_map, config)
    if not segments:
        raise EmptyMapError("no qualifying segments in the target map")
    return SegmentDatabase(segments, config.echo())


def query_by_location(db: SegmentDatabase, center, radius: float) -> List[Segment]:
    return db.query_by_location(center, radius)
