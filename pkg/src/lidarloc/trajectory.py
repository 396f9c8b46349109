"""Trajectory nodes, the trajectory text format and absolute-error evaluation."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence

import numpy as np

from .errors import AlignmentError, InvalidInputError, ParseError
from .geometry import ORTHO_TOL, RigidTransform

ODOMETRY = "odometry"
CORRECTED = "corrected"


@dataclass(frozen=True)
class TrajectoryNode:
    timestamp: float
    pose: RigidTransform
    source: str = ODOMETRY

    def __post_init__(self):
        if self.source not in (ODOMETRY, CORRECTED):
            raise InvalidInputError(f"unknown node source {self.source!r}")


def check_trajectory(nodes: Sequence[TrajectoryNode], rotation_tol=1e-6):
    prev = -np.inf
    for n in nodes:
        if not n.timestamp > prev:
            raise InvalidInputError(f"timestamps must be strictly increasing (at {n.timestamp})")
        prev = n.timestamp
        R = n.pose.rotation
        if np.max(np.abs(R @ R.T - np.eye(3))) > rotation_tol:
            raise InvalidInputError(f"non-orthonormal rotation at t={n.timestamp}")


def _num(x: float) -> str:
    # shortest repr that round-trips; normalize -0.0
    return f"{float(x) + 0.0:.17g}"


def format_node(node: TrajectoryNode) -> str:
    q = node.pose.as_quaternion()
    t = node.pose.translation
    fields = [f"{node.timestamp:.6f}"] + [_num(v) for v in t] + [_num(v) for v in q]
    return " ".join(fields)


def write_trajectory(nodes: Iterable[TrajectoryNode], path) -> None:
    """Write ``timestamp tx ty tz qx qy qz qw`` lines (scalar-last quaternion)."""
    nodes = list(nodes)
    check_trajectory(nodes)
    text = "".join(format_node(n) + "\n" for n in nodes)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(text)


def read_trajectory(path) -> List[TrajectoryNode]:
    nodes = []
    with open(path, encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) != 8:
                raise ParseError(f"{os.fspath(path)}:{lineno}: expected 8 fields, got {len(parts)}")
            try:
                vals = [float(p) for p in parts]
            except ValueError as exc:
                raise ParseError(f"{os.fspath(path)}:{lineno}: {exc}") from None
            pose = RigidTransform.from_quaternion(vals[4:8], vals[1:4])
            nodes.append(TrajectoryNode(vals[0], pose))
    return nodes


@dataclass(frozen=True)
class AbsErrorSummary:
    timestamps: np.ndarray
    errors: np.ndarray
    mean: float
    max: float
    rmse: float
    hist_edges: np.ndarray
    hist_counts: np.ndarray


def eval_abs_error(trajectory: Sequence[TrajectoryNode], ground_truth: Sequence[TrajectoryNode],
                   bin_width=0.5) -> AbsErrorSummary:
    """Per-node 3D Euclidean position error against exactly matching timestamps."""
    gt: Dict[float, RigidTransform] = {n.timestamp: n.pose for n in ground_truth}
    ts, errs = [], []
    for n in trajectory:
        ref = gt.get(n.timestamp)
        if ref is None:
            raise AlignmentError(f"timestamp {n.timestamp:.6f} missing from ground truth")
        ts.append(n.timestamp)
        errs.append(float(np.linalg.norm(n.pose.translation - ref.translation)))
    errors = np.asarray(errs, dtype=np.float64)
    top = errors.max() if errors.size else 0.0
    nbins = max(1, int(np.floor(top / bin_width)) + 1)
    edges = np.arange(nbins + 1) * bin_width
    counts, _ = np.histogram(errors, bins=edges)
    return AbsErrorSummary(
        timestamps=np.asarray(ts),
        errors=errors,
        mean=float(errors.mean()) if errors.size else 0.0,
        max=float(top),
        rmse=float(np.sqrt(np.mean(errors**2))) if errors.size else 0.0,
        hist_edges=edges,
        hist_counts=counts,
    )


def write_error_csv(summary: AbsErrorSummary, path) -> None:
    lines = ["timestamp,error_m"]
    lines += [f"{t:.6f},{e:.9f}" for t, e in zip(summary.timestamps, summary.errors)]
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def orthonormal_ok(pose: RigidTransform, tol=ORTHO_TOL) -> bool:
    R = pose.rotation
    return bool(np.max(np.abs(R @ R.T - np.eye(3))) <= tol)
