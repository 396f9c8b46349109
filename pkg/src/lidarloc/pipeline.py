"""End-to-end loop: odometry, local map, periodic relocalization and reporting."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

from .config import RunConfig
from .errors import EmptyMapError, InvalidInputError, LidarLocError
from .geometry import PointCloud
from .io import parse_scan_file
from .odometry import OdometryState, advance, apply_correction
from .relocalization import LocalMap, densify_local_map, localize
from .segmentation import SegmentDatabase
from .synth import assign_rings
from .trajectory import CORRECTED, ODOMETRY, TrajectoryNode

log = logging.getLogger(__name__)

REPORT_HEADER = "scan,candidates,filtered_out,accepted,success,residual_m"


@dataclass(frozen=True)
class MatchRow:
    scan: int
    candidates: int
    filtered_out: int
    accepted: int
    success: bool
    residual_m: Optional[float]

    def csv(self) -> str:
        res = "" if self.residual_m is None or not math.isfinite(self.residual_m) else f"{self.residual_m:.6f}"
        return f"{self.scan},{self.candidates},{self.filtered_out},{self.accepted},{int(self.success)},{res}"


@dataclass
class MatchReport:
    rows: List[MatchRow] = field(default_factory=list)
    config_echo: List[str] = field(default_factory=list)

    def totals(self) -> Tuple[int, int, int, int]:
        """Column sums of candidates, filtered_out, accepted and success."""
        return (sum(r.candidates for r in self.rows), sum(r.filtered_out for r in self.rows),
                sum(r.accepted for r in self.rows), sum(int(r.success) for r in self.rows))

    def to_csv(self) -> str:
        lines = [f"# {line}" for line in self.config_echo]
        lines.append(REPORT_HEADER)
        lines += [r.csv() for r in self.rows]
        c, f, a, s = self.totals()
        lines.append(f"total,{c},{f},{a},{s},")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            fh.write(self.to_csv())


def read_match_report(path) -> MatchReport:
    """Parse a report written by ``MatchReport.write`` (totals are recomputed, not read)."""
    echo, rows, seen_header = [], [], False
    with open(path, encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.rstrip("\n")
            if s.startswith("# "):
                echo.append(s[2:])
                continue
            if s == REPORT_HEADER:
                seen_header = True
                continue
            if not seen_header:
                raise InvalidInputError(f"{os.fspath(path)}:{lineno}: expected the report header")
            parts = s.split(",")
            if parts[0] == "total":
                continue
            try:
                res = float(parts[5]) if parts[5] else None
                rows.append(MatchRow(int(parts[0]), int(parts[1]), int(parts[2]), int(parts[3]),
                                     bool(int(parts[4])), res))
            except (ValueError, IndexError):
                raise InvalidInputError(f"{os.fspath(path)}:{lineno}: malformed report row") from None
    return MatchReport(rows, echo)


def read_timestamps(path) -> List[float]:
    with open(path, encoding="ascii") as fh:
        return [float(s) for s in (line.strip() for line in fh) if s]


def _load_scan(item, index: int, config: RunConfig) -> PointCloud:
    if isinstance(item, PointCloud):
        cloud = item
    else:
        try:
            cloud = parse_scan_file(item)
        except (OSError, LidarLocError) as exc:
            raise InvalidInputError(f"scan {index} ({os.fspath(item)}): {exc}") from exc
    if cloud.ring is None and len(cloud):
        ring = assign_rings(cloud.points, config["sensor_rings"], config["sensor_elevation_min_deg"],
                            config["sensor_elevation_max_deg"])
        cloud = PointCloud(cloud.points, ring=ring, intensity=cloud.intensity)
    return cloud


def run_pipeline(config: RunConfig, scans: Sequence[Union[str, os.PathLike, PointCloud]],
                 db: Union[str, os.PathLike, SegmentDatabase],
                 timestamps: Optional[Sequence[float]] = None) -> Tuple[List[TrajectoryNode], MatchReport]:
    """Process ``scans`` in order; returns the world trajectory and the match report.

    The node at which a correction is applied is flagged ``corrected``; all
    other nodes are flagged ``odometry``.
    """
    if len(scans) < 2:
        raise InvalidInputError("need at least 2 scans")
    if timestamps is None:
        timestamps = [round(i * config["scan_period_s"], 9) for i in range(len(scans))]
    if len(timestamps) != len(scans):
        raise InvalidInputError(f"{len(timestamps)} timestamps for {len(scans)} scans")
    if not isinstance(db, SegmentDatabase):
        db = SegmentDatabase.load(db)
    if len(db) == 0:
        raise EmptyMapError("segment database is empty")
    seg_echo = config.segmentation().echo()
    if config["localization_enabled"] and db.config_echo and db.config_echo != seg_echo:
        log.warning("segment database was built with different segmentation settings: %s vs %s",
                    db.config_echo, seg_echo)

    reloc = config.relocalization()
    every = config["localize_every_n_scans"]
    state = OdometryState.start(config.initial_pose(), config.odometry())
    local = LocalMap(k=config["local_map_scans"])
    nodes: List[TrajectoryNode] = []
    report = MatchReport(config_echo=config.echo())

    for i, item in enumerate(scans):
        cloud = _load_scan(item, i, config)
        state, pose = advance(state, cloud)
        local = densify_local_map(local, cloud, pose)
        source = ODOMETRY
        if config["localization_enabled"] and (i + 1) % every == 0:
            attempt = localize(local, db, pose, reloc)
            log.info("scan %d timings %s", i, " ".join(f"{k}={v * 1e3:.1f}ms" for k, v in attempt.timings.items()))
            residual = None
            if attempt.success:
                upd = attempt.update
                state = apply_correction(state, upd.W_u)
                local = local.corrected(upd.W_u)
                pose = state.current_pose
                source = CORRECTED
                residual = upd.residual_rmse
            report.rows.append(MatchRow(i, attempt.candidates, attempt.filtered_out, attempt.accepted,
                                        attempt.success, residual))
        nodes.append(TrajectoryNode(float(timestamps[i]), pose, source))
    return nodes, report


def corrected_transitions(nodes: Sequence[TrajectoryNode]) -> int:
    """Number of nodes flagged corrected whose predecessor is not."""
    count, prev = 0, ODOMETRY
    for n in nodes:
        count += n.source == CORRECTED and prev != CORRECTED
        prev = n.source
    return count
