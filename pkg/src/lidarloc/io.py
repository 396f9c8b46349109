"""Point cloud file formats: kitti-bin, xyz-csv and ply-ascii."""

from __future__ import annotations

import logging
import os
from typing import Optional

import numpy as np

from .errors import InvalidParameterError, ParseError
from .geometry import PointCloud

log = logging.getLogger(__name__)

FORMATS = ("kitti-bin", "xyz-csv", "ply-ascii")
_EXTENSIONS = {".bin": "kitti-bin", ".csv": "xyz-csv", ".xyz": "xyz-csv", ".ply": "ply-ascii"}
_KITTI_RECORD = 16


def format_from_path(path) -> str:
    ext = os.path.splitext(os.fspath(path))[1].lower()
    if ext not in _EXTENSIONS:
        raise InvalidParameterError(f"cannot infer point cloud format from extension {ext!r}")
    return _EXTENSIONS[ext]


def _finite(points: np.ndarray, intensity: Optional[np.ndarray], path) -> PointCloud:
    ok = np.all(np.isfinite(points), axis=1)
    dropped = int(ok.size - ok.sum())
    if dropped:
        log.warning("%s: dropped %d point(s) with non-finite coordinates", os.fspath(path), dropped)
        points = points[ok]
        intensity = None if intensity is None else intensity[ok]
    return PointCloud(points, intensity=intensity)


def _parse_kitti(data: bytes, path) -> PointCloud:
    if len(data) % _KITTI_RECORD:
        offset = len(data) - len(data) % _KITTI_RECORD
        raise ParseError(f"{os.fspath(path)}: truncated kitti-bin record at byte offset {offset} "
                         f"(file size {len(data)} is not a multiple of {_KITTI_RECORD})")
    rec = np.frombuffer(data, dtype="<f4").reshape(-1, 4).astype(np.float64)
    return _finite(rec[:, :3], rec[:, 3], path)


def _parse_csv(text: str, path) -> PointCloud:
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.split(",")
        if len(parts) != 3:
            raise ParseError(f"{os.fspath(path)}:{lineno}: expected 'x,y,z', got {len(parts)} field(s)")
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise ParseError(f"{os.fspath(path)}:{lineno}: {exc}") from None
    return _finite(np.array(rows, dtype=np.float64).reshape(-1, 3), None, path)


def _parse_ply(text: str, path) -> PointCloud:
    lines = text.splitlines()
    where = os.fspath(path)
    if not lines or lines[0].strip() != "ply":
        raise ParseError(f"{where}:1: missing 'ply' magic")
    count, props, in_vertex, fmt_ok = None, [], False, False
    body = None
    for lineno, line in enumerate(lines[1:], 2):
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if tok[1:2] != ["ascii"]:
                raise ParseError(f"{where}:{lineno}: only 'format ascii 1.0' is supported")
            fmt_ok = True
        elif tok[0] == "element":
            if len(tok) != 3:
                raise ParseError(f"{where}:{lineno}: malformed element line")
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                try:
                    count = int(tok[2])
                except ValueError:
                    raise ParseError(f"{where}:{lineno}: bad vertex count {tok[2]!r}") from None
            elif count is None:
                raise ParseError(f"{where}:{lineno}: vertex element must come first")
        elif tok[0] == "property":
            if in_vertex:
                if len(tok) != 3:
                    raise ParseError(f"{where}:{lineno}: unsupported vertex property {line.strip()!r}")
                props.append(tok[2])
        elif tok[0] == "end_header":
            body = lineno
            break
        else:
            raise ParseError(f"{where}:{lineno}: unexpected header line {line.strip()!r}")
    if body is None:
        raise ParseError(f"{where}: missing end_header")
    if not fmt_ok or count is None:
        raise ParseError(f"{where}: header lacks a format or vertex element")
    try:
        cols = [props.index(a) for a in ("x", "y", "z")]
    except ValueError:
        raise ParseError(f"{where}: vertex element lacks x, y or z") from None
    pts = np.empty((count, 3), dtype=np.float64)
    for i in range(count):
        lineno = body + 1 + i
        if lineno > len(lines):
            raise ParseError(f"{where}:{lineno}: expected {count} vertices, file ends after {i}")
        tok = lines[lineno - 1].split()
        if len(tok) < len(props):
            raise ParseError(f"{where}:{lineno}: expected {len(props)} values, got {len(tok)}")
        try:
            pts[i] = [float(tok[c]) for c in cols]
        except ValueError as exc:
            raise ParseError(f"{where}:{lineno}: {exc}") from None
    return _finite(pts, None, path)


def parse_scan_file(path, format: Optional[str] = None) -> PointCloud:
    """Read a cloud; ``format`` defaults to the one implied by the extension."""
    fmt = format_from_path(path) if format is None else format
    if fmt not in FORMATS:
        raise InvalidParameterError(f"unknown point cloud format {fmt!r}")
    with open(path, "rb") as fh:
        data = fh.read()
    if fmt == "kitti-bin":
        return _parse_kitti(data, path)
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError as exc:
        raise ParseError(f"{os.fspath(path)}: non-ascii byte at offset {exc.start}") from None
    return _parse_csv(text, path) if fmt == "xyz-csv" else _parse_ply(text, path)


def write_kitti_bin(cloud: PointCloud, path) -> None:
    rec = np.zeros((len(cloud), 4), dtype="<f4")
    rec[:, :3] = cloud.points
    if cloud.intensity is not None:
        rec[:, 3] = cloud.intensity
    with open(path, "wb") as fh:
        fh.write(rec.tobytes())


def write_xyz_csv(cloud: PointCloud, path) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.writelines(f"{x!r},{y!r},{z!r}\n" for x, y, z in cloud.points.tolist())


def write_ply_ascii(cloud: PointCloud, path) -> None:
    header = ("ply\nformat ascii 1.0\n"
              f"element vertex {len(cloud)}\n"
              "property float x\nproperty float y\nproperty float z\nend_header\n")
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(header)
        fh.writelines(f"{x:.6f} {y:.6f} {z:.6f}\n" for x, y, z in cloud.points.tolist())
