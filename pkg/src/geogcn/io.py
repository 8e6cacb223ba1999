"""Reading and writing point clouds as ASCII .xyz and .ply files.

The format is chosen by file extension. XYZ rows carry 3 columns
(positions) or 6 (positions then normals), consistently within a file.
Only ASCII PLY with float vertex properties x y z [nx ny nz] is
supported. All floats are written with %.9g, enough for round trips
within 1e-6 at model scale.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .cloud import PointCloud
from .errors import InvalidArgumentError, ParseError, ValidationError

_FLOAT_FMT = "%.9g"
_PLY_FLOAT_TYPES = {"float", "float32", "double", "float64"}


def read_cloud(path) -> PointCloud:
    """Load a cloud from an .xyz or .ply file (extension decides)."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".xyz":
        return _read_xyz(path)
    if suffix == ".ply":
        return _read_ply(path)
    raise InvalidArgumentError(f"unsupported cloud format '{suffix}' for {path}")


def write_cloud(cloud: PointCloud, path) -> Path:
    """Write a cloud to an .xyz or .ply file; normals go along if present."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".xyz":
        _write_xyz(cloud, path)
    elif suffix == ".ply":
        _write_ply(cloud, path)
    else:
        raise InvalidArgumentError(f"unsupported cloud format '{suffix}' for {path}")
    return path


def _parse_floats(parts: list[str], path: Path, lineno: int) -> list[float]:
    try:
        values = [float(p) for p in parts]
    except ValueError as exc:
        raise ParseError(f"{path}:{lineno}: non-numeric field ({exc})") from None
    if not all(math.isfinite(v) for v in values):
        raise ValidationError(f"{path}:{lineno}: non-finite value")
    return values


def _finish(positions, normals, path: Path) -> PointCloud:
    if not positions:
        raise ParseError(f"{path}: no points found")
    try:
        return PointCloud(
            np.asarray(positions, dtype=np.float64),
            np.asarray(normals, dtype=np.float64) if normals else None,
            name=path.stem)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def _read_lines(path: Path) -> list[str]:
    try:
        with open(path, encoding="ascii") as handle:
            return handle.read().splitlines()
    except OSError as exc:
        raise ParseError(f"{path}: cannot open ({exc})") from None
    except UnicodeDecodeError:
        raise ParseError(f"{path}: not an ASCII file") from None


def _read_xyz(path: Path) -> PointCloud:
    positions: list[list[float]] = []
    normals: list[list[float]] = []
    width = None
    for lineno, raw in enumerate(_read_lines(path), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (3, 6):
            raise ParseError(
                f"{path}:{lineno}: expected 3 or 6 columns, got {len(parts)}")
        if width is None:
            width = len(parts)
        elif len(parts) != width:
            raise ParseError(
                f"{path}:{lineno}: inconsistent column count "
                f"({len(parts)} after {width})")
        values = _parse_floats(parts, path, lineno)
        positions.append(values[:3])
        if width == 6:
            normals.append(values[3:])
    return _finish(positions, normals, path)


def _read_ply(path: Path) -> PointCloud:
    lines = _read_lines(path)
    lineno = 0

    def next_line() -> str:
        nonlocal lineno
        while lineno < len(lines):
            lineno += 1
            stripped = lines[lineno - 1].strip()
            if stripped:
                return stripped
        raise ParseError(f"{path}: unexpected end of file at line {lineno}")

    if next_line() != "ply":
        raise ParseError(f"{path}:1: missing 'ply' magic line")
    vertex_count = None
    properties: list[str] = []
    while True:
        line = next_line()
        fields = line.split()
        if fields[0] == "comment":
            continue
        if fields[0] == "format":
            if fields[1:2] != ["ascii"]:
                raise ParseError(f"{path}:{lineno}: only ASCII PLY is supported")
        elif fields[0] == "element":
            if fields[1] == "vertex":
                try:
                    vertex_count = int(fields[2])
                except (IndexError, ValueError):
                    raise ParseError(
                        f"{path}:{lineno}: bad vertex count in '{line}'") from None
            else:
                raise ParseError(
                    f"{path}:{lineno}: unsupported element '{fields[1]}'")
        elif fields[0] == "property":
            if len(fields) != 3 or fields[1] not in _PLY_FLOAT_TYPES:
                raise ParseError(f"{path}:{lineno}: unsupported property '{line}'")
            properties.append(fields[2])
        elif fields[0] == "end_header":
            break
        else:
            raise ParseError(f"{path}:{lineno}: unrecognized header line '{line}'")
    if vertex_count is None:
        raise ParseError(f"{path}: header declares no vertex element")
    if properties not in (["x", "y", "z"], ["x", "y", "z", "nx", "ny", "nz"]):
        raise ParseError(
            f"{path}: vertex properties must be x y z [nx ny nz], got {properties}")
    width = len(properties)
    positions: list[list[float]] = []
    normals: list[list[float]] = []
    for _ in range(vertex_count):
        parts = next_line().split()
        if len(parts) != width:
            raise ParseError(
                f"{path}:{lineno}: expected {width} fields, got {len(parts)}")
        values = _parse_floats(parts, path, lineno)
        positions.append(values[:3])
        if width == 6:
            normals.append(values[3:])
    return _finish(positions, normals, path)


def _rows(cloud: PointCloud) -> np.ndarray:
    if cloud.normals is not None:
        return np.hstack([cloud.positions, cloud.normals])
    return cloud.positions


def _write_xyz(cloud: PointCloud, path: Path) -> None:
    rows = _rows(cloud)
    with open(path, "w", encoding="ascii") as handle:
        for row in rows:
            handle.write(" ".join(_FLOAT_FMT % v for v in row))
            handle.write("\n")


def _write_ply(cloud: PointCloud, path: Path) -> None:
    rows = _rows(cloud)
    names = ["x", "y", "z", "nx", "ny", "nz"][: rows.shape[1]]
    with open(path, "w", encoding="ascii") as handle:
        handle.write("ply\nformat ascii 1.0\n")
        handle.write(f"element vertex {len(cloud)}\n")
        for name in names:
            handle.write(f"property float {name}\n")
        handle.write("end_header\n")
        for row in rows:
            handle.write(" ".join(_FLOAT_FMT % v for v in row))
            handle.write("\n")
