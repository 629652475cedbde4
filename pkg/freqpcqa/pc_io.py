"""
Point cloud and dataset manifest I/O

- PLY 1.0 reading/writing (ascii and binary_little_endian) through plyfile
- Unit-sphere normalization
- CSV dataset manifests (path, MOS, reference id)
"""

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
from plyfile import PlyData, PlyElement, PlyElementParseError, PlyHeaderParseError
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import DataError, DegenerateCloudError, ManifestError, PlyFormatError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

COORD_PROPERTIES = ("x", "y", "z")
COLOR_PROPERTIES = ("red", "green", "blue")
MANIFEST_FIELDS = ("path", "mos", "ref_id")


@dataclass(frozen=True)
class PointCloud:
    """Positions (model units) and 8-bit RGB colors of one cloud"""
    points: np.ndarray  # (n, 3) float64
    colors: np.ndarray  # (n, 3) uint8
    name: str = "cloud"
    metadata: Dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        points = np.ascontiguousarray(self.points, dtype=np.float64)
        colors = np.asarray(self.colors)
        if points.ndim != 2 or points.shape[1] != 3:
            raise DataError(f"points must have shape (n, 3), got {points.shape}")
        if colors.shape != points.shape:
            raise DataError(
                f"colors shape {colors.shape} does not match points shape {points.shape}"
            )
        if len(points) < 1:
            raise DegenerateCloudError(f"cloud '{self.name}' has no points")
        if colors.dtype != np.uint8:
            if colors.size and (colors.min() < 0 or colors.max() > 255):
                raise DataError("colors must lie in [0, 255]")
            colors = colors.astype(np.uint8)
        points.flags.writeable = False
        colors = np.ascontiguousarray(colors)
        colors.flags.writeable = False
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "colors", colors)

    def __len__(self) -> int:
        return len(self.points)

    def with_points(self, points: np.ndarray) -> "PointCloud":
        """Copy of this cloud with new coordinates and the same colors"""
        return PointCloud(points, self.colors, self.name, dict(self.metadata))


# ==============================================================================
# PLY
# ==============================================================================

@dataclass
class _PlyHeader:
    """What the pre-scan learns about a PLY header"""
    fmt: str
    header_bytes: int
    header_lines: int
    elements: List[Tuple[str, int, int]]  # (name, count, declaring line)
    vertex_properties: List[str]


def _scan_header(path: Path, raw: bytes) -> _PlyHeader:
    """Validate the header text and record positions for error reporting"""
    end = raw.find(b"end_header")
    if end < 0:
        line = raw.count(b"\n") + 1
        raise PlyFormatError("malformed header: missing 'end_header'", str(path), line=line)
    newline = raw.find(b"\n", end)
    header_bytes = len(raw) if newline < 0 else newline + 1
    try:
        lines = raw[:header_bytes].decode("ascii").splitlines()
    except UnicodeDecodeError as e:
        raise PlyFormatError("malformed header: non-ascii bytes", str(path), offset=e.start)

    if not lines or lines[0].strip() != "ply":
        raise PlyFormatError("malformed header: first line must be 'ply'", str(path), line=1)

    fmt = None
    elements: List[Tuple[str, int, int]] = []
    vertex_properties: List[str] = []
    current = None
    for number, text in enumerate(lines[1:], start=2):
        words = text.split()
        if not words or words[0] in ("comment", "obj_info", "end_header"):
            continue
        keyword = words[0]
        if keyword == "format":
            if len(words) != 3 or words[2] != "1.0":
                raise PlyFormatError(f"malformed format line '{text}'", str(path), line=number)
            fmt = words[1]
            if fmt == "binary_big_endian":
                raise PlyFormatError(
                    "unsupported format binary_big_endian", str(path), line=number
                )
            if fmt not in ("ascii", "binary_little_endian"):
                raise PlyFormatError(f"unknown format '{fmt}'", str(path), line=number)
        elif keyword == "element":
            if len(words) != 3 or not words[2].isdigit():
                raise PlyFormatError(f"malformed element line '{text}'", str(path), line=number)
            current = words[1]
            elements.append((current, int(words[2]), number))
        elif keyword == "property":
            if current is None:
                raise PlyFormatError("property declared before any element", str(path), line=number)
            if current == "vertex":
                vertex_properties.append(words[-1])
        else:
            raise PlyFormatError(f"unexpected header keyword '{keyword}'", str(path), line=number)

    if fmt is None:
        raise PlyFormatError("malformed header: missing format line", str(path), line=2)
    vertex = [e for e in elements if e[0] == "vertex"]
    if not vertex:
        raise PlyFormatError("no 'vertex' element declared", str(path), line=len(lines))
    for prop in COORD_PROPERTIES + COLOR_PROPERTIES:
        if prop not in vertex_properties:
            raise PlyFormatError(
                f"missing required vertex property '{prop}'", str(path), line=vertex[0][2]
            )
    return _PlyHeader(fmt, header_bytes, len(lines), elements, vertex_properties)


def load_ply(path: PathLike) -> PointCloud:
    """
    Read a PLY file into a PointCloud.

    Args:
        path: ascii or binary_little_endian PLY with vertex properties
              x, y, z and red, green, blue; other properties are ignored

    Returns:
        PointCloud with points and colors in file order

    Raises:
        PlyFormatError: malformed header, missing property, truncated payload
                        or unsupported format, with line or byte position
    """
    path = Path(path)
    raw = path.read_bytes()
    header = _scan_header(path, raw)

    try:
        with open(path, "rb") as stream:
            ply = PlyData.read(stream, mmap=False)
    except PlyHeaderParseError as e:
        raise PlyFormatError(f"malformed header: {e.message}", str(path), line=e.line)
    except PlyElementParseError as e:
        raise _payload_error(path, header, len(raw), e)

    vertex = ply["vertex"].data
    declared = dict((name, count) for name, count, _ in header.elements)["vertex"]
    if declared == 0:
        line = next(line for name, _, line in header.elements if name == "vertex")
        raise PlyFormatError("vertex element is empty", str(path), line=line)
    if len(vertex) != declared:
        raise PlyFormatError(
            f"truncated payload: {len(vertex)} of {declared} vertices",
            str(path),
            offset=len(raw),
        )

    points = np.stack([np.asarray(vertex[p], dtype=np.float64) for p in COORD_PROPERTIES], axis=1)
    colors = np.stack([np.asarray(vertex[p]) for p in COLOR_PROPERTIES], axis=1)
    if not np.issubdtype(colors.dtype, np.integer):
        line = next(line for name, _, line in header.elements if name == "vertex")
        raise PlyFormatError("color properties must be integers", str(path), line=line)
    if colors.size and (colors.min() < 0 or colors.max() > 255):
        raise PlyFormatError("color values outside [0, 255]", str(path))

    logger.debug(f"Loaded {len(points)} points from {path} ({header.fmt})")
    return PointCloud(points, colors.astype(np.uint8), name=path.stem,
                      metadata={"source": str(path), "format": header.fmt})


def _payload_error(
    path: Path, header: _PlyHeader, size: int, error: PlyElementParseError
) -> PlyFormatError:
    """Translate a plyfile payload error into a positioned PlyFormatError"""
    element = error.element.name if error.element is not None else "?"
    row = error.row if error.row is not None else 0
    message = f"{error.message} in element '{element}' at row {row}"
    if "end-of-file" in error.message:
        message = f"truncated payload: {message}"
    if header.fmt == "ascii":
        preceding = 0
        for name, count, _ in header.elements:
            if name == element:
                break
            preceding += count
        return PlyFormatError(message, str(path), line=header.header_lines + preceding + row + 1)
    return PlyFormatError(message, str(path), offset=size)


def write_ply(cloud: PointCloud, path: PathLike, binary: bool = True, coord_dtype: str = "f8"):
    """
    Write a cloud as PLY.

    Args:
        cloud: cloud to write
        path: destination file
        binary: binary_little_endian when True, ascii otherwise
        coord_dtype: 'f4' or 'f8' storage for x, y, z
    """
    if coord_dtype not in ("f4", "f8"):
        raise ValueError(f"coord_dtype must be 'f4' or 'f8', got '{coord_dtype}'")
    vertex = np.empty(
        len(cloud),
        dtype=[(p, coord_dtype) for p in COORD_PROPERTIES] + [(p, "u1") for p in COLOR_PROPERTIES],
    )
    for axis, prop in enumerate(COORD_PROPERTIES):
        vertex[prop] = cloud.points[:, axis]
    for axis, prop in enumerate(COLOR_PROPERTIES):
        vertex[prop] = cloud.colors[:, axis]
    element = PlyElement.describe(vertex, "vertex")
    PlyData([element], text=not binary, byte_order="<").write(str(path))


# ==============================================================================
# Normalization
# ==============================================================================

def normalize_unit_sphere(cloud: PointCloud) -> PointCloud:
    """
    Center a cloud on its mean and scale it so the farthest point has norm 1.
    Colors are untouched.

    Raises:
        DegenerateCloudError: every point is identical, scale undefined
    """
    centered = cloud.points - cloud.points.mean(axis=0)
    scale = float(np.sqrt((centered ** 2).sum(axis=1)).max())
    if not math.isfinite(scale) or scale == 0.0:
        raise DegenerateCloudError(
            f"cloud '{cloud.name}' is degenerate: all points coincide, scale undefined"
        )
    return cloud.with_points(centered / scale)


# ==============================================================================
# Manifests
# ==============================================================================

class ManifestEntry(BaseModel):
    """One degraded cloud with its subjective score"""
    model_config = ConfigDict(frozen=True)

    path: Path
    mos: float
    ref_id: str = Field(..., min_length=1)

    @field_validator("mos")
    @classmethod
    def _finite_mos(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("MOS must be finite")
        return value


class DatasetManifest(BaseModel):
    """Ordered collection of manifest entries"""
    model_config = ConfigDict(frozen=True)

    entries: Tuple[ManifestEntry, ...] = ()

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ManifestEntry]:  # type: ignore[override]
        return iter(self.entries)

    def reference_ids(self) -> List[str]:
        """Distinct reference ids in sorted order"""
        return sorted({e.ref_id for e in self.entries})

    def by_reference(self) -> Dict[str, List[ManifestEntry]]:
        groups: Dict[str, List[ManifestEntry]] = {}
        for entry in self.entries:
            groups.setdefault(entry.ref_id, []).append(entry)
        return groups

    def subset(self, ref_ids) -> "DatasetManifest":
        """Entries whose reference id is in ``ref_ids``, manifest order kept"""
        wanted = set(ref_ids)
        return DatasetManifest(entries=tuple(e for e in self.entries if e.ref_id in wanted))


def load_manifest(path: PathLike, check_paths: bool = True) -> DatasetManifest:
    """
    Load a ``path,mos,ref_id`` CSV manifest.

    Relative cloud paths are resolved against the manifest's directory.

    Raises:
        ManifestError: missing file, bad header, non-numeric or non-finite
                       MOS, missing cloud file, or duplicate path
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")

    entries: List[ManifestEntry] = []
    seen: Dict[Path, int] = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        missing = [name for name in MANIFEST_FIELDS if name not in (reader.fieldnames or [])]
        if missing:
            raise ManifestError(f"{path}: header must contain {','.join(MANIFEST_FIELDS)}; "
                                f"missing {', '.join(missing)}")
        for record, row in enumerate(reader, start=1):
            where = f"{path}: record {record} (line {reader.line_num})"
            raw_path = (row.get("path") or "").strip()
            raw_mos = (row.get("mos") or "").strip()
            try:
                mos = float(raw_mos)
            except ValueError:
                raise ManifestError(f"{where}: MOS '{raw_mos}' is not a number")
            cloud_path = Path(raw_path)
            if not cloud_path.is_absolute():
                cloud_path = path.parent / cloud_path
            try:
                ref_id = (row.get("ref_id") or "").strip()
                entry = ManifestEntry(path=cloud_path, mos=mos, ref_id=ref_id)
            except ValidationError as e:
                reason = "; ".join(err["msg"] for err in e.errors())
                raise ManifestError(f"{where}: {reason}")
            key = entry.path.resolve()
            if key in seen:
                raise ManifestError(
                    f"{where}: duplicate path '{raw_path}' (first seen in record {seen[key]})"
                )
            if check_paths and not entry.path.is_file():
                raise ManifestError(f"{where}: cloud file not found: {entry.path}")
            seen[key] = record
            entries.append(entry)

    if not entries:
        raise ManifestError(f"{path}: manifest has no records")
    logger.info(f"Loaded manifest {path}: {len(entries)} clouds, "
                f"{len({e.ref_id for e in entries})} references")
    return DatasetManifest(entries=tuple(entries))


def write_manifest(manifest: DatasetManifest, path: PathLike, relative_to: Optional[Path] = None):
    """Write a manifest CSV; paths are made relative to ``relative_to`` when possible"""
    path = Path(path)
    base = Path(relative_to) if relative_to is not None else path.parent
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_FIELDS)
        for entry in manifest:
            entry_path = entry.path
            try:
                entry_path = Path(os.path.relpath(entry.path.resolve(), base.resolve()))
            except ValueError:
                entry_path = entry.path.resolve()
            writer.writerow([entry_path.as_posix(), repr(entry.mos), entry.ref_id])
