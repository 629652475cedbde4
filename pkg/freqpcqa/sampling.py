"""
Patch sampling: farthest point sampling for centroids, exact kNN for patches.

Distances are squared Euclidean in float64; ordering by squared distance is
the same as ordering by distance, and every tie is broken by the smaller
source index.
"""

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .errors import DataError, SamplingError
from .pc_io import PointCloud, normalize_unit_sphere
from .workers import ordered_map

logger = logging.getLogger(__name__)

PATCH_MAGIC = b"PCQP1"


class SamplingConfig(BaseModel):
    """How many patches to cut from a cloud and how large they are"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    patch_count: int = Field(default=100, ge=1, description="P, patches per cloud")
    points_per_patch: int = Field(default=1024, ge=1, description="N = K, points per patch")
    seed: int = Field(default=0, ge=0, description="seed for the first FPS centroid")

    @field_validator("points_per_patch")
    @classmethod
    def _square_grid(cls, value: int) -> int:
        side = math.isqrt(value)
        if side * side != value or value & (value - 1):
            raise ValueError(
                f"points_per_patch must be a power of two and a perfect square "
                f"(64, 256, 1024, ...), got {value}"
            )
        return value

    @property
    def grid(self) -> int:
        """Side of the square feature grid (32 for N = 1024)"""
        return math.isqrt(self.points_per_patch)


@dataclass(frozen=True)
class Patch:
    """N points of one cloud ordered by distance from the centroid point"""
    centroid_index: int
    indices: np.ndarray  # (N,) source point indices, patch order
    coords: np.ndarray  # (N, 3) float64, normalized cloud frame
    colors: np.ndarray  # (N, 3) uint8
    source: str

    def __len__(self) -> int:
        return len(self.indices)


def coordinate_columns(points: np.ndarray) -> np.ndarray:
    """(3, n) contiguous float64 copy of an (n, 3) point array"""
    return np.ascontiguousarray(np.asarray(points, dtype=np.float64).T)


def squared_distances(columns: np.ndarray, center: np.ndarray,
                      out: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Squared Euclidean distance from every point to ``center``.

    ``columns`` is the (3, n) layout from :func:`coordinate_columns`; terms
    accumulate as (dx² + dy²) + dz². Only two scratch vectors are allocated.
    """
    n = columns.shape[1]
    if out is None:
        out = np.empty(n)
    scratch = np.empty(n)
    np.subtract(columns[0], center[0], out=out)
    np.multiply(out, out, out=out)
    for axis in (1, 2):
        np.subtract(columns[axis], center[axis], out=scratch)
        np.multiply(scratch, scratch, out=scratch)
        np.add(out, scratch, out=out)
    return out


def farthest_point_sample(
    cloud: PointCloud, count: int, seed: int = 0, start: Optional[int] = None,
    columns: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Greedy farthest point sampling.

    Args:
        cloud: source cloud
        count: number of indices to select
        seed: seeds the uniform choice of the first index
        start: explicit first index, overriding the seeded choice
        columns: precomputed :func:`coordinate_columns` of the cloud

    Returns:
        (count,) int64 array of distinct point indices in selection order

    Raises:
        SamplingError: count exceeds cloud size or is not positive
    """
    points = cloud.points
    n = len(points)
    if count < 1:
        raise SamplingError(f"FPS count must be positive, got {count}")
    if count > n:
        raise SamplingError(f"FPS count {count} exceeds cloud '{cloud.name}' size {n}")

    if start is None:
        start = int(np.random.default_rng(seed).integers(n))
    elif not 0 <= start < n:
        raise SamplingError(f"FPS start index {start} out of range for {n} points")
    if columns is None:
        columns = coordinate_columns(points)

    selected = np.empty(count, dtype=np.int64)
    selected[0] = start
    min_dist = squared_distances(columns, columns[:, start])
    step = np.empty(n)
    # Already-chosen points can never win, even when duplicates leave every
    # remaining distance at zero
    min_dist[start] = -1.0
    for i in range(1, count):
        nxt = int(np.argmax(min_dist))
        selected[i] = nxt
        np.minimum(min_dist, squared_distances(columns, columns[:, nxt], out=step),
                   out=min_dist)
        min_dist[nxt] = -1.0
    return selected


def nearest_indices(columns: np.ndarray, center: np.ndarray, k: int) -> np.ndarray:
    """
    Indices of the ``k`` points nearest to ``center`` ordered by
    (distance, index), found with a partial selection over a linear scan.
    ``columns`` is the (3, n) layout from :func:`coordinate_columns`.
    """
    d = squared_distances(columns, center)
    if k < len(d):
        kth = np.partition(d, k - 1)[k - 1]
        inside = np.flatnonzero(d < kth)
        boundary = np.flatnonzero(d == kth)[: k - len(inside)]
        candidates = np.concatenate((inside, boundary))
    else:
        candidates = np.arange(len(d))
    order = np.lexsort((candidates, d[candidates]))
    return candidates[order]


def knn_patch(cloud: PointCloud, centroid_index: int, k: int,
              columns: Optional[np.ndarray] = None) -> Patch:
    """
    The ``k`` points nearest the centroid point, centroid included.

    Raises:
        SamplingError: k exceeds cloud size or the centroid index is invalid
    """
    n = len(cloud)
    if k < 1 or k > n:
        raise SamplingError(f"kNN size {k} invalid for cloud '{cloud.name}' of {n} points")
    if not 0 <= centroid_index < n:
        raise SamplingError(f"centroid index {centroid_index} out of range for {n} points")
    if columns is None:
        columns = coordinate_columns(cloud.points)
    idx = nearest_indices(columns, columns[:, centroid_index], k)
    return Patch(
        centroid_index=int(centroid_index),
        indices=idx,
        coords=cloud.points[idx],
        colors=cloud.colors[idx],
        source=cloud.name,
    )


def extract_patches(
    cloud: PointCloud, cfg: SamplingConfig, threads: Optional[int] = 1
) -> List[Patch]:
    """
    Normalize to the unit sphere, pick P centroids by FPS and grow an
    N-point kNN patch around each one.

    Deterministic in (cloud, cfg); ``threads`` only spreads the kNN work.
    """
    if len(cloud) < cfg.points_per_patch:
        raise SamplingError(
            f"cloud '{cloud.name}' has {len(cloud)} points, fewer than "
            f"{cfg.points_per_patch} per patch"
        )
    normalized = normalize_unit_sphere(cloud)
    columns = coordinate_columns(normalized.points)
    centroids = farthest_point_sample(normalized, cfg.patch_count, seed=cfg.seed,
                                      columns=columns)
    patches = ordered_map(
        lambda c: knn_patch(normalized, int(c), cfg.points_per_patch, columns=columns),
        centroids, threads,
    )
    logger.debug(f"Extracted {len(patches)} patches of {cfg.points_per_patch} points "
                 f"from '{cloud.name}' (seed {cfg.seed})")
    return patches


# ==============================================================================
# PCQP1 patch dump
# ==============================================================================

def write_patches(patches: Sequence[Patch], path: Union[str, Path]):
    """
    Write ``PCQP1``: magic, P and N as little-endian uint32, then float32
    coordinates [P, N, 3] and uint8 colors [P, N, 3], both row-major.
    """
    if not patches:
        raise ValueError("no patches to write")
    n = len(patches[0])
    if any(len(p) != n for p in patches):
        raise ValueError("all patches in a dump must have the same size")
    coords = np.stack([p.coords for p in patches]).astype("<f4")
    colors = np.stack([p.colors for p in patches]).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(PATCH_MAGIC)
        f.write(struct.pack("<II", len(patches), n))
        f.write(coords.tobytes(order="C"))
        f.write(colors.tobytes(order="C"))


def read_patches(path: Union[str, Path]) -> Tuple[np.ndarray, np.ndarray]:
    """Read a ``PCQP1`` dump as (coords [P, N, 3] float32, colors [P, N, 3] uint8)"""
    raw = Path(path).read_bytes()
    head = len(PATCH_MAGIC) + 8
    if len(raw) < head or raw[: len(PATCH_MAGIC)] != PATCH_MAGIC:
        raise DataError(f"{path}: not a PCQP1 patch file")
    p, n = struct.unpack_from("<II", raw, len(PATCH_MAGIC))
    coord_bytes = p * n * 3 * 4
    if len(raw) != head + coord_bytes + p * n * 3:
        raise DataError(f"{path}: PCQP1 payload size does not match P={p}, N={n}")
    coords = np.frombuffer(raw, dtype="<f4", count=p * n * 3, offset=head).reshape(p, n, 3)
    colors = np.frombuffer(raw, dtype=np.uint8, offset=head + coord_bytes).reshape(p, n, 3)
    return coords.copy(), colors.copy()
