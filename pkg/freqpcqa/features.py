"""
Per-patch model input: coordinates, RGB and frequency magnitude stacked
into a [9, G, G] image-like tensor (G = 32 for N = 1024 points).

Channels 0-2 hold x, y, z; 3-5 red, green, blue in [0, 1]; 6-8 the
fftshift-ed FFT magnitude of each coordinate signal, min-max scaled per
patch. Each length-N signal fills its G x G channel row-major.
"""

import math
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DataError, FeatureError
from .sampling import Patch
from .spectral import fft, fftshift, is_power_of_two, magnitude
from .workers import ordered_map

FEATURE_MAGIC = b"PCQF1"
CHANNELS = 9
COORD_CHANNELS = slice(0, 3)
RGB_CHANNELS = slice(3, 6)
FREQUENCY_CHANNELS = slice(6, 9)


class Ablation(str, Enum):
    """Input attribute dropped for the ablation study"""
    FULL = "full"
    NO_RGB = "no_rgb"
    NO_FREQUENCY = "no_frequency"


@dataclass(frozen=True)
class FeatureTensor:
    """Stacked [9, G, G] attribute grid of one patch"""
    data: np.ndarray  # float32
    source: str = ""

    @property
    def grid(self) -> int:
        return self.data.shape[-1]

    def coords(self) -> np.ndarray:
        return grid_to_points(self.data[COORD_CHANNELS])

    def rgb(self) -> np.ndarray:
        return grid_to_points(self.data[RGB_CHANNELS])

    def frequency(self) -> np.ndarray:
        return grid_to_points(self.data[FREQUENCY_CHANNELS])


def grid_side(points: int) -> int:
    """Square grid side for N points per patch"""
    side = math.isqrt(points)
    if side * side != points:
        raise FeatureError(f"{points} points do not fill a square grid")
    return side


def points_to_grid(attribute: np.ndarray) -> np.ndarray:
    """(N, 3) attribute to (3, G, G): channel c is axis c reshaped row-major"""
    n = attribute.shape[0]
    g = grid_side(n)
    return np.ascontiguousarray(attribute.T).reshape(3, g, g)


def grid_to_points(channels: np.ndarray) -> np.ndarray:
    """Inverse of ``points_to_grid``"""
    c = channels.shape[0]
    return channels.reshape(c, -1).T.copy()


def frequency_attribute(coords: np.ndarray) -> np.ndarray:
    """
    FFT magnitude of each coordinate signal, zero frequency centered, then
    min-max scaled over the whole N x 3 block (a constant block maps to 0).

    Args:
        coords: (N, 3) coordinates in patch order, N a power of two

    Returns:
        (N, 3) float64 in [0, 1]
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise FeatureError(f"coordinates must have shape (N, 3), got {coords.shape}")
    if not is_power_of_two(coords.shape[0]):
        raise FeatureError(f"frequency attribute needs N a power of two, got {coords.shape[0]}")
    spectrum = fftshift(magnitude(fft(coords.T))).T
    low, high = spectrum.min(), spectrum.max()
    if high - low <= 0.0:
        return np.zeros_like(spectrum)
    return (spectrum - low) / (high - low)


def rgb_attribute(colors: np.ndarray) -> np.ndarray:
    """8-bit colors scaled to [0, 1]"""
    colors = np.asarray(colors)
    if colors.size and (colors.min() < 0 or colors.max() > 255):
        raise FeatureError("colors must lie in [0, 255]")
    return colors.astype(np.float64) / 255.0


def assemble(patch: Patch) -> FeatureTensor:
    """
    Concatenate and reshape a patch's three attributes into [9, G, G].

    Raises:
        FeatureError: N is not a power of two with a square grid (e.g. 1024)
    """
    n = len(patch)
    grid_side(n)
    if not is_power_of_two(n):
        raise FeatureError(f"patch size {n} is not a power of two")
    data = np.concatenate(
        (
            points_to_grid(patch.coords),
            points_to_grid(rgb_attribute(patch.colors)),
            points_to_grid(frequency_attribute(patch.coords)),
        )
    ).astype(np.float32)
    return FeatureTensor(data=data, source=patch.source)


def assemble_batch(patches: Sequence[Patch], threads: Optional[int] = 1) -> np.ndarray:
    """Stack assembled patches into a float32 [P, 9, G, G] batch"""
    tensors = ordered_map(assemble, patches, threads)
    return np.stack([t.data for t in tensors])


def apply_ablation(batch: np.ndarray, mode: Union[Ablation, str]) -> np.ndarray:
    """Zero the dropped attribute's channels; the shape never changes"""
    mode = Ablation(mode)
    if mode is Ablation.FULL:
        return batch
    out = batch.copy()
    dropped = RGB_CHANNELS if mode is Ablation.NO_RGB else FREQUENCY_CHANNELS
    out[:, dropped] = 0.0
    return out


# ==============================================================================
# PCQF1 feature dump
# ==============================================================================

def write_features(batch: np.ndarray, path: Union[str, Path]):
    """
    Write ``PCQF1``: magic, P and G as little-endian int32, then float32
    [P, 9, G, G] row-major.
    """
    batch = np.asarray(batch)
    if batch.ndim != 4 or batch.shape[1] != CHANNELS or batch.shape[2] != batch.shape[3]:
        raise FeatureError(f"feature batch must be [P, 9, G, G], got {batch.shape}")
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<ii", batch.shape[0], batch.shape[2]))
        f.write(batch.astype("<f4").tobytes(order="C"))


def read_features(path: Union[str, Path]) -> np.ndarray:
    """Read a ``PCQF1`` file as float32 [P, 9, G, G]"""
    raw = Path(path).read_bytes()
    head = len(FEATURE_MAGIC) + 8
    if len(raw) < head or raw[: len(FEATURE_MAGIC)] != FEATURE_MAGIC:
        raise DataError(f"{path}: not a PCQF1 feature file")
    p, g = struct.unpack_from("<ii", raw, len(FEATURE_MAGIC))
    expected: Tuple[int, ...] = (p, CHANNELS, g, g)
    if p < 0 or g < 0 or len(raw) != head + 4 * p * CHANNELS * g * g:
        raise DataError(f"{path}: PCQF1 payload size does not match P={p}, G={g}")
    return np.frombuffer(raw, dtype="<f4", offset=head).reshape(expected).astype(np.float32)
