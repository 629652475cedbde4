"""
Shared fixtures: synthetic clouds, PLY files on disk and a small dataset
manifest whose MOS is readable from each cloud's color.
"""

from fractions import Fraction
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import pytest

from freqpcqa.nn import ModelConfig
from freqpcqa.pc_io import DatasetManifest, ManifestEntry, PointCloud, write_manifest, write_ply


def random_cloud(n: int, seed: int = 0, name: str = "cloud",
                 gray: Optional[int] = None) -> PointCloud:
    """Gaussian blob of ``n`` points; random colors unless ``gray`` is given"""
    rng = np.random.default_rng(seed)
    points = rng.normal(size=(n, 3))
    if gray is None:
        colors = rng.integers(0, 256, size=(n, 3))
    else:
        colors = np.full((n, 3), gray)
    return PointCloud(points, colors.astype(np.uint8), name=name)


def sphere_cloud(n: int = 5000, seed: int = 0, name: str = "sphere") -> PointCloud:
    """Points on the unit sphere with position-dependent colors"""
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    colors = np.round((v + 1.0) * 127.5).astype(np.uint8)
    return PointCloud(v, colors, name=name)


@pytest.fixture
def make_cloud() -> Callable[..., PointCloud]:
    return random_cloud


@pytest.fixture
def sphere() -> PointCloud:
    return sphere_cloud()


@pytest.fixture
def tiny_model_config() -> ModelConfig:
    """Smallest architecture the CLI and trainer accept: 8x8 grid, one block per stage"""
    return ModelConfig(repeats=(1, 1, 1, 1, 1), grid=8, scale=Fraction(1, 16))


def mos_from_gray(gray: float) -> float:
    return (gray - 40.0) / 40.0


def build_dataset(root: Path, references: int = 5, distortions: int = 2,
                  points: int = 200) -> Path:
    """
    Write ``references * distortions`` PLY clouds and a manifest.

    Each cloud is a gray blob with MOS = (gray - 40) / 40, so a model that
    sees color can learn the ranking and ``mos_from_gray`` recovers it.
    """
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for r in range(references):
        for d in range(distortions):
            gray = 60 + 15 * (r * distortions + d)
            mos = mos_from_gray(gray)
            cloud = random_cloud(points, seed=100 * r + d, name=f"ref{r}_d{d}", gray=gray)
            path = root / f"ref{r}_d{d}.ply"
            write_ply(cloud, path)
            entries.append(ManifestEntry(path=path, mos=mos, ref_id=f"ref{r}"))
    manifest_path = root / "manifest.csv"
    write_manifest(DatasetManifest(entries=tuple(entries)), manifest_path)
    return manifest_path


@pytest.fixture
def dataset(tmp_path) -> Path:
    """Manifest path of a 5-reference, 10-cloud synthetic dataset"""
    return build_dataset(tmp_path / "data")
