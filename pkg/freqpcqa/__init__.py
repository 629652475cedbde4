"""
freqpcqa - no-reference point cloud quality assessment

Patches cut from a colored point cloud by farthest point sampling and kNN
are turned into [9, G, G] tensors of coordinates, color and coordinate
spectrum magnitude, scored by a hybrid deformable-conv / depthwise-conv /
transformer regressor built on a small numpy autodiff engine, and averaged
into one cloud quality score.
"""

__version__ = "0.1.0"

from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    DegenerateMetricError,
    NonFiniteGradientError,
    PCQAError,
    PlyFormatError,
    ShapeError,
)
from .features import Ablation, FeatureTensor, apply_ablation, assemble, assemble_batch
from .metrics import plcc, rmse, srocc
from .nn import ModelConfig, PCQANet, aggregate_quality, load_model, parameter_census, save_model
from .pc_io import (
    DatasetManifest,
    ManifestEntry,
    PointCloud,
    load_manifest,
    load_ply,
    normalize_unit_sphere,
    write_manifest,
    write_ply,
)
from .sampling import Patch, SamplingConfig, extract_patches, farthest_point_sample, knn_patch
from .spectral import fft, fftshift, ifft, magnitude
from .training import SGD, TrainConfig, predict_cloud, sgd_step, smooth_l1, train

__all__ = [
    "__version__",
    # Errors
    "PCQAError",
    "ConfigError",
    "DataError",
    "PlyFormatError",
    "CheckpointError",
    "ShapeError",
    "NonFiniteGradientError",
    "DegenerateMetricError",
    # Data
    "PointCloud",
    "ManifestEntry",
    "DatasetManifest",
    "load_ply",
    "write_ply",
    "normalize_unit_sphere",
    "load_manifest",
    "write_manifest",
    # Patches and features
    "SamplingConfig",
    "Patch",
    "farthest_point_sample",
    "knn_patch",
    "extract_patches",
    "fft",
    "ifft",
    "magnitude",
    "fftshift",
    "Ablation",
    "FeatureTensor",
    "assemble",
    "assemble_batch",
    "apply_ablation",
    # Model and training
    "ModelConfig",
    "PCQANet",
    "parameter_census",
    "aggregate_quality",
    "save_model",
    "load_model",
    "TrainConfig",
    "smooth_l1",
    "sgd_step",
    "SGD",
    "train",
    "predict_cloud",
    # Metrics
    "plcc",
    "srocc",
    "rmse",
]
