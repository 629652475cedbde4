"""
End-to-end scoring of one cloud: patches, features, model, Q_f
"""

import time

import numpy as np
import pytest

from freqpcqa.features import FeatureTensor, assemble_batch
from freqpcqa.nn import ModelConfig, PCQANet, aggregate_quality
from freqpcqa.pc_io import PointCloud
from freqpcqa.sampling import SamplingConfig, extract_patches
from freqpcqa.training import predict_cloud


def test_sphere_gives_hundred_feature_tensors(sphere):
    patches = extract_patches(sphere, SamplingConfig())
    features = assemble_batch(patches, threads=2)

    assert features.shape == (100, 9, 32, 32)
    assert np.all(np.isfinite(features))
    tensor = FeatureTensor(features[0])
    for channels in (tensor.rgb(), tensor.frequency()):
        assert channels.min() >= 0.0 and channels.max() <= 1.0


def test_cloud_score_is_mean_of_patch_scores(sphere):
    model = PCQANet(ModelConfig(scale="1/8", repeats=(1, 1, 1, 1, 1)), seed=0)
    rng = np.random.default_rng(0)
    for p in model.parameters():
        p.data = (p.data + rng.normal(scale=0.02, size=p.shape)).astype(np.float32)

    prediction = predict_cloud(model, sphere, SamplingConfig(), threads=2)

    assert prediction.patch_scores.shape == (100,)
    assert np.all(np.isfinite(prediction.patch_scores))
    assert prediction.quality == aggregate_quality(prediction.patch_scores)
    assert np.isfinite(prediction.quality)


def test_cloud_score_is_reproducible(sphere):
    model = PCQANet(ModelConfig(scale="1/8", repeats=(1, 1, 1, 1, 1)), seed=1)
    sampling = SamplingConfig(patch_count=10)

    first = predict_cloud(model, sphere, sampling, seed=3).quality
    second = predict_cloud(model, sphere, sampling, seed=3, threads=4).quality

    assert first == second


@pytest.mark.slow
def test_full_size_model_scores_sphere(sphere):
    model = PCQANet(ModelConfig(), seed=0)

    prediction = predict_cloud(model, sphere, SamplingConfig(), batch_size=16)

    assert prediction.patch_scores.shape == (100,)
    assert np.all(np.isfinite(prediction.patch_scores))


@pytest.mark.slow
def test_million_point_cloud_end_to_end():
    rng = np.random.default_rng(0)
    cloud = PointCloud(rng.normal(size=(1_000_000, 3)),
                       rng.integers(0, 256, size=(1_000_000, 3)).astype(np.uint8), name="big")
    model = PCQANet(ModelConfig(scale="1/8"), seed=0)

    started = time.perf_counter()
    prediction = predict_cloud(model, cloud, SamplingConfig(), threads=0)
    elapsed = time.perf_counter() - started

    assert prediction.patch_scores.shape == (100,)
    assert np.isfinite(prediction.quality)
    assert elapsed < 10.0, f"1M-point prediction took {elapsed:.2f}s"
