"""
Tests for the [9, G, G] patch tensor: layout, color scaling, frequency
attribute, ablations and the PCQF1 dump
"""

import numpy as np
import pytest

from freqpcqa.errors import DataError, FeatureError
from freqpcqa.features import (
    Ablation,
    apply_ablation,
    assemble,
    assemble_batch,
    frequency_attribute,
    grid_to_points,
    points_to_grid,
    read_features,
    rgb_attribute,
    write_features,
)
from freqpcqa.sampling import Patch, SamplingConfig, extract_patches
from freqpcqa.spectral import dft


def _patch(coords, colors=None, source="p"):
    n = len(coords)
    if colors is None:
        colors = np.zeros((n, 3), dtype=np.uint8)
    return Patch(0, np.arange(n), np.asarray(coords, dtype=np.float64),
                 np.asarray(colors, dtype=np.uint8), source)


def _random_patch(n=1024, seed=0):
    rng = np.random.default_rng(seed)
    return _patch(rng.uniform(-1, 1, size=(n, 3)), rng.integers(0, 256, size=(n, 3)))


# ==============================================================================
# Attributes
# ==============================================================================

def test_frequency_of_zero_coords_is_zero():
    out = frequency_attribute(np.zeros((64, 3)))

    assert out.shape == (64, 3)
    assert np.all(out == 0.0)


def test_frequency_of_impulse():
    """Flat x spectrum scales to a constant channel; y and z stay zero"""
    coords = np.zeros((16, 3))
    coords[0, 0] = 1.0

    out = frequency_attribute(coords)

    assert np.allclose(out[:, 0], out[0, 0])
    assert out[0, 0] == pytest.approx(1.0)
    assert np.all(out[:, 1:] == 0.0)


def test_frequency_random_patch_against_oracle():
    coords = np.random.default_rng(4).normal(size=(256, 3))

    out = frequency_attribute(coords)

    assert out.min() == pytest.approx(0.0, abs=1e-12)
    assert out.max() == pytest.approx(1.0, abs=1e-12)
    raw = np.stack([np.roll(np.abs(dft(coords[:, a])), 128) for a in range(3)], axis=1)
    expected = (raw - raw.min()) / (raw.max() - raw.min())
    np.testing.assert_allclose(out, expected, atol=1e-9)


def test_frequency_translation_changes_only_dc():
    """Before shifting and scaling, a translation moves only the zero bin"""
    coords = np.random.default_rng(5).normal(size=(64, 3))
    moved = coords + np.array([0.3, -0.2, 0.5])

    a = np.abs(dft(coords.T))
    b = np.abs(dft(moved.T))

    np.testing.assert_allclose(a[:, 1:], b[:, 1:], atol=1e-9)
    assert not np.allclose(a[:, 0], b[:, 0])


def test_frequency_rejects_non_power_of_two():
    with pytest.raises(FeatureError):
        frequency_attribute(np.ones((100, 3)))


def test_rgb_attribute():
    out = rgb_attribute(np.array([[255, 0, 128]]))

    assert out[0, 0] == 1.0
    assert out[0, 1] == 0.0
    assert out[0, 2] == pytest.approx(0.50196, abs=1e-5)


def test_rgb_attribute_rejects_out_of_range():
    with pytest.raises(FeatureError):
        rgb_attribute(np.array([[256, 0, 0]]))


# ==============================================================================
# Layout
# ==============================================================================

def test_x_ramp_fills_channel_zero_row_major():
    coords = np.zeros((1024, 3))
    coords[:, 0] = np.arange(1024)
    tensor = assemble(_patch(coords))

    assert tensor.data.shape == (9, 32, 32)
    np.testing.assert_array_equal(tensor.data[0], np.arange(1024).reshape(32, 32))
    assert np.all(tensor.data[1:6] == 0.0)
    assert tensor.grid == 32


def test_grid_round_trip_is_exact():
    attribute = np.random.default_rng(2).normal(size=(64, 3))

    assert np.array_equal(grid_to_points(points_to_grid(attribute)), attribute)


def test_assemble_channels():
    patch = _random_patch()
    tensor = assemble(patch)

    assert tensor.data.dtype == np.float32
    rgb = tensor.data[3:6]
    freq = tensor.data[6:9]
    assert rgb.min() >= 0.0 and rgb.max() <= 1.0
    assert freq.min() >= 0.0 and freq.max() <= 1.0
    np.testing.assert_allclose(tensor.coords(), patch.coords, atol=1e-6)
    np.testing.assert_allclose(tensor.rgb(), patch.colors / 255.0, atol=1e-6)


def test_rgb_channels_ignore_pose():
    patch = _random_patch(64, seed=7)
    theta = 0.7
    rotation = np.array([
        [np.cos(theta), -np.sin(theta), 0.0],
        [np.sin(theta), np.cos(theta), 0.0],
        [0.0, 0.0, 1.0],
    ])
    rotated = _patch(patch.coords @ rotation.T, patch.colors)

    assert np.array_equal(assemble(patch).data[3:6], assemble(rotated).data[3:6])


def test_point_order_is_semantic():
    patch = _random_patch(64, seed=8)
    flipped = _patch(patch.coords[::-1], patch.colors[::-1])

    assert not np.array_equal(assemble(patch).data, assemble(flipped).data)


def test_assemble_rejects_non_square_patch():
    with pytest.raises(FeatureError):
        assemble(_patch(np.zeros((128, 3))))


def test_batch_is_thread_independent(make_cloud):
    patches = extract_patches(make_cloud(400, seed=1),
                              SamplingConfig(patch_count=6, points_per_patch=64))

    serial = assemble_batch(patches, threads=1)
    parallel = assemble_batch(patches, threads=3)

    assert serial.shape == (6, 9, 8, 8)
    assert np.array_equal(serial, parallel)


# ==============================================================================
# Ablation and dump
# ==============================================================================

def test_ablation_zeroes_dropped_channels():
    batch = np.ones((2, 9, 4, 4), dtype=np.float32)

    no_rgb = apply_ablation(batch, Ablation.NO_RGB)
    no_freq = apply_ablation(batch, "no_frequency")

    assert no_rgb.shape == batch.shape
    assert np.all(no_rgb[:, 3:6] == 0) and np.all(no_rgb[:, [0, 1, 2, 6, 7, 8]] == 1)
    assert np.all(no_freq[:, 6:9] == 0) and np.all(no_freq[:, :6] == 1)
    assert apply_ablation(batch, Ablation.FULL) is batch
    assert np.all(batch == 1), "ablation must not modify its input"


def test_ablation_rejects_unknown_mode():
    with pytest.raises(ValueError):
        apply_ablation(np.zeros((1, 9, 2, 2)), "no_coords")


def test_feature_dump(tmp_path):
    batch = np.random.default_rng(0).random((3, 9, 8, 8)).astype(np.float32)
    path = tmp_path / "features.pcqf"

    write_features(batch, path)
    raw = path.read_bytes()

    assert raw[:5] == b"PCQF1"
    assert len(raw) == 5 + 8 + 4 * 3 * 9 * 8 * 8
    assert np.array_equal(read_features(path), batch)


def test_feature_dump_size_mismatch(tmp_path):
    path = tmp_path / "features.pcqf"
    write_features(np.zeros((2, 9, 4, 4), dtype=np.float32), path)
    path.write_bytes(path.read_bytes()[:-4])

    with pytest.raises(DataError):
        read_features(path)
