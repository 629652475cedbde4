"""
Tests for the loss, the momentum optimizer and the epoch loop
"""

import csv
import logging
from fractions import Fraction

import numpy as np
import pytest
from pydantic import ValidationError

from freqpcqa import autodiff as ad
from freqpcqa import checkpoint
from freqpcqa.autodiff import Parameter, Tensor
from freqpcqa.errors import CheckpointError, DataError, NonFiniteGradientError
from freqpcqa.features import Ablation
from freqpcqa.nn import ModelConfig, PCQANet, load_model
from freqpcqa.pc_io import DatasetManifest, load_manifest
from freqpcqa.sampling import SamplingConfig
from freqpcqa.training import (
    SGD,
    TrainConfig,
    cloud_features,
    sgd_step,
    smooth_l1,
    train,
    validation_references,
)

from conftest import build_dataset

SAMPLING = SamplingConfig(patch_count=4, points_per_patch=64, seed=0)


def _quick_config(**overrides):
    values = dict(lr=0.01, momentum=0.9, weight_decay=1e-4, batch=8, epochs=2, seed=3,
                  patches_per_cloud_per_epoch=4, validation_fraction=0.2)
    values.update(overrides)
    return TrainConfig(**values)


def _log_rows(path):
    """Log rows without the wall-clock column"""
    with open(path, newline="") as f:
        return [row[:-1] for row in csv.reader(f)]


# ==============================================================================
# Loss
# ==============================================================================

def test_smooth_l1_examples():
    assert smooth_l1(3.0, 3.5) == 0.125
    assert smooth_l1(5.0, 2.0) == 2.5
    assert smooth_l1(4.2, 4.2) == 0.0
    assert smooth_l1(2.0, 3.0) == 0.5
    assert smooth_l1([3.0, 5.0], [3.5, 2.0]) == pytest.approx((0.125 + 2.5) / 2)


def test_smooth_l1_continuous_at_knee():
    below = smooth_l1(0.0, 1.0 - 1e-9)
    above = smooth_l1(0.0, 1.0 + 1e-9)

    assert abs(below - above) < 1e-8


def test_loss_gradient_is_clamped():
    for d in np.linspace(-4, 4, 81):
        pred = Tensor(np.array([d]), requires_grad=True)
        ad.backward(ad.smooth_l1_loss(pred, np.array([0.0])))
        assert abs(pred.grad[0]) <= 1.0 + 1e-12
        assert ad.smooth_l1_loss(Tensor(np.array([d])), np.array([0.0])).item() == (
            pytest.approx(smooth_l1(0.0, d))
        )


def test_loss_is_zero_only_at_target():
    assert smooth_l1([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert smooth_l1([1.0, 2.0], [1.0, 2.001]) > 0.0


# ==============================================================================
# Optimizer
# ==============================================================================

def test_zero_gradient_leaves_params():
    w = {"w": np.array([1.5, -2.0])}

    sgd_step(w, {"w": np.zeros(2)}, {}, lr=0.1, momentum=0.9, weight_decay=0.0)

    np.testing.assert_array_equal(w["w"], [1.5, -2.0])


def test_plain_sgd_step():
    w = {"w": np.array([1.0])}

    sgd_step(w, {"w": np.array([1.0])}, {}, lr=0.1, momentum=0.0, weight_decay=0.0)

    assert w["w"][0] == pytest.approx(0.9)


def test_two_momentum_steps():
    w = {"w": np.array([0.0])}
    velocity = {}

    sgd_step(w, {"w": np.array([1.0])}, velocity, lr=0.1, momentum=0.9, weight_decay=0.0)
    assert w["w"][0] == pytest.approx(-0.1)
    sgd_step(w, {"w": np.array([1.0])}, velocity, lr=0.1, momentum=0.9, weight_decay=0.0)
    assert w["w"][0] == pytest.approx(-0.29)


def test_zero_learning_rate_changes_nothing():
    w = {"w": np.array([0.3, 0.7])}

    sgd_step(w, {"w": np.array([5.0, -1.0])}, {}, lr=0.0, momentum=0.9, weight_decay=1e-4)

    np.testing.assert_array_equal(w["w"], [0.3, 0.7])


def test_momentum_zero_is_plain_sgd():
    rng = np.random.default_rng(0)
    w = rng.normal(size=5)
    params = {"w": w.copy()}
    velocity = {}
    expected = w.copy()
    for _ in range(3):
        g = rng.normal(size=5)
        sgd_step(params, {"w": g}, velocity, lr=0.05, momentum=0.0, weight_decay=0.0)
        expected -= 0.05 * g

    np.testing.assert_allclose(params["w"], expected, atol=1e-12)


def test_weight_decay_and_exemptions():
    params = {"w": np.array([1.0]), "norm.gamma": np.array([1.0])}
    grads = {"w": np.array([0.0]), "norm.gamma": np.array([0.0])}

    sgd_step(params, grads, {}, lr=1.0, momentum=0.0, weight_decay=0.1, no_decay=["norm.gamma"])

    assert params["w"][0] == pytest.approx(0.9)
    assert params["norm.gamma"][0] == 1.0


def test_non_finite_gradient_aborts_step():
    params = {"a": np.array([1.0]), "b": np.array([2.0])}
    grads = {"a": np.array([1.0]), "b": np.array([np.nan])}

    with pytest.raises(NonFiniteGradientError, match="'b'"):
        sgd_step(params, grads, {}, lr=0.1, momentum=0.0, weight_decay=0.0)
    assert params["a"][0] == 1.0, "no parameter may move when a gradient is non-finite"


def test_sgd_state_round_trip():
    weights = [("layer.weight", Parameter(np.array([1.0, 2.0]))),
               ("layer.bias", Parameter(np.array([0.5]), decay=False))]
    opt = SGD(weights, lr=0.1, momentum=0.9, weight_decay=0.01)
    for _, p in weights:
        p.grad = np.ones_like(p.data)
    opt.step()

    state = opt.state_dict()
    fresh = SGD(weights, lr=0.1, momentum=0.9)
    fresh.load_state_dict(state)

    assert set(state) == {"optim.velocity.layer.weight", "optim.velocity.layer.bias"}
    assert opt.no_decay == {"layer.bias"}
    np.testing.assert_array_equal(fresh.velocity["layer.weight"], opt.velocity["layer.weight"])


def test_train_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(lr=0)
    with pytest.raises(ValidationError):
        TrainConfig(batch=0)
    with pytest.raises(ValidationError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ValidationError):
        TrainConfig(unknown=1)
    assert TrainConfig().ablation is Ablation.FULL


# ==============================================================================
# Epoch loop
# ==============================================================================

def test_validation_references_hold_out_whole_references(dataset):
    manifest = load_manifest(dataset)

    train_refs, val_refs = validation_references(manifest, 0.2, seed=0)

    assert len(val_refs) == 1
    assert set(train_refs) | set(val_refs) == set(manifest.reference_ids())
    assert not set(train_refs) & set(val_refs)
    assert validation_references(manifest, 0.2, seed=0) == (train_refs, val_refs)
    assert validation_references(manifest, 0.0, seed=0)[1] == []


def test_no_rgb_ablation_zeroes_input(make_cloud):
    cloud = make_cloud(300, seed=2)

    full = cloud_features(cloud, SAMPLING)
    ablated = cloud_features(cloud, SAMPLING, Ablation.NO_RGB)

    assert ablated.shape == full.shape
    assert np.all(ablated[:, 3:6] == 0.0)
    assert np.array_equal(ablated[:, [0, 1, 2, 6, 7, 8]], full[:, [0, 1, 2, 6, 7, 8]])


def test_two_epoch_run_is_reproducible(tmp_path, dataset, tiny_model_config):
    manifest = load_manifest(dataset)
    runs = []
    for name, threads in (("a", 1), ("b", 3)):
        out = tmp_path / name
        result = train(manifest, PCQANet(tiny_model_config, seed=1), _quick_config(),
                       SAMPLING, out, threads=threads)
        runs.append((out, result))

    (out_a, result_a), (out_b, result_b) = runs
    assert result_a.epochs_run == 2
    assert _log_rows(out_a / "train_log.csv") == _log_rows(out_b / "train_log.csv")
    assert (out_a / "last.pcqw").read_bytes() == (out_b / "last.pcqw").read_bytes()
    assert (out_a / "best.pcqw").is_file() and (out_a / "best.pcqw.json").is_file()


def test_best_checkpoint_has_highest_validation_srocc(tmp_path, dataset, tiny_model_config):
    result = train(load_manifest(dataset), PCQANet(tiny_model_config), _quick_config(epochs=3),
                   SAMPLING, tmp_path / "run")

    logged = [r.val_srocc for r in result.history if np.isfinite(r.val_srocc)]
    assert logged, "no epoch produced a finite validation SROCC"
    assert result.best_val_srocc >= max(logged)
    assert 1 <= result.best_epoch <= 3
    _, stored = load_model(result.best_checkpoint)
    assert int(stored["meta.best_epoch"][0]) == result.best_epoch
    assert stored["meta.best_val_srocc"].dtype == np.float64
    assert float(stored["meta.best_val_srocc"][0]) == result.best_val_srocc
    assert not any(name.startswith("meta.") for name in checkpoint.load(result.best_checkpoint))


def test_resume_continues_the_same_run(tmp_path, dataset, tiny_model_config):
    manifest = load_manifest(dataset)
    straight = tmp_path / "straight"
    train(manifest, PCQANet(tiny_model_config, seed=1), _quick_config(), SAMPLING, straight)

    split_run = tmp_path / "split"
    train(manifest, PCQANet(tiny_model_config, seed=1), _quick_config(epochs=1), SAMPLING,
          split_run)
    result = train(manifest, PCQANet(tiny_model_config, seed=1), _quick_config(), SAMPLING,
                   split_run, resume=split_run / "last.pcqw")

    assert result.epochs_run == 2
    assert _log_rows(split_run / "train_log.csv") == _log_rows(straight / "train_log.csv")
    a = checkpoint.load(straight / "last.pcqw")
    b = checkpoint.load(split_run / "last.pcqw")
    for name in a:
        if not name.startswith("meta."):
            assert np.array_equal(a[name], b[name]), name


def test_single_cloud_validation_is_folded_into_training(tmp_path, tiny_model_config, caplog):
    manifest = load_manifest(build_dataset(tmp_path / "data", references=3, distortions=1))
    _, val_refs = validation_references(manifest, 0.2, seed=3)
    assert len(val_refs) == 1

    with caplog.at_level(logging.INFO, logger="freqpcqa.training"):
        train(manifest, PCQANet(tiny_model_config), _quick_config(epochs=1), SAMPLING,
              tmp_path / "run")

    messages = [r.getMessage() for r in caplog.records]
    assert any("folding it into training" in m for m in messages)
    assert any("Training on 3 clouds (3 references), validating on 3" in m for m in messages)


def test_resume_rejects_other_ablation(tmp_path, dataset, tiny_model_config):
    manifest = load_manifest(dataset)
    run = tmp_path / "run"
    train(manifest, PCQANet(tiny_model_config), _quick_config(epochs=1), SAMPLING, run)

    with pytest.raises(CheckpointError, match="ablation"):
        train(manifest, PCQANet(tiny_model_config), _quick_config(ablation=Ablation.NO_RGB),
              SAMPLING, run, resume=run / "last.pcqw")


def test_small_clouds_are_skipped(tmp_path, tiny_model_config, caplog):
    manifest_path = build_dataset(tmp_path / "data", references=3, distortions=2, points=200)
    small = build_dataset(tmp_path / "small", references=1, distortions=1, points=30)
    manifest = load_manifest(manifest_path)
    tiny_entry = load_manifest(small).entries[0].model_copy(update={"ref_id": "ref0"})
    manifest = DatasetManifest(entries=manifest.entries + (tiny_entry,))

    with caplog.at_level(logging.WARNING, logger="freqpcqa.training"):
        result = train(manifest, PCQANet(tiny_model_config), _quick_config(epochs=1,
                       validation_fraction=0.0), SAMPLING, tmp_path / "run")

    assert result.epochs_run == 1
    assert any("fewer than 64" in r.getMessage() for r in caplog.records)


def test_empty_split_rejected(tmp_path, tiny_model_config):
    with pytest.raises(DataError):
        train(DatasetManifest(entries=()), PCQANet(tiny_model_config), _quick_config(),
              SAMPLING, tmp_path / "run")


@pytest.mark.slow
def test_overfits_six_clouds(tmp_path):
    """Six gray clouds whose brightness encodes MOS are ranked perfectly after training"""
    manifest = load_manifest(build_dataset(tmp_path / "data", references=6, distortions=1,
                                           points=128))
    assert len({e.mos for e in manifest}) == 6
    cfg = ModelConfig(repeats=(1, 1, 1, 1, 1), grid=8, scale=Fraction(1, 8))
    train_cfg = TrainConfig(lr=0.01, momentum=0.9, weight_decay=0.0, batch=8, epochs=50,
                            seed=0, patches_per_cloud_per_epoch=8, validation_fraction=0.0)

    result = train(manifest, PCQANet(cfg, seed=0), train_cfg,
                   SamplingConfig(patch_count=8, points_per_patch=64), tmp_path / "run")

    assert result.best_val_srocc >= 0.95
    assert result.history[-1].train_loss < result.history[0].train_loss
