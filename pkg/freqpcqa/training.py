"""
SmoothL1 regression of patch scores onto cloud MOS with momentum SGD

Every epoch crops fresh patches from each training cloud (new FPS seeds),
labels each patch with its cloud's MOS, shuffles, and optimizes in
mini-batches. Cloud quality on a held-out validation slice of the training
references selects the best checkpoint.
"""

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from . import autodiff as ad
from .autodiff import Parameter
from .errors import DataError, NonFiniteGradientError, SamplingError
from .features import Ablation, apply_ablation, assemble_batch
from .metrics import score
from .nn import PCQANet, aggregate_quality, load_model, save_model
from .pc_io import DatasetManifest, ManifestEntry, PointCloud, load_ply
from .sampling import SamplingConfig, extract_patches
from .workers import ordered_map

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "train_loss", "val_srocc", "val_plcc", "wall_seconds")
BEST_CHECKPOINT = "best.pcqw"
LAST_CHECKPOINT = "last.pcqw"
TRAIN_LOG = "train_log.csv"


class TrainConfig(BaseModel):
    """Optimizer and epoch-loop settings"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    lr: float = Field(default=1e-5, gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    weight_decay: float = Field(default=1e-4, ge=0)
    batch: int = Field(default=128, ge=1)
    epochs: int = Field(default=500, ge=1)
    seed: int = Field(default=0, ge=0)
    patches_per_cloud_per_epoch: int = Field(default=100, ge=1)
    ablation: Ablation = Ablation.FULL
    validation_fraction: float = Field(default=0.1, ge=0, lt=1)
    eval_batch: int = Field(default=64, ge=1)


# ==============================================================================
# Loss and optimizer
# ==============================================================================

def smooth_l1(mos: Union[float, Sequence[float]], q: Union[float, Sequence[float]]) -> float:
    """
    0.5 (MOS - Q)^2 when |MOS - Q| < 1, otherwise |MOS - Q| - 0.5,
    averaged over the samples given.
    """
    d = np.abs(np.asarray(mos, dtype=np.float64) - np.asarray(q, dtype=np.float64))
    per_sample = np.where(d < 1.0, 0.5 * d * d, d - 0.5)
    return float(np.mean(per_sample))


def sgd_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, Optional[np.ndarray]],
    velocity: Dict[str, np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float,
    no_decay: Iterable[str] = (),
) -> Dict[str, np.ndarray]:
    """
    One momentum SGD update, applied in place:
        v <- momentum * v + (grad + weight_decay * w)
        w <- w - lr * v

    Args:
        params: name -> weight array, updated in place
        grads: name -> gradient (None skips the parameter)
        velocity: name -> momentum buffer, created on first use
        no_decay: names exempt from weight decay

    Returns:
        the velocity mapping

    Raises:
        NonFiniteGradientError: any gradient holds NaN or inf; nothing is updated
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    exempt = set(no_decay)
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if weight_decay and name not in exempt:
            g = g + weight_decay * w
        v = velocity.get(name)
        v = np.array(g, dtype=w.dtype) if v is None else (momentum * v + g).astype(w.dtype)
        velocity[name] = v
        w -= lr * v
    return velocity


class SGD:
    """Momentum SGD over named model parameters; norm and bias terms skip decay"""

    def __init__(self, named_params: Iterable[Tuple[str, Parameter]], lr: float,
                 momentum: float = 0.9, weight_decay: float = 0.0):
        self.params: Dict[str, Parameter] = dict(named_params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Dict[str, np.ndarray] = {}
        self.no_decay: Set[str] = {name for name, p in self.params.items() if not p.decay}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        sgd_step(
            {name: p.data for name, p in self.params.items()},
            {name: p.grad for name, p in self.params.items()},
            self.velocity,
            self.lr,
            self.momentum,
            self.weight_decay,
            self.no_decay,
        )

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {f"optim.velocity.{name}": v for name, v in self.velocity.items()}

    def load_state_dict(self, tensors: Mapping[str, np.ndarray]):
        prefix = "optim.velocity."
        for key, value in tensors.items():
            if not key.startswith(prefix):
                continue
            name = key[len(prefix):]
            if name in self.params:
                self.velocity[name] = np.array(value, dtype=self.params[name].dtype)


# ==============================================================================
# Prediction
# ==============================================================================

@dataclass
class CloudPrediction:
    """Q_f of one cloud with the patch scores it averages"""
    name: str
    quality: float
    patch_scores: np.ndarray

    def to_dict(self) -> dict:
        return {"name": self.name, "quality": self.quality,
                "patch_scores": [float(s) for s in self.patch_scores]}


def cloud_features(cloud: PointCloud, sampling: SamplingConfig,
                   ablation: Union[Ablation, str] = Ablation.FULL,
                   threads: Optional[int] = 1) -> np.ndarray:
    """[P, 9, G, G] model input for one cloud, ablation applied"""
    patches = extract_patches(cloud, sampling, threads)
    return apply_ablation(assemble_batch(patches, threads), ablation)


def predict_cloud(model: PCQANet, cloud: PointCloud, sampling: SamplingConfig,
                  seed: Optional[int] = None, ablation: Union[Ablation, str] = Ablation.FULL,
                  threads: Optional[int] = 1, batch_size: int = 64) -> CloudPrediction:
    """Score every patch of ``cloud`` and average into Q_f"""
    if seed is not None:
        sampling = sampling.model_copy(update={"seed": seed})
    model.eval()
    scores = model.predict(cloud_features(cloud, sampling, ablation, threads), batch_size)
    return CloudPrediction(name=cloud.name, quality=aggregate_quality(scores),
                           patch_scores=scores)


# ==============================================================================
# Epoch loop
# ==============================================================================

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_srocc: float
    val_plcc: float
    wall_seconds: float

    def to_row(self) -> List[str]:
        return [str(self.epoch), repr(self.train_loss), repr(self.val_srocc),
                repr(self.val_plcc), f"{self.wall_seconds:.3f}"]


@dataclass
class TrainResult:
    best_epoch: int
    best_val_srocc: float
    epochs_run: int
    best_checkpoint: Path
    last_checkpoint: Path
    log_path: Path
    history: List[EpochRecord] = field(default_factory=list)

    def to_dict(self) -> dict:
        data = asdict(self)
        for key in ("best_checkpoint", "last_checkpoint", "log_path"):
            data[key] = str(data[key])
        return data


def validation_references(manifest: DatasetManifest, fraction: float,
                          seed: int) -> Tuple[List[str], List[str]]:
    """
    Hold out whole references for model selection.

    Returns:
        (training reference ids, validation reference ids); validation is
        empty when ``fraction`` is 0 or only one reference exists
    """
    refs = manifest.reference_ids()
    if fraction <= 0 or len(refs) < 2:
        return refs, []
    count = min(max(int(round(fraction * len(refs))), 1), len(refs) - 1)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    held = sorted(refs[i] for i in rng.choice(len(refs), size=count, replace=False))
    return [r for r in refs if r not in held], held


def _load_usable(entries: Sequence[ManifestEntry], points: int,
                 threads: Optional[int]) -> List[Tuple[ManifestEntry, PointCloud]]:
    clouds = ordered_map(lambda e: load_ply(e.path), entries, threads)
    usable = []
    for entry, cloud in zip(entries, clouds):
        if len(cloud) < points:
            logger.warning(f"Skipping '{entry.path}': {len(cloud)} points, fewer than {points}")
            continue
        usable.append((entry, cloud))
    return usable


class Trainer:
    """Runs the epoch loop for one training split"""

    def __init__(self, model: PCQANet, cfg: TrainConfig, sampling: SamplingConfig,
                 out_dir: Union[str, Path], threads: Optional[int] = 1, eval_seed: int = 0):
        self.model = model
        self.cfg = cfg
        self.sampling = sampling
        self.out_dir = Path(out_dir)
        self.threads = threads
        self.eval_seed = eval_seed
        self.optimizer = SGD(model.named_parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)

    @property
    def log_path(self) -> Path:
        return self.out_dir / TRAIN_LOG

    def _epoch_batch(self, clouds: Sequence[Tuple[ManifestEntry, PointCloud]],
                     epoch: int) -> Tuple[np.ndarray, np.ndarray, np.random.Generator]:
        rng = np.random.default_rng(np.random.SeedSequence([self.cfg.seed, epoch]))
        crop_seeds = rng.integers(0, 2**31 - 1, size=len(clouds))
        sampling = self.sampling.model_copy(
            update={"patch_count": self.cfg.patches_per_cloud_per_epoch}
        )

        def crop(item):
            (entry, cloud), crop_seed = item
            cfg = sampling.model_copy(update={"seed": int(crop_seed)})
            return cloud_features(cloud, cfg, self.cfg.ablation)

        features = ordered_map(crop, list(zip(clouds, crop_seeds)), self.threads)
        x = np.concatenate(features)
        y = np.concatenate([
            np.full(len(f), entry.mos, dtype=np.float32)
            for f, (entry, _) in zip(features, clouds)
        ])
        return x, y, rng

    def _validation_features(self, clouds) -> List[np.ndarray]:
        sampling = self.sampling.model_copy(update={"seed": self.eval_seed})
        return ordered_map(
            lambda item: cloud_features(item[1], sampling, self.cfg.ablation), clouds,
            self.threads,
        )

    def _validate(self, features: List[np.ndarray], mos: np.ndarray) -> Tuple[float, float]:
        self.model.eval()
        quality = [aggregate_quality(self.model.predict(f, self.cfg.eval_batch))
                   for f in features]
        metrics = score(quality, mos)
        return metrics.srocc, metrics.plcc

    def run_epoch(self, clouds, epoch: int) -> float:
        x, y, rng = self._epoch_batch(clouds, epoch)
        order = rng.permutation(len(x))
        self.model.train()
        total = 0.0
        for start in range(0, len(order), self.cfg.batch):
            idx = order[start:start + self.cfg.batch]
            self.optimizer.zero_grad()
            pred = self.model(x[idx])
            loss = ad.smooth_l1_loss(pred, y[idx])
            if not math.isfinite(loss.item()):
                raise NonFiniteGradientError("loss")
            ad.backward(loss)
            self.optimizer.step()
            total += loss.item() * len(idx)
            logger.debug(f"epoch {epoch} batch {start // self.cfg.batch}: loss {loss.item():.6f}")
        return total / len(order)

    def _checkpoint(self, path: Path, epoch: int, best_epoch: int, best: float,
                    optimizer: bool):
        extra = {
            "meta.epoch": np.array([epoch], dtype=np.float64),
            "meta.best_epoch": np.array([best_epoch], dtype=np.float64),
            "meta.best_val_srocc": np.array([best], dtype=np.float64),
        }
        if optimizer:
            extra.update(self.optimizer.state_dict())
        save_model(self.model, path, extra)

    def _resume(self, path: Union[str, Path]) -> Tuple[int, int, float]:
        restored, extra = load_model(path, ablation=self.cfg.ablation)
        self.model.load_state_dict(restored.state_dict())
        self.optimizer.load_state_dict(extra)
        epoch = int(extra.get("meta.epoch", np.zeros(1))[0])
        best_epoch = int(extra.get("meta.best_epoch", np.zeros(1))[0])
        best = float(extra.get("meta.best_val_srocc", np.full(1, np.nan))[0])
        logger.info(f"Resuming from {path} after epoch {epoch}")
        return epoch, best_epoch, best

    def _open_log(self, keep_through: int) -> List[EpochRecord]:
        history: List[EpochRecord] = []
        if keep_through > 0 and self.log_path.is_file():
            with open(self.log_path, newline="") as f:
                for row in csv.DictReader(f):
                    if int(row["epoch"]) <= keep_through:
                        history.append(EpochRecord(
                            int(row["epoch"]), float(row["train_loss"]), float(row["val_srocc"]),
                            float(row["val_plcc"]), float(row["wall_seconds"]),
                        ))
        with open(self.log_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(LOG_COLUMNS)
            for record in history:
                writer.writerow(record.to_row())
        return history

    def fit(self, manifest: DatasetManifest,
            resume: Optional[Union[str, Path]] = None) -> TrainResult:
        cfg = self.cfg
        if len(manifest) == 0:
            raise DataError("training split is empty")
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.model.ablation = cfg.ablation

        train_refs, val_refs = validation_references(manifest, cfg.validation_fraction, cfg.seed)
        points = self.sampling.points_per_patch
        train_clouds = _load_usable(
            [e for e in manifest if e.ref_id in set(train_refs)], points, self.threads
        )
        val_clouds = _load_usable(
            [e for e in manifest if e.ref_id in set(val_refs)], points, self.threads
        )
        if len(val_clouds) < 2:
            if val_refs:
                logger.warning("Validation slice too small; folding it into training "
                               "and selecting on training clouds")
            order = {entry.path: i for i, entry in enumerate(manifest)}
            train_clouds = sorted(train_clouds + val_clouds, key=lambda item: order[item[0].path])
            train_refs = sorted(set(train_refs) | set(val_refs))
            val_clouds = train_clouds
        if not train_clouds:
            raise SamplingError(f"no training cloud has at least {points} points")
        logger.info(f"Training on {len(train_clouds)} clouds ({len(train_refs)} references), "
                    f"validating on {len(val_clouds)}")

        val_features = self._validation_features(val_clouds)
        val_mos = np.array([entry.mos for entry, _ in val_clouds])

        start_epoch, best_epoch, best = 0, 0, math.nan
        if resume is not None:
            start_epoch, best_epoch, best = self._resume(resume)
        else:
            mos = np.array([entry.mos for entry, _ in train_clouds])
            self.model.head.bias.data[...] = 0.5 * (mos.min() + mos.max())
        history = self._open_log(start_epoch)

        best_path = self.out_dir / BEST_CHECKPOINT
        last_path = self.out_dir / LAST_CHECKPOINT
        for epoch in range(start_epoch + 1, cfg.epochs + 1):
            started = time.perf_counter()
            loss = self.run_epoch(train_clouds, epoch)
            val_srocc, val_plcc = self._validate(val_features, val_mos)
            record = EpochRecord(epoch, loss, val_srocc, val_plcc, time.perf_counter() - started)
            history.append(record)
            with open(self.log_path, "a", newline="") as f:
                csv.writer(f).writerow(record.to_row())

            improved = best_epoch == 0 or (
                math.isfinite(val_srocc) and not (math.isfinite(best) and val_srocc <= best)
            )
            if improved:
                best_epoch, best = epoch, val_srocc
                self._checkpoint(best_path, epoch, best_epoch, best, optimizer=False)
            self._checkpoint(last_path, epoch, best_epoch, best, optimizer=True)
            logger.info(f"Epoch {epoch}/{cfg.epochs}: loss {loss:.5f}, "
                        f"val SROCC {val_srocc:.4f}, PLCC {val_plcc:.4f}"
                        + (" (best)" if improved else ""))

        return TrainResult(
            best_epoch=best_epoch,
            best_val_srocc=best,
            epochs_run=len(history),
            best_checkpoint=best_path,
            last_checkpoint=last_path,
            log_path=self.log_path,
            history=history,
        )


def train(manifest: DatasetManifest, model: PCQANet, cfg: TrainConfig,
          sampling: SamplingConfig, out_dir: Union[str, Path], threads: Optional[int] = 1,
          resume: Optional[Union[str, Path]] = None, eval_seed: int = 0) -> TrainResult:
    """
    Train ``model`` on the clouds of ``manifest`` (the training side of a
    content-disjoint split) and keep the best checkpoint in ``out_dir``.

    Raises:
        DataError: empty split or no usable cloud
        NonFiniteGradientError: a step produced NaN or inf gradients
    """
    return Trainer(model, cfg, sampling, out_dir, threads, eval_seed).fit(manifest, resume)
