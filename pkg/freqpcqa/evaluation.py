"""
Evaluation protocol: content-disjoint splits, cloud scoring, reports

A split keeps every degraded version of a reference on one side. Reports
hold one row per split repeat (SROCC, PLCC, RMSE), their averages, and the
per-cloud predictions they were computed from.
"""

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from .config import RunConfig, write_echo
from .errors import ConfigError, DataError, ManifestError
from .features import Ablation
from .metrics import MetricSet, score
from .nn import PCQANet, load_model
from .pc_io import DatasetManifest, ManifestEntry, load_manifest, load_ply, write_manifest
from .sampling import SamplingConfig
from .training import predict_cloud, train
from .workers import ordered_map

logger = logging.getLogger(__name__)

ABLATION_LABELS = {
    Ablation.FULL: "Proposed",
    Ablation.NO_RGB: "Without RGB data",
    Ablation.NO_FREQUENCY: "Without Frequency",
}
MAX_SPLIT_DRAWS = 10_000
REPORT_COLUMNS = ("label", "repeat", "srocc", "plcc", "rmse")
CLOUD_COLUMNS = ("label", "repeat", "name", "ref_id", "mos", "predicted")


# ==============================================================================
# Splits
# ==============================================================================

@dataclass
class Split:
    """One train/test partition by reference id"""
    index: int
    train: DatasetManifest
    test: DatasetManifest

    @property
    def train_refs(self) -> List[str]:
        return self.train.reference_ids()

    @property
    def test_refs(self) -> List[str]:
        return self.test.reference_ids()

    def check_disjoint(self):
        shared = set(self.train_refs) & set(self.test_refs)
        if shared:
            raise ManifestError(
                f"split {self.index}: references on both sides: {', '.join(sorted(shared))}"
            )

    def write(self, directory: Union[str, Path]) -> Path:
        """Write ``train.csv`` and ``test.csv`` into ``directory``"""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_manifest(self.train, directory / "train.csv")
        write_manifest(self.test, directory / "test.csv")
        return directory


def load_split(directory: Union[str, Path], check_paths: bool = True) -> Split:
    """
    Read a split folder written by ``Split.write``.

    Raises:
        ManifestError: a manifest is missing or a reference is on both sides
    """
    directory = Path(directory)
    index = int(directory.name) if directory.name.isdigit() else 0
    split = Split(
        index=index,
        train=load_manifest(directory / "train.csv", check_paths),
        test=load_manifest(directory / "test.csv", check_paths),
    )
    split.check_disjoint()
    return split


def train_count(references: int, train_fraction: float) -> int:
    """References on the training side; rounds toward train, keeps one for test"""
    return min(max(math.ceil(train_fraction * references - 1e-9), 1), references - 1)


def make_splits(manifest: DatasetManifest, train_fraction: float = 0.8, repeats: int = 5,
                seed: int = 0, max_draws: int = MAX_SPLIT_DRAWS) -> List[Split]:
    """
    Random content-disjoint splits over reference ids.

    Repeat k draws from its own seed stream; test sets are distinct across
    repeats whenever enough distinct subsets exist.

    Raises:
        ConfigError: train_fraction outside (0, 1), repeats < 1, or no unseen
            test set turned up within ``max_draws`` draws
        DataError: fewer than two reference ids
    """
    if not 0 < train_fraction < 1:
        raise ConfigError(f"train fraction must lie in (0, 1), got {train_fraction}")
    if repeats < 1:
        raise ConfigError(f"repeats must be positive, got {repeats}")
    refs = manifest.reference_ids()
    if len(refs) < 2:
        raise DataError(f"need at least 2 reference ids to split, got {len(refs)}")

    n_train = train_count(len(refs), train_fraction)
    n_test = len(refs) - n_train
    available = math.comb(len(refs), n_test)
    seen = set()
    splits = []
    for k in range(repeats):
        rng = np.random.default_rng(np.random.SeedSequence([seed, k]))
        for _ in range(max_draws):
            test = tuple(sorted(refs[i] for i in rng.permutation(len(refs))[:n_test]))
            if test not in seen or len(seen) >= available:
                break
        else:
            raise ConfigError(
                f"split {k}: no unseen test set of {n_test} references in {max_draws} draws"
            )
        seen.add(test)
        train_refs = [r for r in refs if r not in test]
        splits.append(Split(index=k, train=manifest.subset(train_refs), test=manifest.subset(test)))
        logger.debug(f"Split {k}: test references {', '.join(test)}")
    logger.info(f"Made {repeats} splits of {len(refs)} references: {n_train} train / {n_test} test")
    return splits


def write_splits(splits: Sequence[Split], out_dir: Union[str, Path],
                 config: Optional[Dict[str, Any]] = None) -> List[Path]:
    """One folder per split, named by its index, plus ``config.json``"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    folders = [split.write(out_dir / str(split.index)) for split in splits]
    summary = {
        "config": config or {},
        "splits": [{"index": s.index, "train": s.train_refs, "test": s.test_refs} for s in splits],
    }
    (out_dir / "config.json").write_text(json.dumps(summary, indent=2))
    return folders


# ==============================================================================
# Reports
# ==============================================================================

@dataclass
class RepeatResult:
    repeat: int
    srocc: float
    plcc: float
    rmse: float
    error: Optional[str] = None


@dataclass
class CloudScore:
    repeat: int
    name: str
    ref_id: str
    mos: float
    predicted: float


@dataclass
class EvalReport:
    """Metrics of one method or partition over its split repeats"""
    label: str
    rows: List[RepeatResult] = field(default_factory=list)
    clouds: List[CloudScore] = field(default_factory=list)
    logistic: bool = False
    config: Dict[str, Any] = field(default_factory=dict)

    def add(self, repeat: int, metrics: MetricSet, clouds: Sequence[CloudScore]):
        self.rows.append(RepeatResult(repeat, metrics.srocc, metrics.plcc, metrics.rmse,
                                      metrics.error))
        self.clouds.extend(clouds)

    @property
    def degenerate(self) -> bool:
        return any(row.error is not None for row in self.rows)

    def mean(self, metric: str) -> float:
        values = [getattr(row, metric) for row in self.rows]
        values = [v for v in values if math.isfinite(v)]
        return float(np.mean(values)) if values else math.nan

    @property
    def averages(self) -> Dict[str, float]:
        return {m: self.mean(m) for m in ("srocc", "plcc", "rmse")}

    def to_dict(self) -> dict:
        data = asdict(self)
        data["averages"] = self.averages
        return data


def evaluate(model: PCQANet, test: DatasetManifest, sampling: SamplingConfig, seed: int = 0,
             ablation: Union[Ablation, str] = Ablation.FULL, logistic: bool = False,
             threads: Optional[int] = 1, label: str = "Proposed", repeat: int = 0,
             batch_size: int = 64, report: Optional[EvalReport] = None) -> EvalReport:
    """
    Score every test cloud with fixed-seed patches and compare Q_f to MOS.

    Degenerate metrics (e.g. a constant-output model) leave NaN values and
    the cause in the report row instead of raising.
    """
    model.eval()

    def score_entry(entry: ManifestEntry) -> float:
        cloud = load_ply(entry.path)
        return predict_cloud(model, cloud, sampling, seed, ablation, 1, batch_size).quality

    entries = list(test)
    if not entries:
        raise DataError("test split is empty")
    predicted = ordered_map(score_entry, entries, threads)
    mos = [e.mos for e in entries]
    metrics = score(predicted, mos, logistic)
    clouds = [
        CloudScore(repeat, e.path.stem, e.ref_id, e.mos, float(q))
        for e, q in zip(entries, predicted)
    ]
    report = report or EvalReport(label=label, logistic=logistic)
    report.add(repeat, metrics, clouds)
    logger.info(f"{label} repeat {repeat}: SROCC {metrics.srocc:.4f}, PLCC {metrics.plcc:.4f}, "
                f"RMSE {metrics.rmse:.4f} over {len(entries)} clouds")
    return report


def _number(value: float) -> str:
    return "nan" if not math.isfinite(value) else repr(float(value))


def write_report(reports: Sequence[EvalReport], path: Union[str, Path]) -> List[Path]:
    """
    Write the CSV report, a per-cloud CSV, an aligned text table and a JSON
    sidecar. Returns the paths written.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(REPORT_COLUMNS)
        for report in reports:
            for row in report.rows:
                writer.writerow([report.label, row.repeat, _number(row.srocc),
                                 _number(row.plcc), _number(row.rmse)])
            avg = report.averages
            writer.writerow([report.label, "mean", _number(avg["srocc"]),
                             _number(avg["plcc"]), _number(avg["rmse"])])

    clouds_path = path.with_name(f"{path.stem}_clouds.csv")
    with open(clouds_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CLOUD_COLUMNS)
        for report in reports:
            for c in report.clouds:
                writer.writerow([report.label, c.repeat, c.name, c.ref_id, repr(c.mos),
                                 _number(c.predicted)])

    table_path = path.with_suffix(".txt")
    table_path.write_text(format_table(reports) + "\n")

    json_path = path.with_name(path.name + ".json")
    json_path.write_text(json.dumps([r.to_dict() for r in reports], indent=2, default=str))
    return [path, clouds_path, table_path, json_path]


def format_table(reports: Sequence[EvalReport]) -> str:
    """Aligned rows of averaged SROCC / PLCC / RMSE, one per report"""
    header = ("Method", "SROCC", "PLCC", "RMSE")
    rows = [header]
    for report in reports:
        avg = report.averages
        rows.append((report.label,) + tuple(
            "n/a" if not math.isfinite(avg[m]) else f"{avg[m]:.3f}"
            for m in ("srocc", "plcc", "rmse")
        ))
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = []
    for i, row in enumerate(rows):
        cells = [row[0].ljust(widths[0])] + [row[j].rjust(widths[j]) for j in range(1, len(row))]
        lines.append("  ".join(cells))
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


# ==============================================================================
# Protocol runs
# ==============================================================================

def partition_label(train_fraction: float) -> str:
    train_pct = int(round(train_fraction * 100))
    return f"{train_pct}% / {100 - train_pct}%"


def run_protocol(manifest: DatasetManifest, config: RunConfig, out_dir: Union[str, Path],
                 fractions: Optional[Sequence[float]] = None,
                 ablation: Optional[Union[Ablation, str]] = None,
                 label: Optional[str] = None, threads: Optional[int] = 1) -> List[EvalReport]:
    """
    Train and evaluate on every repeat of ``make_splits`` for each train
    fraction; one report per fraction.

    Args:
        manifest: the whole dataset
        config: run configuration; ``eval.repeats`` and ``eval.split_seed``
                drive the splits
        out_dir: receives ``<fraction>/<repeat>/`` training folders
        fractions: train fractions (default ``eval.fractions``)
        ablation: overrides ``train.ablation`` for training and scoring
        label: report label (default: partition label, or the ablation row
               name when ``ablation`` is given)
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mode = Ablation(ablation) if ablation is not None else config.train.ablation
    train_cfg = config.train.model_copy(update={"ablation": mode})
    fractions = tuple(fractions or config.eval.fractions)
    reports = []
    for fraction in fractions:
        row_label = label or (ABLATION_LABELS[mode] if ablation is not None
                              else partition_label(fraction))
        report = EvalReport(label=row_label, logistic=config.eval.logistic,
                            config=config.echo())
        splits = make_splits(manifest, fraction, config.eval.repeats, config.eval.split_seed)
        for split in splits:
            run_dir = out_dir / f"{int(round(fraction * 100))}" / str(split.index)
            model = PCQANet(config.model, seed=train_cfg.seed)
            result = train(split.train, model, train_cfg, config.sampling, run_dir, threads,
                           eval_seed=config.eval.seed)
            best, _ = load_model(result.best_checkpoint, ablation=mode)
            evaluate(best, split.test, config.sampling, config.eval.seed, mode,
                     config.eval.logistic, threads, row_label, split.index,
                     config.eval.batch_size, report)
        reports.append(report)
    write_echo(config, out_dir / "config.json", fractions=list(fractions), ablation=mode.value)
    return reports
