#!/usr/bin/env python3
"""
freqpcqa command line: patch extraction, splits, training, prediction,
evaluation, ablation and partition sweeps, parameter census, gradient checks.
"""

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

import numpy as np

from . import __version__
from .config import RunConfig, load_run_config, settings, sidecar_path, write_echo
from .errors import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, ConfigError, exit_code_for
from .evaluation import (
    ABLATION_LABELS,
    evaluate,
    format_table,
    load_split,
    make_splits,
    run_protocol,
    write_report,
    write_splits,
)
from .features import Ablation, assemble_batch, write_features
from .gradcheck import run_suite
from .nn import PCQANet, load_model, parameter_census
from .pc_io import load_manifest, load_ply
from .sampling import extract_patches, write_patches
from .training import predict_cloud, train
from .workers import resolve_threads

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
ABLATION_CHOICES = [a.value for a in Ablation]

EPILOG = """
Examples:
  # Cut 100 patches of 1024 points from a cloud into a PCQF1 feature file
  python -m freqpcqa extract --cloud soldier.ply --out soldier.pcqf

  # Five content-disjoint 80/20 splits of a dataset
  python -m freqpcqa split --manifest dataset.csv --fraction 0.8 --repeats 5 --out splits

  # Train on split 0, then evaluate the best checkpoint on its test side
  python -m freqpcqa train --config run.yaml --split splits/0 --out runs/0
  python -m freqpcqa evaluate --ckpt runs/0/best.pcqw --split splits/0 --report report.csv

  # Score one cloud
  python -m freqpcqa predict --ckpt runs/0/best.pcqw --cloud soldier.ply

  # Ablation rows and the train/test partition sweep
  python -m freqpcqa ablate --mode no_rgb no_frequency --manifest dataset.csv --out ablation
  python -m freqpcqa sweep --manifest dataset.csv --fractions 0.5 0.7 0.8 --out sweep

  # Parameter count and gradient checks
  python -m freqpcqa census --config run.yaml
  python -m freqpcqa gradcheck

Exit codes: 0 success, 1 usage or configuration, 2 data error, 3 numeric failure.
"""


class ArgumentParser(argparse.ArgumentParser):
    """argparse with usage errors reported as exit code 1"""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--threads', type=int, default=None,
                        help='Worker threads (default: FREQPCQA_THREADS or all cores)')
    common.add_argument('--log-level', type=str, default=None,
                        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'],
                        help='Logging level (default: FREQPCQA_LOG_LEVEL or INFO)')

    sampling = argparse.ArgumentParser(add_help=False)
    sampling.add_argument('--config', '-c', type=str, help='YAML run configuration')
    sampling.add_argument('--patches', type=int, help='Patches per cloud (P)')
    sampling.add_argument('--points', type=int, help='Points per patch (N, e.g. 1024)')
    sampling.add_argument('--seed', type=int, help='Sampling seed')

    protocol = argparse.ArgumentParser(add_help=False)
    protocol.add_argument('--manifest', '-m', type=str, required=True,
                          help='Dataset manifest CSV (path,mos,ref_id)')
    protocol.add_argument('--out', '-o', type=str, required=True,
                          help='Directory for per-split training runs')
    protocol.add_argument('--report', '-r', type=str,
                          help='Report CSV (default: <out>/report.csv)')
    protocol.add_argument('--repeats', type=int, help='Split repeats per fraction')
    protocol.add_argument('--epochs', type=int, help='Training epochs per split')

    parser = ArgumentParser(
        prog="freqpcqa",
        description="No-reference point cloud quality assessment from coordinates, "
                    "color and frequency features",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=EPILOG,
    )
    parser.add_argument('--version', action='version', version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest='command', help='Commands')

    # Extract
    extract = subparsers.add_parser('extract', parents=[common, sampling],
                                    help='Write the feature tensors of one cloud')
    extract.add_argument('--cloud', type=str, required=True, help='Input PLY file')
    extract.add_argument('--out', '-o', type=str, required=True, help='Output PCQF1 file')
    extract.add_argument('--patches-out', type=str, help='Also write the raw patches (PCQP1)')

    # Split
    split = subparsers.add_parser('split', parents=[common],
                                  help='Write content-disjoint train/test splits')
    split.add_argument('--manifest', '-m', type=str, required=True, help='Dataset manifest CSV')
    split.add_argument('--fraction', type=float, default=0.8,
                       help='Share of references used for training (default: 0.8)')
    split.add_argument('--repeats', type=int, default=5, help='Number of splits (default: 5)')
    split.add_argument('--seed', type=int, default=0, help='Split seed (default: 0)')
    split.add_argument('--out', '-o', type=str, required=True, help='Output directory')

    # Train
    train_parser = subparsers.add_parser('train', parents=[common, sampling],
                                         help='Train on the training side of a split')
    train_parser.add_argument('--split', type=str, required=True, help='Split folder (<dir>/k)')
    train_parser.add_argument('--out', '-o', type=str, required=True, help='Checkpoint directory')
    train_parser.add_argument('--epochs', type=int, help='Training epochs')
    train_parser.add_argument('--lr', type=float, help='Learning rate')
    train_parser.add_argument('--batch', type=int, help='Mini-batch size')
    train_parser.add_argument('--train-seed', type=int, help='Initialization and crop seed')
    train_parser.add_argument('--ablation', choices=ABLATION_CHOICES, help='Dropped attribute')
    train_parser.add_argument('--scale', type=str, help='Width multiplier, e.g. 1/8')
    train_parser.add_argument('--resume', type=str, help='Continue from a last.pcqw checkpoint')

    # Predict
    predict = subparsers.add_parser('predict', parents=[common, sampling],
                                    help='Score one cloud')
    predict.add_argument('--ckpt', type=str, required=True, help='Model checkpoint')
    predict.add_argument('--cloud', type=str, required=True, help='Input PLY file')
    predict.add_argument('--ablation', choices=ABLATION_CHOICES, help='Dropped attribute')
    predict.add_argument('--json', type=str, help='Also write the prediction as JSON')

    # Evaluate
    evaluate_parser = subparsers.add_parser('evaluate', parents=[common, sampling],
                                            help='Evaluate a checkpoint on a test split')
    evaluate_parser.add_argument('--ckpt', type=str, required=True, help='Model checkpoint')
    evaluate_parser.add_argument('--split', type=str, required=True, help='Split folder (<dir>/k)')
    evaluate_parser.add_argument('--report', '-r', type=str, required=True, help='Report CSV')
    evaluate_parser.add_argument('--ablation', choices=ABLATION_CHOICES, help='Dropped attribute')
    evaluate_parser.add_argument('--logistic', action='store_true', default=None,
                                 help='Fit a 4-parameter logistic before PLCC/RMSE')
    evaluate_parser.add_argument('--label', type=str, default='Proposed', help='Report row label')

    # Ablate
    ablate = subparsers.add_parser('ablate', parents=[common, sampling, protocol],
                                   help='Train and evaluate with an attribute dropped')
    ablate.add_argument('--mode', nargs='+', choices=ABLATION_CHOICES, required=True,
                        help='Ablation modes, one report row each')
    ablate.add_argument('--fraction', type=float, help='Train fraction (default: 0.8)')

    # Sweep
    sweep = subparsers.add_parser('sweep', parents=[common, sampling, protocol],
                                  help='Train and evaluate across train/test partitions')
    sweep.add_argument('--fractions', type=float, nargs='+',
                       help='Train fractions (default: 0.5 0.7 0.8)')

    # Census
    census = subparsers.add_parser('census', parents=[common],
                                   help='Count model parameters')
    census.add_argument('--config', '-c', type=str, help='YAML run configuration')
    census.add_argument('--scale', type=str, help='Width multiplier, e.g. 1/8')
    census.add_argument('--ckpt', type=str, help='Count a saved model instead')

    # Gradcheck
    gradcheck = subparsers.add_parser('gradcheck', parents=[common],
                                      help='Finite-difference check of every op and the model')
    gradcheck.add_argument('--seed', type=int, default=0, help='Check seed (default: 0)')
    gradcheck.add_argument('--skip-model', action='store_true',
                           help='Skip the full-model check')
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Nested config overrides from whichever flags the subcommand has"""

    def get(name):
        return getattr(args, name, None)

    return {
        "sampling": {"patch_count": get("patches"), "points_per_patch": get("points"),
                     "seed": get("seed")},
        "model": {"scale": get("scale")},
        "train": {"epochs": get("epochs"), "lr": get("lr"), "batch": get("batch"),
                  "seed": get("train_seed"), "ablation": get("ablation")},
        "eval": {"repeats": get("repeats"), "logistic": get("logistic"),
                 "train_fraction": get("fraction"),
                 "fractions": tuple(get("fractions")) if get("fractions") else None},
    }


def _run_config(args: argparse.Namespace) -> RunConfig:
    return load_run_config(getattr(args, "config", None), _overrides(args))


def _matching_sampling(config: RunConfig, model: PCQANet, args: argparse.Namespace) -> RunConfig:
    """Derive N from the model grid unless it was asked for explicitly"""
    grid = model.cfg.grid
    if config.sampling.grid == grid:
        return config.model_copy(update={"model": model.cfg})
    if args.points is not None:
        raise ConfigError(
            f"--points {args.points} gives a {config.sampling.grid}x{config.sampling.grid} grid "
            f"but the model expects {grid}x{grid}"
        )
    sampling = config.sampling.model_copy(update={"points_per_patch": grid * grid})
    return config.model_copy(update={"sampling": sampling, "model": model.cfg})


def _matching_ablation(config: RunConfig, model: PCQANet) -> RunConfig:
    """Score with the ablation the model was trained with; asking for another is an error"""
    if "ablation" in config.train.model_fields_set and config.train.ablation != model.ablation:
        raise ConfigError(
            f"ablation '{config.train.ablation.value}' requested but the model was trained "
            f"with '{model.ablation.value}'"
        )
    train_cfg = config.train.model_copy(update={"ablation": model.ablation})
    return config.model_copy(update={"train": train_cfg})


# ==============================================================================
# Commands
# ==============================================================================

def cmd_extract(args, threads: int) -> int:
    config = _run_config(args)
    cloud = load_ply(args.cloud)
    started = time.perf_counter()
    patches = extract_patches(cloud, config.sampling, threads)
    features = assemble_batch(patches, threads)
    write_features(features, args.out)
    if args.patches_out:
        write_patches(patches, args.patches_out)
    write_echo(config, sidecar_path(args.out), cloud=str(args.cloud),
               shape=list(features.shape))
    print(f"✓ {cloud.name}: {len(cloud)} points -> {features.shape[0]} feature tensors of "
          f"shape [{', '.join(str(s) for s in features.shape[1:])}] "
          f"({time.perf_counter() - started:.2f}s)")
    print(f"✓ Wrote {args.out}")
    return EXIT_OK


def cmd_split(args, threads: int) -> int:
    manifest = load_manifest(args.manifest)
    splits = make_splits(manifest, args.fraction, args.repeats, args.seed)
    echo = {"manifest": str(args.manifest), "fraction": args.fraction,
            "repeats": args.repeats, "seed": args.seed}
    write_splits(splits, args.out, echo)
    for split in splits:
        print(f"✓ Split {split.index}: {len(split.train_refs)} train references "
              f"({len(split.train)} clouds) / {len(split.test_refs)} test references "
              f"({len(split.test)} clouds)")
    print(f"✓ Wrote {len(splits)} splits to {args.out}")
    return EXIT_OK


def cmd_train(args, threads: int) -> int:
    config = _run_config(args)
    split = load_split(args.split)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_echo(config, out_dir / "config.json", split=str(args.split),
               resume=args.resume)
    model = PCQANet(config.model, seed=config.train.seed)
    result = train(split.train, model, config.train, config.sampling, out_dir, threads,
                   resume=args.resume, eval_seed=config.eval.seed)
    (out_dir / "result.json").write_text(json.dumps(result.to_dict(), indent=2, default=str))
    print(f"✓ Trained {result.epochs_run} epochs; best epoch {result.best_epoch} "
          f"(validation SROCC {result.best_val_srocc:.4f})")
    print(f"✓ Best checkpoint: {result.best_checkpoint}")
    print(f"✓ Training log: {result.log_path}")
    return EXIT_OK


def cmd_predict(args, threads: int) -> int:
    started = time.perf_counter()
    model, _ = load_model(args.ckpt)
    config = _matching_ablation(_matching_sampling(_run_config(args), model, args), model)
    cloud = load_ply(args.cloud)
    prediction = predict_cloud(model, cloud, config.sampling, ablation=config.train.ablation,
                               threads=threads, batch_size=config.eval.batch_size)
    elapsed = time.perf_counter() - started
    print(f"Cloud: {cloud.name} ({len(cloud)} points)")
    print(f"Q_f: {prediction.quality:.6f}")
    print(f"Patch scores ({len(prediction.patch_scores)}):")
    for i, s in enumerate(prediction.patch_scores):
        print(f"  {i:4d}  {s:.6f}")
    print(f"Wall time: {elapsed:.3f}s")
    if args.json:
        payload = prediction.to_dict()
        payload.update(wall_seconds=elapsed, config=config.echo())
        Path(args.json).write_text(json.dumps(payload, indent=2))
    return EXIT_OK if np.isfinite(prediction.quality) else EXIT_NUMERIC


def cmd_evaluate(args, threads: int) -> int:
    model, _ = load_model(args.ckpt)
    config = _matching_ablation(_matching_sampling(_run_config(args), model, args), model)
    split = load_split(args.split)
    report = evaluate(model, split.test, config.sampling, config.eval.seed,
                      config.train.ablation, config.eval.logistic, threads,
                      args.label, split.index, config.eval.batch_size)
    report.config = config.echo()
    paths = write_report([report], args.report)
    print(format_table([report]))
    print(f"✓ Wrote {', '.join(str(p) for p in paths)}")
    for row in report.rows:
        if row.error:
            print(f"❌ Metrics undefined: {row.error}", file=sys.stderr)
    return EXIT_NUMERIC if report.degenerate else EXIT_OK


def _protocol(args, threads: int, reports) -> int:
    report_path = Path(args.report) if args.report else Path(args.out) / "report.csv"
    paths = write_report(reports, report_path)
    print(format_table(reports))
    print(f"✓ Wrote {', '.join(str(p) for p in paths)}")
    return EXIT_NUMERIC if any(r.degenerate for r in reports) else EXIT_OK


def cmd_ablate(args, threads: int) -> int:
    config = _run_config(args)
    manifest = load_manifest(args.manifest)
    reports = []
    for mode in args.mode:
        mode = Ablation(mode)
        reports.extend(run_protocol(
            manifest, config, Path(args.out) / mode.value,
            fractions=[config.eval.train_fraction], ablation=mode,
            label=ABLATION_LABELS[mode], threads=threads,
        ))
    return _protocol(args, threads, reports)


def cmd_sweep(args, threads: int) -> int:
    config = _run_config(args)
    manifest = load_manifest(args.manifest)
    reports = run_protocol(manifest, config, args.out, threads=threads)
    return _protocol(args, threads, reports)


def cmd_census(args, threads: int) -> int:
    if args.ckpt:
        model, _ = load_model(args.ckpt)
    else:
        config = _run_config(args)
        model = PCQANet(config.model)
    census = parameter_census(model)
    width = max(len(name) for name in census.per_stage)
    for name, count in census.per_stage.items():
        print(f"  {name.ljust(width)}  {count:>12,}")
    print(f"  {'total'.ljust(width)}  {census.total:>12,}")
    print(f"Reference: {census.reference:,} parameters; deviation {census.deviation:+,} "
          f"({census.relative_deviation:+.1%})")
    return EXIT_OK


def cmd_gradcheck(args, threads: int) -> int:
    results = run_suite(seed=args.seed, include_model=not args.skip_model)
    width = max(len(r.name) for r in results)
    for r in results:
        mark = "✓" if r.passed else "❌"
        print(f"{mark} {r.name.ljust(width)}  checked {r.checked:5d}  "
              f"max rel {r.max_rel_error:.2e}  (tol {r.tolerance:.0e})")
        if not r.passed:
            print(f"    worst: {r.worst}")
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} gradient checks passed")
    return EXIT_NUMERIC if failed else EXIT_OK


COMMANDS = {
    'extract': cmd_extract,
    'split': cmd_split,
    'train': cmd_train,
    'predict': cmd_predict,
    'evaluate': cmd_evaluate,
    'ablate': cmd_ablate,
    'sweep': cmd_sweep,
    'census': cmd_census,
    'gradcheck': cmd_gradcheck,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        return EXIT_USAGE

    logging.basicConfig(
        level=getattr(logging, (args.log_level or settings.log_level).upper(), logging.INFO),
        format=LOG_FORMAT,
        stream=sys.stderr,
    )
    threads = resolve_threads(args.threads if args.threads is not None else settings.threads)

    try:
        return COMMANDS[args.command](args, threads)
    except KeyboardInterrupt:
        print("\n⚠️  Interrupted", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        parser.print_usage(sys.stderr)
        print(f"❌ Error: {e}", file=sys.stderr)
        return exit_code_for(e)
    except Exception as e:
        logger.debug("Command failed", exc_info=True)
        print(f"❌ Error: {e}", file=sys.stderr)
        return exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())
