"""
Main entry point for noisy EK-FAC runs.
Handles argument parsing, run directories, logging setup and exit codes.

Sub-commands:
    train    one optimizer on one dataset, StepReport stream + posterior snapshot
    bench    repeated-split regression benchmark with an aggregate table
    verify   property and oracle suite (exit 1 on any failure)
    inspect  per-layer statistics of a saved posterior snapshot
"""

import argparse
import json
import logging
import subprocess
import sys
from datetime import datetime
from pathlib import Path
from typing import List, Optional

import numpy as np

# Add the repository root to path for imports
sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from src import __version__
from src.bench.data import normalize_split, resolve_dataset
from src.bench.harness import render_table, run_benchmark
from src.core.state import RunManifest, TrainSummary, create_manifest
from src.core.trainer import Trainer
from src.utils.config import TrainConfig, config, load_train_config, parse_overrides
from src.utils.errors import ConfigError
from src.verify import FAULTS, run_checks

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

MANIFEST_NAME = "manifest.json"


def setup_logging(run_dir: Optional[Path] = None) -> None:
    """Set up logging configuration, with a log file inside the run directory if given."""
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if run_dir is not None:
        handlers.insert(0, logging.FileHandler(run_dir / config.LOG_FILE_NAME))

    logging.basicConfig(
        level=getattr(logging, config.LOG_LEVEL.upper()),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )


def resolve_version() -> str:
    """git-describe version of the working tree, falling back to the package version."""
    try:
        result = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            check=True,
        )
        return result.stdout.strip() or __version__
    except (OSError, subprocess.CalledProcessError):
        return __version__


def resolve_config(args: argparse.Namespace) -> TrainConfig:
    """Defaults < config file < --override < --seed."""
    overrides = parse_overrides(args.override or [])
    if args.seed is not None:
        overrides["seed"] = args.seed
    return load_train_config(args.config, overrides)


def prepare_run_dir(command: str, out: Optional[str]) -> Path:
    """
    Create the run directory.

    Raises:
        FileExistsError: if the directory already holds a manifest
    """
    if out is not None:
        run_dir = Path(out)
    else:
        run_dir = config.output_root() / f"{command}-{datetime.now():%Y%m%d-%H%M%S}"
    if (run_dir / MANIFEST_NAME).exists():
        raise FileExistsError(f"{run_dir} already contains a run manifest, refusing to overwrite it")
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def write_manifest(run_dir: Path, manifest: RunManifest) -> None:
    manifest.finished_at = datetime.now()
    with open(run_dir / MANIFEST_NAME, "x", encoding="utf-8") as fh:
        fh.write(manifest.model_dump_json(indent=2))


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    run_dir = prepare_run_dir("train", args.out)
    setup_logging(run_dir)
    manifest = create_manifest("train", cfg.snapshot(), resolve_version(), cfg.seed)
    print(f"🚀 Training {cfg.optimizer} on {cfg.dataset} -> {run_dir}")

    try:
        ds = resolve_dataset(
            cfg.dataset,
            delimiter=cfg.delimiter,
            target_column=cfg.target_column,
            size=cfg.synthetic_size,
            features=cfg.synthetic_features,
            seed=cfg.seed,
        )
        train, _, transforms = normalize_split(ds, np.arange(ds.size), np.array([], dtype=int))
        trainer = Trainer(cfg)
        trainer.setup(train.features, train.targets)

        with open(run_dir / "steps.jsonl", "w", encoding="utf-8") as fh:
            reports = trainer.run(on_report=lambda report: fh.write(report.model_dump_json() + "\n"))
        manifest.outputs["steps"] = "steps.jsonl"

        np.savez(run_dir / "posterior.npz", **trainer.snapshot())
        manifest.outputs["posterior"] = "posterior.npz"

        summary: TrainSummary = {
            "optimizer": cfg.optimizer,
            "dataset": ds.name,
            "iterations": len(reports),
            "final_elbo": trainer.final_elbo(),
            "noise_precision": trainer.noise.precision / transforms.y_std ** 2,
        }
        (run_dir / "summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
        manifest.outputs["summary"] = "summary.json"
    finally:
        write_manifest(run_dir, manifest)

    logger.info("training finished after %d iterations", summary["iterations"])
    print(f"✅ {summary['iterations']} iterations, final ELBO {summary['final_elbo']:.4f}")
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    run_dir = prepare_run_dir("bench", args.out)
    setup_logging(run_dir)
    manifest = create_manifest("bench", cfg.snapshot(), resolve_version(), cfg.seed)

    try:
        datasets = [
            resolve_dataset(
                name,
                delimiter=cfg.delimiter,
                target_column=cfg.target_column,
                size=cfg.synthetic_size,
                features=cfg.synthetic_features,
                seed=cfg.seed,
            )
            for name in cfg.datasets
        ]
        print(f"🚀 Benchmarking {', '.join(cfg.optimizers)} on {', '.join(d.name for d in datasets)}")

        with open(run_dir / "splits.jsonl", "w", encoding="utf-8") as fh:

            def on_record(record) -> None:
                logger.info(
                    "%s/%s split %d took %.2fs", record.dataset, record.optimizer, record.split, record.wall_clock
                )
                fh.write(record.model_dump_json(exclude={"wall_clock"}) + "\n")

            results = run_benchmark(cfg, datasets, cfg.optimizers, jobs=args.jobs, on_record=on_record)
        manifest.outputs["splits"] = "splits.jsonl"

        (run_dir / "results.json").write_text(
            json.dumps([result.summary() for result in results], indent=2), encoding="utf-8"
        )
        manifest.outputs["results"] = "results.json"

        table = render_table(results)
        (run_dir / "table.txt").write_text(table + "\n", encoding="utf-8")
        manifest.outputs["table"] = "table.txt"
    finally:
        write_manifest(run_dir, manifest)

    print(table)
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    setup_logging()
    print(f"🔍 Running {args.level} verification suite")
    if args.inject_fault:
        print(f"⚠️  Injecting fault: {args.inject_fault}")
    results = run_checks(level=args.level, seed=args.seed or 0, fault=args.inject_fault)

    for result in results:
        mark = "PASS" if result.passed else "FAIL"
        print(f"  [{mark}] {result.name}: {result.detail} ({result.seconds:.1f}s)")

    failures = [result.name for result in results if not result.passed]
    if failures:
        print(f"❌ {len(failures)} check(s) failed: {', '.join(failures)}")
        return EXIT_VERIFY_FAILED
    print(f"✅ All {len(results)} checks passed")
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace) -> int:
    setup_logging()
    path = Path(args.path)
    if path.is_dir():
        path = path / "posterior.npz"
    if not path.is_file():
        raise FileNotFoundError(f"no posterior snapshot at {path}")

    with np.load(path, allow_pickle=False) as snapshot:
        arrays = {key: snapshot[key] for key in snapshot.files}

    a0, b0, alpha, beta = arrays["noise"]
    print(f"optimizer: {arrays['optimizer']}")
    print(f"noise precision: Gam({alpha:.3f}, {beta:.3f}), E[gamma]={alpha / beta:.4f} (prior Gam({a0:g}, {b0:g}))")
    idx = 0
    while f"layer{idx}_mean" in arrays:
        mean = arrays[f"layer{idx}_mean"]
        line = f"layer {idx}: shape {mean.shape}, |M|_F={np.linalg.norm(mean):.4f}"
        if f"layer{idx}_log_sigma" in arrays:
            sigma = np.exp(arrays[f"layer{idx}_log_sigma"])
            line += f", sigma in [{sigma.min():.3e}, {sigma.max():.3e}]"
        else:
            eig_a, eig_s = arrays[f"layer{idx}_eigvals_A"], arrays[f"layer{idx}_eigvals_S"]
            grid = arrays[f"layer{idx}_variance_grid"]
            line += (
                f", eig(A) in [{eig_a.min():.3e}, {eig_a.max():.3e}]"
                f", eig(S) in [{eig_s.min():.3e}, {eig_s.max():.3e}]"
                f", variances in [{grid.min():.3e}, {grid.max():.3e}]"
            )
        print(line)
        idx += 1
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    """Command-line interface definition."""
    parser = argparse.ArgumentParser(
        prog="noisy-ekfac",
        description="Noisy natural-gradient variational training with EK-FAC curvature.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_opts = argparse.ArgumentParser(add_help=False)
    run_opts.add_argument("--config", help="flat KEY=VALUE configuration file")
    run_opts.add_argument(
        "--override", action="append", metavar="KEY=VALUE", help="override a config value (repeatable)"
    )
    run_opts.add_argument("--seed", type=int, help="random seed, overrides the config value")
    run_opts.add_argument("--out", help="run directory (default: a new directory under the output root)")

    train = sub.add_parser("train", parents=[run_opts], help="train one optimizer on one dataset")
    train.set_defaults(handler=cmd_train)

    bench = sub.add_parser("bench", parents=[run_opts], help="run the regression benchmark")
    bench.add_argument("--jobs", type=int, default=1, help="worker processes for independent splits")
    bench.set_defaults(handler=cmd_bench)

    verify = sub.add_parser("verify", help="run the property and oracle suite")
    verify.add_argument("--level", choices=("fast", "full"), default="fast")
    verify.add_argument("--seed", type=int, help="base seed of the suite")
    verify.add_argument("--inject-fault", choices=FAULTS, help="corrupt the computation on purpose")
    verify.set_defaults(handler=cmd_verify)

    inspect = sub.add_parser("inspect", help="print per-layer statistics of a posterior snapshot")
    inspect.add_argument("path", help="run directory or posterior.npz file")
    inspect.set_defaults(handler=cmd_inspect)
    return parser


def run(argv: Optional[List[str]] = None) -> int:
    """
    Parse arguments and dispatch to a sub-command.

    Returns:
        Process exit code: 0 ok, 1 verify failure, 2 configuration error,
        3 runtime abort
    """
    args = build_parser().parse_args(argv)
    try:
        config.validate()
        if getattr(args, "jobs", 1) < 1:
            raise ConfigError("--jobs must be at least 1")
        return args.handler(args)
    except (ConfigError, FileExistsError) as e:
        print(f"❌ Configuration Error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        print("\n👋 Interrupted")
        logger.info("Run interrupted by user")
        return EXIT_RUNTIME
    except Exception as e:
        print(f"❌ Fatal Error: {e}", file=sys.stderr)
        logger.error(f"Fatal error: {e}", exc_info=True)
        return EXIT_RUNTIME


def main() -> None:
    """Main application entry point."""
    sys.exit(run())


if __name__ == "__main__":
    main()
