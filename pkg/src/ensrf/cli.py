"""Command-line entry points for the experiment harness.

Each subcommand loads a JSON config, runs the experiment and writes
``scores.csv`` plus ``summary.json`` into the output directory.

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 resource
failure.
"""

from __future__ import annotations

import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import experiments, tiled
from .experiments import ConfigError, ResourceFailure
from .filters import NumericalFailure

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_RESOURCE = 4


def _load(config_path, out, seed, threads) -> experiments.ExperimentConfig:
    cfg = experiments.load_config(config_path)
    if out is not None:
        cfg = replace(cfg, output_dir=str(out))
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    tiled.set_threads(threads)
    return cfg


def _emit(cfg, report) -> None:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "scores.csv")
    report.write_summary(out / "summary.json")
    click.echo(f"wrote {out / 'scores.csv'} ({len(report.rows)} rows)")


def _run(runner, config, out, seed, threads):
    try:
        cfg = _load(config, out, seed, threads)
        report = runner(cfg)
        _emit(cfg, report)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except (NumericalFailure, np.linalg.LinAlgError) as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        sys.exit(EXIT_NUMERICAL)
    except (ResourceFailure, MemoryError) as exc:
        click.echo(f"resource failure: {exc}", err=True)
        sys.exit(EXIT_RESOURCE)


_common = [
    click.option("--config", required=True, type=click.Path(exists=False),
                 help="JSON experiment configuration."),
    click.option("--out", default=None, type=click.Path(),
                 help="Output directory (overrides config)."),
    click.option("--seed", default=None, type=int,
                 help="Master seed (overrides config)."),
    click.option("--threads", default=1, type=int, show_default=True,
                 help="Worker threads for tiled operations."),
]


def common_options(fn):
    for opt in reversed(_common):
        fn = opt(fn)
    return fn


@click.group()
def main():
    """Ensemble square-root Kalman filtering experiment harness."""


@main.command()
@common_options
def accuracy(config, out, seed, threads):
    """Repeated-ground-truth accuracy comparison of the configured schemes."""
    _run(experiments.run_accuracy_experiment, config, out, seed, threads)


@main.command()
@common_options
def ordering(config, out, seed, threads):
    """Observation-ordering sensitivity of sequential assimilation."""
    _run(experiments.run_ordering_experiment, config, out, seed, threads)


@main.command("noise-sweep")
@common_options
def noise_sweep(config, out, seed, threads):
    """Accuracy comparison across observation-noise levels."""
    _run(experiments.run_noise_sweep, config, out, seed, threads)


@main.command()
@common_options
def benchmark(config, out, seed, threads):
    """Wall time and peak memory of batch assimilation across dimensions."""
    _run(experiments.run_scaling_benchmark, config, out, seed, threads)


@main.command("validate-config")
@click.option("--config", required=True, type=click.Path(exists=False))
def validate_config(config):
    """Parse and validate a config file without running anything."""
    try:
        cfg = experiments.load_config(config)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    click.echo(f"config ok: grid {cfg.grid_side}x{cfg.grid_side}, "
               f"p={cfg.ensemble_size}, n={cfg.obs_count}, "
               f"schemes={list(cfg.schemes)}")


if __name__ == "__main__":
    main()
