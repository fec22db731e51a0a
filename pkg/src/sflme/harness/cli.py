"""Command line entry point: ``sflme <command> --config FILE [--seed S] [--out DIR]``.

Set SFLME_WORKERS to run seeds in parallel processes; results do not change.
"""

from __future__ import annotations

import dataclasses
import sys

import click

from ..attacks import METHODS
from .config import ConfigError, ExperimentConfig, load
from .pipeline import PipelineError, run_experiment, train_victims
from .report import ReportError, format_table, report


def _load(config: str | None, seed: int | None, out: str | None) -> ExperimentConfig:
    cfg = load(config) if config else ExperimentConfig()
    if seed is not None:
        cfg = cfg.with_overrides(seed=seed, sweep=dataclasses.replace(cfg.sweep, seeds=[seed]))
    if out is not None:
        cfg = cfg.with_overrides(out=out)
    return cfg


def _common(fn):
    fn = click.option("--out", type=click.Path(file_okay=False), help="Output directory (overrides the config).")(fn)
    fn = click.option("--seed", type=click.IntRange(min=0), help="Run this seed only.")(fn)
    fn = click.option("--config", "config", type=click.Path(exists=True, dir_okay=False),
                      help="TOML experiment file; built-in defaults when omitted.")(fn)
    return fn


def _run(cfg: ExperimentConfig) -> None:
    path = run_experiment(cfg)
    click.echo(f"wrote {path}")
    click.echo(format_table(report(path.parent)))


@click.group()
def main() -> None:
    """Split federated learning simulator and gradient-query model-extraction attacks."""


@main.command()
@_common
def train(config, seed, out):
    """Train the clean victim for every seed and split point."""
    cfg = _load(config, seed, out)
    for s, n, acc in train_victims(cfg):
        click.echo(f"seed {s} N={n} victim accuracy {acc:.2f}%")


@main.command()
@_common
@click.option("--method", type=click.Choice(METHODS), required=True)
def attack(config, seed, out, method):
    """Run one extraction attack; reports accuracy and fidelity only."""
    cfg = _load(config, seed, out)
    ev = dataclasses.replace(cfg.eval, mi=False, adv=False)
    _run(cfg.with_overrides(attack=dataclasses.replace(cfg.attack, methods=[method]), eval=ev))


@main.command(name="eval")
@_common
def evaluate(config, seed, out):
    """Full pipeline with the evaluations the config enables."""
    _run(_load(config, seed, out))


@main.command()
@_common
def mi(config, seed, out):
    """Pipeline with model inversion enabled."""
    cfg = _load(config, seed, out)
    _run(cfg.with_overrides(eval=dataclasses.replace(cfg.eval, mi=True)))


@main.command()
@_common
def adv(config, seed, out):
    """Pipeline with adversarial-example transfer enabled."""
    cfg = _load(config, seed, out)
    _run(cfg.with_overrides(eval=dataclasses.replace(cfg.eval, adv=True)))


@main.command()
@_common
def sweep(config, seed, out):
    """The [sweep] grid: every seed and split point."""
    cfg = _load(config, seed, out)
    if not cfg.sweep.n_values and not cfg.sweep.seeds:
        raise click.UsageError("the config has no [sweep] section")
    _run(cfg)


@main.command(name="report")
@click.argument("results_dir", type=click.Path(exists=True))
def report_cmd(results_dir):
    """Median-over-seeds tables for the results under RESULTS_DIR."""
    click.echo(format_table(report(results_dir)))


def run() -> None:
    try:
        main(standalone_mode=False)
    except (ConfigError, PipelineError, ReportError) as err:
        click.echo(f"error: {err}", err=True)
        sys.exit(2)
    except click.ClickException as err:
        err.show()
        sys.exit(err.exit_code)
    except click.exceptions.Abort:
        sys.exit(1)


if __name__ == "__main__":
    run()
