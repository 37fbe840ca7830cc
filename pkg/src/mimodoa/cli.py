"""Command-line front end.

    mimodoa [--config desk] [--seed N] [--stage-dir runs/a] simulate
    mimodoa ... features
    mimodoa ... train --model mimo
    mimodoa ... infer --model mimo
    mimodoa ... evaluate --model mimo --threshold 0.1
    mimodoa ... sweep
    mimodoa ... report

Global options also read ``MIMODOA_CONFIG``, ``MIMODOA_SEED`` and
``MIMODOA_STAGE_DIR``; config values take ``MIMODOA_<SECTION>__<KEY>``.
Exit codes: 0 success, 1 usage, 2 data error, 3 numeric divergence.
"""
from __future__ import annotations

import logging
import sys

import click

from . import pipeline as pl
from .config import load_config
from .errors import DataError, DivergenceError

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGENCE = 3


class _Group(click.Group):
    """Reports usage errors with exit code 1 (click's default 2 is the data-error code here)."""

    def make_context(self, *a, **kw):
        try:
            return super().make_context(*a, **kw)
        except click.UsageError as exc:
            exc.exit_code = EXIT_USAGE
            raise

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except click.UsageError as exc:
            exc.exit_code = EXIT_USAGE
            raise


class _Ctx:
    def __init__(self, config, seed, stage_dir):
        self.config_path = config
        self.seed = seed
        self.run = pl.RunDir(stage_dir)
        self._cfg = None

    @property
    def cfg(self):
        if self._cfg is None:
            self._cfg = load_config(self.config_path, seed=self.seed)
        return self._cfg


def _guard(fn):
    """Map library errors to exit codes with a one-line message."""
    def wrapper(*a, **kw):
        try:
            return fn(*a, **kw)
        except DivergenceError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_DIVERGENCE)
        except DataError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_DATA)
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


model_opt = click.option("--model", "kind", type=click.Choice(pl.KINDS), required=True,
                         envvar="MIMODOA_MODEL_KIND")
threshold_opt = click.option("--threshold", type=click.FloatRange(0, 1, min_open=True, max_open=True),
                             default=None, envvar="MIMODOA_THRESHOLD", help="Detection threshold.")


@click.group(cls=_Group)
@click.option("--config", "config", default="desk", envvar="MIMODOA_CONFIG", show_default=True,
              help="TOML file or bundled profile name (desk, full).")
@click.option("--seed", type=int, default=None, envvar="MIMODOA_SEED",
              help="Overrides the dataset and training seeds.")
@click.option("--stage-dir", type=click.Path(file_okay=False), default="run", envvar="MIMODOA_STAGE_DIR",
              show_default=True)
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def main(ctx, config, seed, stage_dir, verbose):
    """Simulate, train and evaluate MISO / MIMO DoA estimators."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")
    ctx.obj = _Ctx(config, seed, stage_dir)


@main.command()
@click.pass_obj
@_guard
def simulate(obj):
    """Generate the seeded multi-speaker dataset and its manifest."""
    man = pl.run_simulate(obj.cfg, obj.run)
    counts = ", ".join(f"{k} {v}" for k, v in man["splits"].items())
    click.echo(f"wrote {obj.run.manifest} ({counts})")


@main.command()
@click.pass_obj
@_guard
def features(obj):
    """Cache spectrograms and write MISO / MIMO label files."""
    n = pl.run_features(obj.cfg, obj.run)
    click.echo(f"features and labels for {n} utterances")


@main.command()
@model_opt
@click.pass_obj
@_guard
def train(obj, kind):
    """Train one model kind; writes checkpoint.bin and train_log.csv."""
    def show(row):
        click.echo(f"epoch {row['epoch']:3d}  train {row['train_loss']:.4f}  val {row['val_loss']:.4f}  "
                   f"lr {row['lr']:.2e}")
    _, res = pl.run_train(obj.cfg, obj.run, kind, show)
    click.echo(f"best epoch {res.best_epoch} (val {res.best_val:.4f}) -> {obj.run.model(kind)}")


@main.command()
@model_opt
@click.pass_obj
@_guard
def infer(obj, kind):
    """Run a trained model over the evaluation splits."""
    n = pl.run_infer(obj.cfg, obj.run, kind)
    click.echo(f"{kind}: SPS outputs for {n} utterances in {obj.run.infer(kind)}")


@main.command()
@model_opt
@threshold_opt
@click.pass_obj
@_guard
def evaluate(obj, kind, threshold):
    """Recall / precision / F1 per source count, SIR mode and small-angle subset."""
    rows = pl.run_evaluate(obj.cfg, obj.run, kind, threshold)
    for r in rows:
        click.echo(f"{r['split']:>12} {r['subset']:>11} n={r['n_sources']!s:>3} sir={r['sir_mode']:<6} "
                   f"R {r['recall']:.3f}  P {r['precision']:.3f}  F1 {r['f1']:.3f}")


@main.command()
@click.pass_obj
@_guard
def sweep(obj):
    """Threshold sweep 0.1..0.9 for both models."""
    res = pl.run_sweep(obj.cfg, obj.run)
    for k, rng in res["ranges"].items():
        click.echo(f"{k}: F1 range {rng['f1']['range']:.3f}, recall range {rng['recall']['range']:.3f}")
    click.echo(f"wrote {obj.run.sweep / 'sweep.csv'}")


@main.command()
@threshold_opt
@click.pass_obj
@_guard
def report(obj, threshold):
    """Markdown, CSV and figures comparing MISO and MIMO."""
    path = pl.run_report(obj.cfg, obj.run, threshold)
    click.echo(f"wrote {path}")


if __name__ == "__main__":
    main()
