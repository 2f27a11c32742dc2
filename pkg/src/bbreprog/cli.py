"""``bbreprog`` command line: synth, pretrain, adapt, eval, sweep, report."""
from __future__ import annotations

import sys

import click

from .blackbox import METHODS, BlackBoxViolation
from .config import ConfigError, RunConfig
from .nets import DivergenceError
from .workflows import SWEEP_AXES, WorkflowError, cmd_adapt, cmd_eval, cmd_pretrain, cmd_report, cmd_sweep, cmd_synth

EXPECTED = (ConfigError, WorkflowError, BlackBoxViolation, DivergenceError, FloatingPointError, FileNotFoundError, ValueError)

config_opt = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="key = value config file")
seed_opt = click.option("--seed", type=int, default=None, help="overrides the config seed")
out_opt = click.option("--out", type=click.Path(file_okay=False), default=None, help="work directory (overrides paths.work)")
method_opt = click.option("--method", type=click.Choice(METHODS), default="grad_reprog", show_default=True)


def _cfg(config_path, seed) -> RunConfig:
    cfg = RunConfig.load(config_path)
    return cfg.with_values(seed=seed) if seed is not None else cfg


def _run(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except EXPECTED as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(1)


@click.group()
def main():
    """Black-box speaker-embedding adaptation by gradient-estimated reprogramming."""


@main.command()
@config_opt
@seed_opt
@out_opt
@click.option("--force", is_flag=True, help="overwrite an existing dataset")
def synth(config_path, seed, out, force):
    """Generate source/target datasets and trial lists."""
    cfg = _run(_cfg, config_path, seed)
    summary = _run(cmd_synth, cfg, out=out, force=force)
    for split, info in summary["splits"].items():
        click.echo(f"{split}: {info['files']} utterances, {info['speakers']} speakers")


@main.command()
@config_opt
@seed_opt
@out_opt
def pretrain(config_path, seed, out):
    """Train the source-domain embedder that later serves as the black box."""
    cfg = _run(_cfg, config_path, seed)
    meta = _run(cmd_pretrain, cfg, out=out)
    click.echo(f"model {meta['sha256']}  source EER {meta['source_eer']:.2f}%")


@main.command()
@config_opt
@seed_opt
@out_opt
@method_opt
@click.option("--blackbox-strict", is_flag=True, help="refuse methods that need white-box access")
def adapt(config_path, seed, out, method, blackbox_strict):
    """Adapt the frozen model to the target domain."""
    cfg = _run(_cfg, config_path, seed)
    info = _run(cmd_adapt, cfg, method, out=out, blackbox_strict=blackbox_strict)
    acc = info["accounting"]
    click.echo(
        f"{info['label']}: bp_params {acc['bp_params']} ({info['bp_pct']:.4f}%), "
        f"added {acc['added_params']} ({info['add_pct']:.4f}%), "
        f"queries {info['metadata']['train_queries']}"
    )


@main.command("eval")
@config_opt
@seed_opt
@out_opt
@method_opt
def eval_(config_path, seed, out, method):
    """Score the target trial list with an adapted system."""
    cfg = _run(_cfg, config_path, seed)
    res = _run(cmd_eval, cfg, method, out=out)
    click.echo(f"{res['label']}: EER {res['eer']:.2f}%")


@main.command()
@config_opt
@seed_opt
@out_opt
@click.option("--axis", type=click.Choice(SWEEP_AXES), required=True)
@click.option("--values", "values", required=True, help="comma-separated, e.g. 0.2,0.3,0.5")
def sweep(config_path, seed, out, axis, values):
    """Adapt and evaluate once per value of one hyperparameter."""
    cfg = _run(_cfg, config_path, seed)
    try:
        vals = [float(v) for v in values.split(",") if v.strip()]
    except ValueError:
        click.echo(f"error: cannot parse values {values!r}", err=True)
        sys.exit(1)
    md, _ = _run(cmd_sweep, cfg, axis, vals, out=out)
    click.echo(md, nl=False)


@main.command()
@config_opt
@seed_opt
@out_opt
def report(config_path, seed, out):
    """Comparison table over every evaluated method."""
    cfg = _run(_cfg, config_path, seed)
    md, _ = _run(cmd_report, cfg, out=out)
    click.echo(md, nl=False)


if __name__ == "__main__":
    main()
