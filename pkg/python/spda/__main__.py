#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# @Author: José Sánchez-Gallego (gallegoj@uw.edu)
# @Date: 2024-03-15
# @Filename: __main__.py
# @License: BSD 3-clause (http://www.opensource.org/licenses/BSD-3-Clause)

from __future__ import annotations

import sys

import click

from spda import log
from spda.attention import Variant
from spda.commands import (
    build_run_config,
    cmd_benchmark,
    cmd_eval,
    cmd_gradcheck,
    cmd_synth,
    cmd_train,
)
from spda.exceptions import ConfigurationError, SpdaError


VARIANTS = [variant.value for variant in Variant]


def common_options(func):
    """Options shared by every subcommand."""

    func = click.option(
        "--seed",
        type=click.IntRange(min=0),
        help="Master seed. Defaults to the configuration value.",
    )(func)
    func = click.option(
        "--out",
        type=click.Path(file_okay=False),
        help="Output directory.",
    )(func)
    func = click.option(
        "--attention",
        type=click.Choice(VARIANTS),
        help="Attention variant.",
    )(func)
    func = click.option(
        "--strict-paper",
        is_flag=True,
        help="Disable the inner ReLU and the off-diagonal weight; fixed size groups.",
    )(func)

    return func


def _run_config(ctx: click.Context, command: str, **kwargs):
    return build_run_config(command, config_file=ctx.obj["config_file"], **kwargs)


@click.group()
@click.option(
    "-c",
    "--config",
    "config_file",
    type=click.Path(exists=True, dir_okay=False),
    help="Path to the user configuration file.",
)
@click.option(
    "-v",
    "--verbose",
    count=True,
    help="Debug mode. Use additional v for more details.",
)
@click.pass_context
def spda(ctx, config_file, verbose):
    """Second-order geometric attention for volumetric segmentation."""

    ctx.obj = {"verbose": verbose, "config_file": config_file}

    if verbose:
        log.sh.setLevel(0)


@spda.command()
@common_options
@click.option("--force", is_flag=True, help="Overwrite an existing dataset.")
@click.option("--n-cases", type=click.IntRange(min=1), help="Number of cases.")
@click.option("--prevalence", type=float, help="Fraction of lesion-bearing cases.")
@click.pass_context
def synth(ctx, seed, out, attention, strict_paper, force, n_cases, prevalence):
    """Generates a synthetic lesion dataset."""

    if out is None:
        raise click.UsageError("--out is required.")

    run = _run_config(
        ctx,
        "synth",
        seed=seed,
        out=out,
        attention=attention,
        strict_paper=strict_paper,
        force=force,
        overrides={"synth": {"n_cases": n_cases, "prevalence": prevalence}},
    )
    cmd_synth(run)


@spda.command()
@common_options
@click.option(
    "--seeds",
    type=int,
    multiple=True,
    help="Run the suite for several seeds. Can be repeated.",
)
@click.pass_context
def gradcheck(ctx, seed, out, attention, strict_paper, seeds):
    """Verifies every backward pass against finite differences."""

    run = _run_config(
        ctx,
        "gradcheck",
        seed=seed,
        out=out,
        attention=attention,
        strict_paper=strict_paper,
    )

    frame = cmd_gradcheck(run, seeds=list(seeds) or None)
    if not frame.passed.all():
        failed = sorted(set(frame.loc[~frame.passed, "name"]))
        log.error(f"Gradient checks failed: {', '.join(failed)}.")
        ctx.exit(2)


@spda.command()
@common_options
@click.argument("DATASET", type=click.Path(exists=True, file_okay=False))
@click.option("--epochs", type=click.IntRange(min=0), help="Number of epochs.")
@click.option("--holdout", type=click.IntRange(min=0), help="Held out cases.")
@click.option("--paper-scale", is_flag=True, help="Use the 5-level network.")
@click.option("--debug-spd", is_flag=True, help="Log post-ReEig eigenvalues.")
@click.pass_context
def train(
    ctx,
    dataset,
    seed,
    out,
    attention,
    strict_paper,
    epochs,
    holdout,
    paper_scale,
    debug_spd,
):
    """Trains a segmentation model on DATASET."""

    if out is None:
        raise click.UsageError("--out is required.")

    run = _run_config(
        ctx,
        "train",
        seed=seed,
        out=out,
        attention=attention,
        strict_paper=strict_paper,
        paper_scale=paper_scale,
        overrides={"training": {"epochs": epochs, "holdout": holdout}},
        options={"dataset": str(dataset), "debug_spd": debug_spd},
    )
    cmd_train(run, dataset)


@spda.command(name="eval")
@common_options
@click.argument("CHECKPOINT", type=click.Path(exists=True, dir_okay=False))
@click.argument("DATASET", type=click.Path(exists=True, file_okay=False))
@click.option(
    "--split",
    type=click.Choice(["val", "train", "all"]),
    default="val",
    show_default=True,
    help="Cases to evaluate.",
)
@click.option("--plot", is_flag=True, help="Write PR and FROC curve plots.")
@click.pass_context
def eval_(ctx, checkpoint, dataset, seed, out, attention, strict_paper, split, plot):
    """Evaluates CHECKPOINT on DATASET."""

    run = _run_config(
        ctx,
        "eval",
        seed=seed,
        out=out,
        attention=attention,
        strict_paper=strict_paper,
        options={"checkpoint": str(checkpoint), "dataset": str(dataset)},
    )
    report = cmd_eval(run, checkpoint, dataset, split=split, plot=plot)

    click.echo(
        f"DSC={report.dsc:.4f} AP={report.ap:.4f} AUC-ROC={report.auc:.4f} "
        f"Sen@{report.fp_per_patient:g}FP={report.sensitivity:.4f}"
    )


@spda.command()
@common_options
@click.option("--paper-scale", is_flag=True, help="Use the 5-level network.")
@click.pass_context
def benchmark(ctx, seed, out, attention, strict_paper, paper_scale):
    """Trains and evaluates every attention variant on a synthetic dataset."""

    run = _run_config(
        ctx,
        "benchmark",
        seed=seed,
        out=out,
        attention=attention,
        strict_paper=strict_paper,
        paper_scale=paper_scale,
    )

    frame = cmd_benchmark(run)
    click.echo(frame.to_string(index=False))


def main(args: list[str] | None = None) -> int:
    """Runs the command line and maps errors to exit codes.

    Returns 0 on success, 1 on usage or configuration errors, and 2 on runtime,
    IO or numerical failures.

    """

    try:
        result = spda.main(args=args, prog_name="spda", standalone_mode=False)
    except click.ClickException as err:
        err.show()
        return 1
    except click.Abort:
        return 1
    except ConfigurationError as err:
        log.error(str(err))
        return 1
    except OSError as err:
        log.error(f"{err.__class__.__name__}: {err}")
        return 2
    except SpdaError as err:
        log.error(f"{err.__class__.__name__}: {err}")
        return 2

    return result if isinstance(result, int) else 0


if __name__ == "__main__":
    sys.exit(main())
