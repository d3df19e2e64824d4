#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# @Author: José Sánchez-Gallego (gallegoj@uw.edu)
# @Date: 2024-03-15
# @Filename: commands.py
# @License: BSD 3-clause (http://www.opensource.org/licenses/BSD-3-Clause)

from __future__ import annotations

import copy
import json
import os
import pathlib
from dataclasses import dataclass, field

from typing import Any, Sequence

import pandas
from rich.console import Console
from rich.table import Table

from sdsstools import read_yaml_file

import spda
from spda import __version__, log
from spda.attention import Variant
from spda.evalkit import DetectionReport, evaluate
from spda.exceptions import CheckpointError, ConfigurationError, SpdaError
from spda.gradcheck import CheckBuilder, results_frame, run_suite
from spda.segnet import SegModel, UNetConfig, load_checkpoint
from spda.synthdata import (
    SynthCase,
    SynthParams,
    generate_from_params,
    get_processes,
    read_dataset,
    read_manifest,
    write_dataset,
)
from spda.tensor import reset_graph
from spda.training import EpochStats, fit


__all__ = [
    "RunConfig",
    "build_run_config",
    "split_cases",
    "cmd_synth",
    "cmd_gradcheck",
    "cmd_train",
    "cmd_eval",
    "cmd_benchmark",
]


#: Configuration values restricted to a fixed set of choices.
CHOICES = [
    ("evaluation", "size_mode", ("fixed", "percentile")),
    ("linalg", "eigensolver", ("jacobi", "lapack")),
]


@dataclass
class RunConfig:
    """The resolved configuration of a command invocation.

    ``config`` is the full configuration after the user file and command
    line overrides have been applied. The output directory is not part of
    the provenance so that reruns into different directories produce
    identical artifacts.

    """

    command: str
    config: dict[str, Any]
    seed: int
    out: pathlib.Path | None = None
    force: bool = False
    options: dict[str, Any] = field(default_factory=dict)

    def provenance(self) -> dict[str, Any]:
        return {
            "command": self.command,
            "version": __version__,
            "seed": self.seed,
            "options": self.options,
            "config": self.config,
        }


def _deep_update(base: dict, update: dict):
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value
    return base


def apply_strict_paper(config: dict[str, Any]):
    """Turns off the inner ReLU and the off-diagonal weight; fixed size groups."""

    config["attention"]["inner_relu"] = False
    config["attention"]["sqrt2_offdiag"] = False
    config["evaluation"]["size_mode"] = "fixed"


def build_run_config(
    command: str,
    config_file: str | os.PathLike | None = None,
    seed: int | None = None,
    out: str | os.PathLike | None = None,
    attention: str | None = None,
    strict_paper: bool = False,
    paper_scale: bool = False,
    force: bool = False,
    overrides: dict[str, dict[str, Any]] | None = None,
    options: dict[str, Any] | None = None,
) -> RunConfig:
    """Resolves the configuration of a command.

    The defaults are updated with ``config_file``, then with the command line
    values. Command line values always take precedence. The ``linalg``
    section of the result becomes the process-wide eigensolver setting.

    Raises
    ------
    ConfigurationError
        If a value outside its allowed choices is requested.

    """

    config = copy.deepcopy(spda.config)
    if config_file is not None:
        _deep_update(config, read_yaml_file(str(config_file)))

    seed_section = "synth" if command == "synth" else "training"
    if seed is not None:
        config[seed_section]["seed"] = int(seed)

    if attention is not None:
        config["attention"]["variant"] = attention

    if strict_paper:
        apply_strict_paper(config)

    if paper_scale:
        config["network"].update(config["presets"]["paper"])

    for section, values in (overrides or {}).items():
        config.setdefault(section, {}).update(
            {key: value for key, value in values.items() if value is not None}
        )

    _validate_choices(config)
    spda.config["linalg"].update(config["linalg"])

    options = dict(options or {})
    options.update(
        {
            "attention": attention,
            "strict_paper": strict_paper,
            "paper_scale": paper_scale,
        }
    )

    return RunConfig(
        command=command,
        config=config,
        seed=int(config[seed_section]["seed"]),
        out=pathlib.Path(out) if out is not None else None,
        force=force,
        options=options,
    )


def _validate_choices(config: dict[str, Any]):
    for section, key, choices in CHOICES:
        value = config[section][key]
        if value not in choices:
            raise ConfigurationError(
                f"Invalid {section}.{key} {value!r}. Choose one of {choices}."
            )


def _start_file_logger(out: pathlib.Path | None):
    if out is None:
        return

    out.mkdir(parents=True, exist_ok=True)
    log.start_file_logger(str(out / "spda.log"))


def _model_config(config: dict[str, Any]) -> UNetConfig:
    model_config = UNetConfig.from_config(config)
    model_config.validate()
    return model_config


def split_cases(
    cases: Sequence[SynthCase],
    holdout: int,
) -> tuple[list[SynthCase], list[SynthCase]]:
    """Splits a dataset into training cases and the last ``holdout`` cases."""

    if holdout < 0 or holdout >= len(cases):
        raise ConfigurationError(
            f"Cannot hold out {holdout} of {len(cases)} cases and still train."
        )

    if holdout == 0:
        return list(cases), []

    return list(cases[:-holdout]), list(cases[-holdout:])


def cmd_synth(run: RunConfig) -> pathlib.Path:
    """Generates and writes a synthetic dataset."""

    if run.out is None:
        raise ConfigurationError("An output directory is required.")

    params = SynthParams.from_config(run.config["synth"])

    cases = generate_from_params(params, processes=get_processes())

    return write_dataset(
        cases,
        run.out,
        params=params,
        force=run.force,
        provenance=run.provenance(),
    )


def cmd_gradcheck(
    run: RunConfig,
    seeds: Sequence[int] | None = None,
    extra: Sequence[CheckBuilder] = (),
    console: Console | None = None,
) -> pandas.DataFrame:
    """Runs the finite-difference suite and prints the per-check errors.

    Returns a table with one row per check and seed; the suite passed if the
    ``passed`` column is all true.

    """

    seeds = list(seeds) if seeds is not None else [run.seed]

    frames = [results_frame(run_suite(seed, extra=extra), seed=seed) for seed in seeds]
    frame = pandas.concat(frames, ignore_index=True)

    table = Table(title="Gradient check")
    for column in ("check", "max rel. error", "max abs. error", "abs. floor", "status"):
        table.add_column(column)

    summary = frame.groupby("name", sort=False).agg(
        max_rel_error=("max_rel_error", "max"),
        max_abs_error=("max_abs_error", "max"),
        n_abs_floor=("n_abs_floor", "sum"),
        passed=("passed", "all"),
    )
    for name, row in summary.iterrows():
        table.add_row(
            str(name),
            f"{row.max_rel_error:.2e}",
            f"{row.max_abs_error:.2e}",
            str(int(row.n_abs_floor)),
            "[green]pass[/green]" if row.passed else "[red]FAIL[/red]",
        )

    (console or Console()).print(table)

    if run.out is not None:
        run.out.mkdir(parents=True, exist_ok=True)
        frame.to_csv(str(run.out / "gradcheck.csv"), index=False)
        with open(run.out / "gradcheck.json", "w") as fd:
            data = {"provenance": run.provenance(), "passed": bool(frame.passed.all())}
            json.dump(data, fd, indent=2, sort_keys=True)

    return frame


def cmd_train(run: RunConfig, dataset: str | os.PathLike) -> list[EpochStats]:
    """Trains a model on the training split of a dataset directory."""

    model_config = _model_config(run.config)
    training = run.config["training"]

    cases = read_dataset(dataset)
    train_cases, _ = split_cases(cases, training["holdout"])

    _start_file_logger(run.out)
    log.info(
        f"Training {model_config.attention.variant.value} model on "
        f"{len(train_cases)} cases for {training['epochs']} epochs."
    )

    model = SegModel(model_config, seed=run.seed)

    return fit(
        model,
        train_cases,
        epochs=training["epochs"],
        seed=run.seed,
        batch_size=training["batch_size"],
        optimizer_config=run.config["optimizer"],
        output=run.out,
        run_config=run.provenance(),
        debug_spd=bool(run.options.get("debug_spd", False)),
        progress=bool(run.options.get("progress", True)),
    )


def _voxel_volume(dataset: str | os.PathLike, config: dict[str, Any]) -> float:
    try:
        return float(read_manifest(dataset)["params"]["voxel_volume"])
    except (SpdaError, KeyError):
        return float(config["synth"]["voxel_volume"])


def cmd_eval(
    run: RunConfig,
    checkpoint: str | os.PathLike,
    dataset: str | os.PathLike,
    split: str = "val",
    plot: bool = False,
) -> DetectionReport:
    """Evaluates a checkpoint on a split of a dataset directory."""

    model, header = load_checkpoint(checkpoint)

    variant = header["config"]["attention"]["variant"]
    requested = run.options.get("attention")
    if requested is not None and Variant(requested).value != variant:
        raise CheckpointError(
            f"Checkpoint holds a {variant!r} model, {requested!r} was requested."
        )

    trained_with = header.get("run_config", {}).get("config", {})
    holdout = trained_with.get("training", run.config["training"])["holdout"]

    cases = read_dataset(dataset)
    train_cases, val_cases = split_cases(cases, holdout)

    if split == "val":
        selected = val_cases
    elif split == "train":
        selected = train_cases
    elif split == "all":
        selected = list(cases)
    else:
        raise ConfigurationError(f"Unknown split {split!r}.")

    if len(selected) == 0:
        raise SpdaError(f"The {split!r} split is empty.")

    _start_file_logger(run.out)
    log.info(f"Evaluating {len(selected)} cases of the {split!r} split.")

    prob_maps = [model.predict(case.volume) for case in selected]
    reset_graph()

    report = evaluate(
        prob_maps,
        [case.mask for case in selected],
        case_ids=[case.case_id for case in selected],
        section=run.config["evaluation"],
        voxel_volume=_voxel_volume(dataset, run.config),
        processes=get_processes(),
    )

    if run.out is not None:
        extra = {
            "provenance": run.provenance(),
            "split": split,
            "checkpoint": {
                "epoch": header["epoch"],
                "seed": header["seed"],
                "config": header["config"],
            },
        }
        report.write(run.out, extra=extra)

        if plot:
            from spda.plotting import plot_curves

            plot_curves(report, run.out)

    return report


def cmd_benchmark(run: RunConfig) -> pandas.DataFrame:
    """Trains and evaluates every attention variant on one synthetic dataset.

    Returns one row per variant and seed. ``benchmark.csv`` and a per-variant
    mean and standard deviation summary in ``benchmark.json`` are written to
    the output directory.

    """

    bench = run.config["benchmark"]
    training = run.config["training"]

    params = SynthParams.from_config(
        run.config["synth"],
        n_cases=bench["n_cases"],
        shape=bench["shape"],
        voxel_volume=bench["voxel_volume"],
        seed=run.seed,
    )

    cases = generate_from_params(params, processes=get_processes())
    train_cases, val_cases = split_cases(cases, bench["holdout"])
    if len(val_cases) == 0:
        raise ConfigurationError("The benchmark needs held out cases.")

    _start_file_logger(run.out)

    rows = []
    for variant in bench["variants"]:
        config = copy.deepcopy(run.config)
        config["attention"]["variant"] = variant
        model_config = _model_config(config)

        for seed in bench["seeds"]:
            log.info(f"Benchmark: variant={variant} seed={seed}.")

            model = SegModel(model_config, seed=seed)
            history = fit(
                model,
                train_cases,
                epochs=bench["epochs"],
                seed=seed,
                batch_size=training["batch_size"],
                optimizer_config=config["optimizer"],
                progress=bool(run.options.get("progress", True)),
            )

            prob_maps = [model.predict(case.volume) for case in val_cases]
            reset_graph()

            report = evaluate(
                prob_maps,
                [case.mask for case in val_cases],
                case_ids=[case.case_id for case in val_cases],
                section=config["evaluation"],
                voxel_volume=params.voxel_volume,
                processes=get_processes(),
            )

            rows.append(
                {
                    "variant": variant,
                    "seed": seed,
                    "final_loss": history[-1].mean_loss if history else None,
                    "dsc": report.dsc,
                    "ap": report.ap,
                    "auc_roc": report.auc,
                    "sensitivity_at_fp": report.sensitivity,
                }
            )

    frame = pandas.DataFrame(rows)

    metrics = ["dsc", "ap", "auc_roc", "sensitivity_at_fp"]
    summary = {
        str(variant): {
            metric: {
                "mean": float(group[metric].mean()),
                "std": float(group[metric].std(ddof=0)),
            }
            for metric in metrics
        }
        for variant, group in frame.groupby("variant", sort=False)
    }

    if run.out is not None:
        run.out.mkdir(parents=True, exist_ok=True)
        frame.to_csv(str(run.out / "benchmark.csv"), index=False)
        with open(run.out / "benchmark.json", "w") as fd:
            data = {"provenance": run.provenance(), "summary": summary}
            json.dump(data, fd, indent=2, sort_keys=True)

    for variant, values in summary.items():
        log.info(
            f"{variant}: DSC={values['dsc']['mean']:.4f} AP={values['ap']['mean']:.4f}."
        )

    return frame
