#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# @Author: José Sánchez-Gallego (gallegoj@uw.edu)
# @Date: 2024-03-10
# @Filename: training.py
# @License: BSD 3-clause (http://www.opensource.org/licenses/BSD-3-Clause)

from __future__ import annotations

import json
import os
import pathlib
from dataclasses import asdict, dataclass

from typing import TYPE_CHECKING, Any, Sequence

import numpy
from rich.progress import BarColumn, MofNCompleteColumn, Progress, TextColumn

from spda import log
from spda.exceptions import NumericalError, SpdaError
from spda.linalg import orthonormality_residual
from spda.optim import RMSprop, StiefelSGD
from spda.segnet import SegModel, dice_bce_loss, save_checkpoint
from spda.tensor import Tensor, backward, no_grad, reset_graph


if TYPE_CHECKING:
    from spda.synthdata import SynthCase


__all__ = [
    "EpochStats",
    "make_optimizers",
    "stack_batch",
    "train_epoch",
    "spd_eigenvalue_floor",
    "fit",
]


@dataclass
class EpochStats:
    """Summary of one training epoch."""

    epoch: int
    mean_loss: float
    mean_grad_norm: float
    max_grad_norm: float
    steps: int
    stiefel_residual: float = 0.0


def make_optimizers(
    model: SegModel,
    section: dict[str, Any] | None = None,
) -> tuple[RMSprop, StiefelSGD]:
    """Returns the Euclidean and Stiefel optimisers for ``model``.

    ``section`` is the ``optimizer`` configuration section.

    """

    section = section or {}

    rmsprop = RMSprop(
        model.euclidean_parameters(),
        lr=section.get("rmsprop_lr", 1e-4),
        alpha=section.get("rmsprop_alpha", 0.99),
        eps=section.get("rmsprop_eps", 1e-8),
    )
    stiefel = StiefelSGD(model.stiefel_parameters(), lr=section.get("stiefel_lr", 0.1))

    return rmsprop, stiefel


def stack_batch(cases: Sequence[SynthCase]) -> tuple[Tensor, numpy.ndarray]:
    """Stacks cases into a ``[B, 3, H, W, D]`` input and a ``[B, 1, H, W, D]`` mask."""

    volume = numpy.stack([case.volume for case in cases])
    mask = numpy.stack([case.mask for case in cases])[:, None].astype(numpy.float64)

    return Tensor(volume), mask


def _grad_norm(model: SegModel) -> float:
    total = 0.0
    for param in model.parameters():
        if param.grad is not None:
            total += float(numpy.sum(param.grad**2))
    return float(numpy.sqrt(total))


def train_epoch(
    model: SegModel,
    dataset: Sequence[SynthCase],
    optimizers: Sequence[RMSprop | StiefelSGD],
    seed: int,
    batch_size: int = 2,
    epoch: int = 0,
) -> EpochStats:
    """Runs one pass over a shuffled dataset.

    The order is drawn from a generator seeded with ``[seed, epoch]``. The
    autodiff graph is reset before every step.

    Raises
    ------
    NumericalError
        If the forward pass, the loss or the gradients become non-finite.
        The message names the epoch and the cases of the offending batch.

    """

    if len(dataset) == 0:
        raise SpdaError("Cannot train on an empty dataset.")

    model.train()

    order = numpy.random.default_rng([seed, epoch]).permutation(len(dataset))

    losses: list[float] = []
    norms: list[float] = []

    for start in range(0, len(order), batch_size):
        batch = [dataset[int(ii)] for ii in order[start : start + batch_size]]

        reset_graph()
        model.zero_grad()

        case_ids = [int(case.case_id) for case in batch]

        volume, mask = stack_batch(batch)
        try:
            loss = dice_bce_loss(model(volume), mask)
        except NumericalError as err:
            reset_graph()
            raise NumericalError(f"Epoch {epoch}, cases {case_ids}: {err}") from err

        if not numpy.isfinite(loss.item()):
            reset_graph()
            raise NumericalError(f"Non-finite loss in epoch {epoch}, cases {case_ids}.")

        backward(loss)

        norm = _grad_norm(model)
        if not numpy.isfinite(norm):
            reset_graph()
            raise NumericalError(
                f"Non-finite gradient in epoch {epoch}, cases {case_ids}."
            )

        for optimizer in optimizers:
            optimizer.step()

        losses.append(loss.item())
        norms.append(norm)

        log.debug(f"Epoch {epoch} step {len(losses)}: loss={losses[-1]:.6f}.")

    reset_graph()

    residuals = [orthonormality_residual(pp.data) for pp in model.stiefel_parameters()]

    return EpochStats(
        epoch=epoch,
        mean_loss=float(numpy.mean(losses)),
        mean_grad_norm=float(numpy.mean(norms)),
        max_grad_norm=float(numpy.max(norms)),
        steps=len(losses),
        stiefel_residual=max(residuals, default=0.0),
    )


def spd_eigenvalue_floor(
    model: SegModel,
    dataset: Sequence[SynthCase],
) -> dict[int, float]:
    """Minimum post-ReEig eigenvalue per level over a forward pass on ``dataset``.

    Batch norm runs in evaluation mode, so the pass does not alter the model.

    """

    model.eval()

    minima: dict[int, float] = {}
    with no_grad():
        for case in dataset:
            eigen_log: list[tuple[int, float]] = []
            volume, _ = stack_batch([case])
            model(volume, eigen_log=eigen_log)
            for level, value in eigen_log:
                minima[level] = min(value, minima.get(level, numpy.inf))

    reset_graph()
    model.train()

    return minima


def fit(
    model: SegModel,
    dataset: Sequence[SynthCase],
    epochs: int,
    seed: int,
    batch_size: int = 2,
    optimizer_config: dict[str, Any] | None = None,
    output: str | os.PathLike | None = None,
    run_config: dict[str, Any] | None = None,
    debug_spd: bool = False,
    progress: bool = True,
) -> list[EpochStats]:
    """Trains ``model`` for a number of epochs.

    Parameters
    ----------
    model
        The model to train, in place.
    dataset
        The training cases.
    epochs
        Number of epochs.
    seed
        Seed of the per-epoch shuffles.
    batch_size
        Cases per optimisation step.
    optimizer_config
        The ``optimizer`` configuration section.
    output
        If set, ``train_log.jsonl`` (one JSON object per epoch) and
        ``model.ckpt`` are written to this directory.
    run_config
        Provenance echoed into the checkpoint header and the first line of
        the training log.
    debug_spd
        Record the minimum eigenvalue of every SOGA descriptor after training.
    progress
        Show a progress bar.

    Returns
    -------
    history
        The statistics of each epoch.

    """

    optimizers = make_optimizers(model, optimizer_config)

    log_file = None
    if output is not None:
        output = pathlib.Path(output)
        output.mkdir(parents=True, exist_ok=True)
        log_file = open(output / "train_log.jsonl", "w")
        if run_config:
            header = json.dumps({"provenance": run_config}, sort_keys=True)
            log_file.write(header + "\n")

    history: list[EpochStats] = []

    try:
        with Progress(
            TextColumn("[progress.description]{task.description}"),
            BarColumn(),
            MofNCompleteColumn(),
            transient=True,
            disable=not progress,
        ) as bar:
            task = bar.add_task("Training", total=epochs)

            for epoch in range(epochs):
                stats = train_epoch(
                    model,
                    dataset,
                    optimizers,
                    seed,
                    batch_size=batch_size,
                    epoch=epoch,
                )
                history.append(stats)

                log.info(
                    f"Epoch {epoch}: loss={stats.mean_loss:.5f} "
                    f"grad_norm={stats.mean_grad_norm:.4g}."
                )

                if log_file:
                    log_file.write(json.dumps(asdict(stats), sort_keys=True) + "\n")
                    log_file.flush()

                bar.update(task, advance=1)

        if debug_spd:
            minima = spd_eigenvalue_floor(model, dataset)
            log.info(f"Minimum post-ReEig eigenvalue per level: {minima}.")
            if log_file:
                levels = {str(kk): vv for kk, vv in minima.items()}
                record = {"spd_min_eigenvalue": levels}
                log_file.write(json.dumps(record, sort_keys=True) + "\n")

    finally:
        if log_file:
            log_file.close()

    if output is not None:
        save_checkpoint(
            model,
            output / "model.ckpt",
            epoch=epochs,
            run_config=run_config,
        )

    return history
