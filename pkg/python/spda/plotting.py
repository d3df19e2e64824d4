#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# @Author: José Sánchez-Gallego (gallegoj@uw.edu)
# @Date: 2024-03-14
# @Filename: plotting.py
# @License: BSD 3-clause (http://www.opensource.org/licenses/BSD-3-Clause)

from __future__ import annotations

import os
import pathlib

from typing import TYPE_CHECKING

import matplotlib.pyplot as plt
import seaborn


if TYPE_CHECKING:
    from spda.evalkit import DetectionReport


__all__ = ["plot_curves"]


def plot_curves(report: DetectionReport, output: str | os.PathLike):
    """Writes ``pr_curve.pdf`` and ``froc.pdf`` to ``output``."""

    output = pathlib.Path(output)
    output.mkdir(parents=True, exist_ok=True)

    seaborn.set_palette("deep")
    seaborn.set_color_codes(palette="deep")

    with plt.ioff():
        with seaborn.axes_style("darkgrid"):
            fig, ax = plt.subplots()

            ax.step(report.pr.recall, report.pr.precision, "b-", where="post")
            ax.set_xlim(0, 1.02)
            ax.set_ylim(0, 1.02)
            ax.set_xlabel("Recall")
            ax.set_ylabel("Precision")
            ax.set_title(f"AP = {report.ap:.3f}")

            fig.savefig(str(output / "pr_curve.pdf"))
            plt.close("all")

            fig, ax = plt.subplots()

            ax.plot(report.froc.mean_fp, report.froc.sensitivity, "r.-")
            ax.axvline(report.fp_per_patient, color="k", ls="dashed", lw=0.8)
            ax.set_ylim(0, 1.02)
            ax.set_xlabel("Mean false positives per case")
            ax.set_ylabel("Sensitivity")
            ax.set_title(
                f"Sensitivity at {report.fp_per_patient:g} FP = "
                f"{report.sensitivity:.3f}"
            )

            fig.savefig(str(output / "froc.pdf"))
            plt.close("all")
