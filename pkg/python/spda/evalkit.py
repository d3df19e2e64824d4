#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# @Author: José Sánchez-Gallego (gallegoj@uw.edu)
# @Date: 2024-03-12
# @Filename: evalkit.py
# @License: BSD 3-clause (http://www.opensource.org/licenses/BSD-3-Clause)

from __future__ import annotations

import json
import math
import multiprocessing
import os
import pathlib
import warnings
from dataclasses import dataclass, field

from typing import Any, Sequence

import numpy
import pandas
import scipy.ndimage
import scipy.stats

from spda import log
from spda.exceptions import ShapeError, SpdaError, SpdaUserWarning


__all__ = [
    "CONNECTIVITY",
    "DetectionCandidate",
    "GtLesion",
    "CaseEvaluation",
    "DetectionReport",
    "extract_candidates",
    "find_lesions",
    "dsc",
    "iou",
    "match_candidates",
    "detection_table",
    "average_precision",
    "pr_curve",
    "auc_roc",
    "froc_curve",
    "sensitivity_at_fp",
    "nearest_rank_percentile",
    "stratify_by_size",
    "evaluate_case",
    "evaluate",
]


#: 26-connected neighbourhood.
CONNECTIVITY = numpy.ones((3, 3, 3), dtype=bool)

DETECTION_COLUMNS = ["case_id", "index", "confidence", "tp"]


@dataclass
class DetectionCandidate:
    """A lesion candidate extracted from a probability map.

    ``voxels`` are sorted linear indices into the map.

    """

    voxels: numpy.ndarray
    confidence: float

    @property
    def size(self) -> int:
        return len(self.voxels)

    @property
    def lowest_index(self) -> int:
        return int(self.voxels[0])


@dataclass
class GtLesion:
    """A ground-truth lesion (a 26-connected component of the mask)."""

    voxels: numpy.ndarray
    volume_mm3: float
    dsc: float = 0.0


@dataclass
class CaseEvaluation:
    """Per-case results.

    ``ious`` is the ``[n_candidates, n_lesions]`` overlap matrix and ``hits``
    holds, for each candidate in rank order, the index of the lesion it
    matches (or `None`).

    """

    case_id: int
    dsc: float
    patient_score: float
    label: bool
    candidates: list[DetectionCandidate]
    lesions: list[GtLesion]
    ious: numpy.ndarray
    hits: list[int | None]

    @property
    def tp(self) -> int:
        return sum(hit is not None for hit in self.hits)

    @property
    def fp(self) -> int:
        return len(self.hits) - self.tp

    @property
    def fn(self) -> int:
        return len(self.lesions) - self.tp

    def to_row(self) -> dict[str, Any]:
        return {
            "case_id": self.case_id,
            "label": self.label,
            "dsc": self.dsc,
            "patient_score": self.patient_score,
            "n_candidates": len(self.candidates),
            "n_lesions": len(self.lesions),
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
        }


@dataclass
class DetectionReport:
    """Aggregate evaluation of a set of cases."""

    dsc: float
    ap: float
    auc: float
    sensitivity: float
    fp_per_patient: float
    cases: list[CaseEvaluation]
    pr: pandas.DataFrame
    froc: pandas.DataFrame
    groups: dict[str, dict[str, float]] = field(default_factory=dict)
    size_thresholds_mm3: tuple[float, float] | None = None

    def cases_frame(self) -> pandas.DataFrame:
        return pandas.DataFrame([case.to_row() for case in self.cases])

    def to_dict(self) -> dict[str, Any]:
        def _clean(value):
            return None if isinstance(value, float) and math.isnan(value) else value

        return {
            "aggregate": {
                "n_cases": len(self.cases),
                "dsc": _clean(self.dsc),
                "ap": _clean(self.ap),
                "auc_roc": _clean(self.auc),
                "sensitivity_at_fp": _clean(self.sensitivity),
                "fp_per_patient": self.fp_per_patient,
            },
            "size_thresholds_mm3": (
                list(self.size_thresholds_mm3) if self.size_thresholds_mm3 else None
            ),
            "groups": {
                name: {key: _clean(value) for key, value in values.items()}
                for name, values in self.groups.items()
            },
            "cases": [case.to_row() for case in self.cases],
        }

    def write(self, output: str | os.PathLike, extra: dict[str, Any] | None = None):
        """Writes ``metrics.json``, ``cases.csv``, ``pr_curve.csv`` and ``froc.csv``."""

        output = pathlib.Path(output)
        output.mkdir(parents=True, exist_ok=True)

        data = self.to_dict()
        if extra:
            data.update(extra)

        with open(output / "metrics.json", "w") as fd:
            json.dump(data, fd, indent=2, sort_keys=True, default=_json_default)

        self.cases_frame().to_csv(str(output / "cases.csv"), index=False)
        self.pr.to_csv(str(output / "pr_curve.csv"), index=False)
        self.froc.to_csv(str(output / "froc.csv"), index=False)


def _json_default(value):
    if isinstance(value, numpy.generic):
        return value.item()
    raise TypeError(f"Cannot serialise {type(value)}.")


def extract_candidates(
    prob_map: numpy.ndarray,
    threshold_steps: int = 20,
    grow_fraction: float = 0.5,
) -> list[DetectionCandidate]:
    """Turns a probability map into disjoint lesion candidates.

    Thresholds ``k / steps`` are visited for ``k = steps - 1, …, 1``. At each
    threshold the 26-connected components of ``prob_map ≥ t`` are inspected:

    - a component that contains no voxel of an earlier candidate becomes a new
      candidate, with confidence equal to the component maximum;
    - a component that overlaps exactly one candidate adds its free voxels to
      that candidate while ``t ≥ grow_fraction × confidence``;
    - other components are left alone.

    Candidates are returned by decreasing confidence, ties broken by their
    lowest linear index.

    """

    prob = numpy.clip(numpy.asarray(prob_map, dtype=numpy.float64), 0.0, 1.0)

    owner = numpy.full(prob.shape, -1, dtype=int)
    confidences: list[float] = []

    for step in range(threshold_steps - 1, 0, -1):
        threshold = step / threshold_steps

        labels, n_components = scipy.ndimage.label(prob >= threshold, CONNECTIVITY)
        for component in range(1, n_components + 1):
            region = labels == component
            owners = numpy.unique(owner[region])
            owners = owners[owners >= 0]

            if len(owners) == 0:
                owner[region] = len(confidences)
                confidences.append(float(prob[region].max()))
            elif len(owners) == 1:
                cid = int(owners[0])
                if threshold >= grow_fraction * confidences[cid]:
                    owner[region & (owner < 0)] = cid

    flat_owner = owner.ravel()
    candidates = [
        DetectionCandidate(numpy.flatnonzero(flat_owner == cid), confidence)
        for cid, confidence in enumerate(confidences)
    ]

    return sorted(candidates, key=lambda cc: (-cc.confidence, cc.lowest_index))


def find_lesions(mask: numpy.ndarray, voxel_volume: float = 0.75) -> list[GtLesion]:
    """The 26-connected components of a mask, ordered by label."""

    labels, n_components = scipy.ndimage.label(numpy.asarray(mask, bool), CONNECTIVITY)
    flat = labels.ravel()

    lesions = []
    for component in range(1, n_components + 1):
        voxels = numpy.flatnonzero(flat == component)
        lesions.append(GtLesion(voxels, len(voxels) * voxel_volume))

    return lesions


def dsc(pred: numpy.ndarray, gt: numpy.ndarray) -> float:
    """Dice similarity coefficient of two binary masks. Both empty gives 1."""

    pred = numpy.asarray(pred, dtype=bool)
    gt = numpy.asarray(gt, dtype=bool)

    if pred.shape != gt.shape:
        raise ShapeError(f"dsc(): shapes {pred.shape} and {gt.shape} differ.")

    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0

    return 2.0 * int(numpy.sum(pred & gt)) / total


def iou(voxels_a: numpy.ndarray, voxels_b: numpy.ndarray) -> float:
    """Intersection over union of two sets of linear indices."""

    inter = len(numpy.intersect1d(voxels_a, voxels_b, assume_unique=True))
    union = len(voxels_a) + len(voxels_b) - inter

    return inter / union if union > 0 else 0.0


def match_candidates(ious: numpy.ndarray, iou_min: float = 0.1) -> list[int | None]:
    """Greedy one-to-one matching of ranked candidates to lesions.

    Each candidate, in rank order, takes the unmatched lesion with the highest
    IoU if that IoU is at least ``iou_min``.

    """

    ious = numpy.atleast_2d(ious)
    taken: set[int] = set()
    hits: list[int | None] = []

    for row in ious:
        best, best_iou = None, -1.0
        for lesion, value in enumerate(row):
            if lesion in taken or value < iou_min:
                continue
            if value > best_iou:
                best, best_iou = lesion, value
        if best is not None:
            taken.add(best)
        hits.append(best)

    return hits


def _as_detections(detections) -> pandas.DataFrame:
    if isinstance(detections, pandas.DataFrame):
        frame = detections
    else:
        frame = pandas.DataFrame(list(detections), columns=DETECTION_COLUMNS)

    return frame.sort_values(
        ["confidence", "case_id", "index"],
        ascending=[False, True, True],
        kind="mergesort",
    ).reset_index(drop=True)


def detection_table(
    cases: Sequence[CaseEvaluation],
    iou_min: float = 0.1,
    lesion_subset: dict[int, list[int]] | None = None,
) -> tuple[pandas.DataFrame, int]:
    """Ranked candidates of all cases with their TP flag, and the GT count.

    If ``lesion_subset`` maps case ids to lesion indices, only those lesions
    count as ground truth; every candidate stays in the table.

    """

    rows = []
    n_lesions = 0

    for case in cases:
        if lesion_subset is None:
            hits = case.hits
            n_lesions += len(case.lesions)
        else:
            keep = lesion_subset.get(case.case_id, [])
            n_lesions += len(keep)
            hits = match_candidates(case.ious[:, keep], iou_min) if keep else []
            hits = hits or [None] * len(case.candidates)

        for index, (candidate, hit) in enumerate(zip(case.candidates, hits)):
            rows.append((case.case_id, index, candidate.confidence, hit is not None))

    return _as_detections(rows), n_lesions


def pr_curve(detections, n_lesions: int) -> pandas.DataFrame:
    """Precision and recall after each ranked candidate."""

    frame = _as_detections(detections)

    tps = numpy.cumsum(frame["tp"].to_numpy(dtype=float))
    ranks = numpy.arange(1, len(frame) + 1)

    return pandas.DataFrame(
        {
            "threshold": frame["confidence"].to_numpy(),
            "precision": tps / ranks if len(frame) else [],
            "recall": tps / n_lesions if n_lesions > 0 else numpy.zeros(len(frame)),
        }
    )


def average_precision(detections, n_lesions: int) -> float:
    """Area under the all-points interpolated precision-recall curve.

    ``detections`` is a table (or sequence of tuples) with columns ``case_id``,
    ``index``, ``confidence`` and ``tp``. Returns 0 if there are no lesions.

    """

    if n_lesions == 0:
        return 0.0

    curve = pr_curve(detections, n_lesions)
    if len(curve) == 0:
        return 0.0

    precision = curve["precision"].to_numpy()
    recall = curve["recall"].to_numpy()

    envelope = numpy.maximum.accumulate(precision[::-1])[::-1]
    steps = numpy.diff(numpy.concatenate([[0.0], recall]))

    return float(numpy.sum(steps * envelope))


def auc_roc(scores: Sequence[float], labels: Sequence[bool]) -> float:
    """Area under the ROC curve as the normalised Mann-Whitney statistic.

    Raises
    ------
    SpdaError
        If only one class is present.

    """

    scores = numpy.asarray(scores, dtype=numpy.float64)
    labels = numpy.asarray(labels, dtype=bool)

    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos

    if n_pos == 0 or n_neg == 0:
        raise SpdaError("AUC-ROC requires both positive and negative cases.")

    ranks = scipy.stats.rankdata(scores)
    u_stat = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0

    return float(u_stat / (n_pos * n_neg))


def froc_curve(detections, n_lesions: int, n_cases: int) -> pandas.DataFrame:
    """Mean false positives per case and sensitivity at each distinct confidence."""

    frame = _as_detections(detections)

    rows = []
    for threshold in numpy.unique(frame["confidence"].to_numpy())[::-1]:
        selected = frame[frame["confidence"] >= threshold]
        n_tp = int(selected["tp"].sum())
        rows.append(
            {
                "threshold": float(threshold),
                "mean_fp": (len(selected) - n_tp) / max(n_cases, 1),
                "sensitivity": n_tp / n_lesions if n_lesions > 0 else 0.0,
            }
        )

    return pandas.DataFrame(rows, columns=["threshold", "mean_fp", "sensitivity"])


def sensitivity_at_fp(froc: pandas.DataFrame, fp_per_patient: float = 1.0) -> float:
    """Sensitivity at a false-positive budget.

    The highest sensitivity among operating points with mean FP per case within
    the budget. If none qualifies, the sensitivity at the highest threshold.

    """

    if len(froc) == 0:
        return 0.0

    within = froc[froc["mean_fp"] <= fp_per_patient]
    if len(within) == 0:
        return float(froc.sort_values("threshold").iloc[-1]["sensitivity"])

    return float(within["sensitivity"].max())


def nearest_rank_percentile(values: Sequence[float], percent: float) -> float:
    """The value of rank ``ceil(percent / 100 · n)`` in the sorted values."""

    ordered = numpy.sort(numpy.asarray(values, dtype=numpy.float64))
    if len(ordered) == 0:
        raise SpdaError("Percentile of an empty set.")

    rank = max(1, math.ceil(percent / 100.0 * len(ordered)))
    return float(ordered[rank - 1])


def stratify_by_size(
    volumes_mm3: Sequence[float],
    mode: str = "percentile",
    thresholds_mm3: tuple[float, float] = (931.0, 2337.0),
) -> tuple[list[str], tuple[float, float]]:
    """Assigns lesions to the small, medium and large groups.

    With ``mode="fixed"`` the thresholds are ``thresholds_mm3``; with
    ``mode="percentile"`` they are the 33rd and 66th nearest-rank percentiles
    of the volumes. A volume ``v`` is small if ``v < low``, large if
    ``v > high`` and medium otherwise.

    Returns
    -------
    groups, thresholds
        The group of each lesion and the thresholds used.

    """

    volumes = list(volumes_mm3)
    if len(volumes) == 0:
        raise SpdaError("Cannot stratify an empty set of lesions.")

    if mode == "fixed":
        low, high = float(thresholds_mm3[0]), float(thresholds_mm3[1])
    elif mode == "percentile":
        low = nearest_rank_percentile(volumes, 33)
        high = nearest_rank_percentile(volumes, 66)
    else:
        raise ValueError(f"Unknown size mode {mode!r}.")

    groups = []
    for volume in volumes:
        if volume < low:
            groups.append("small")
        elif volume > high:
            groups.append("large")
        else:
            groups.append("medium")

    return groups, (low, high)


def evaluate_case(
    prob_map: numpy.ndarray,
    mask: numpy.ndarray,
    case_id: int = 0,
    voxel_volume: float = 0.75,
    threshold_steps: int = 20,
    grow_fraction: float = 0.5,
    binarize: float = 0.5,
    iou_min: float = 0.1,
) -> CaseEvaluation:
    """Evaluates the probability map of one case against its mask."""

    prob_map = numpy.asarray(prob_map, dtype=numpy.float64)
    mask = numpy.asarray(mask, dtype=bool)

    if prob_map.shape != mask.shape:
        raise ShapeError(f"Map {prob_map.shape} and mask {mask.shape} differ.")

    binary = prob_map >= binarize
    candidates = extract_candidates(prob_map, threshold_steps, grow_fraction)
    lesions = find_lesions(mask, voxel_volume)

    ious = numpy.zeros((len(candidates), len(lesions)))
    for ii, candidate in enumerate(candidates):
        for jj, lesion in enumerate(lesions):
            ious[ii, jj] = iou(candidate.voxels, lesion.voxels)

    # Lesion-level DSC against the predicted components that touch the lesion.
    components, _ = scipy.ndimage.label(binary, CONNECTIVITY)
    flat_components = components.ravel()
    for lesion in lesions:
        touching = numpy.unique(flat_components[lesion.voxels])
        touching = touching[touching > 0]
        predicted = numpy.flatnonzero(numpy.isin(flat_components, touching))
        inter = len(numpy.intersect1d(predicted, lesion.voxels, assume_unique=True))
        lesion.dsc = 2.0 * inter / (len(predicted) + len(lesion.voxels))

    return CaseEvaluation(
        case_id=case_id,
        dsc=dsc(binary, mask),
        patient_score=float(prob_map.max()),
        label=bool(mask.any()),
        candidates=candidates,
        lesions=lesions,
        ious=ious,
        hits=match_candidates(ious, iou_min),
    )


def _group_metrics(
    cases: Sequence[CaseEvaluation],
    members: dict[int, list[int]],
    iou_min: float,
    fp_per_patient: float,
) -> dict[str, float]:
    table, n_lesions = detection_table(cases, iou_min, lesion_subset=members)
    if n_lesions == 0:
        warnings.warn("Empty lesion size group.", SpdaUserWarning)
        return {
            "n_lesions": 0,
            "dsc": math.nan,
            "ap": math.nan,
            "sensitivity": math.nan,
        }

    froc = froc_curve(table, n_lesions, len(cases))
    lesion_dsc = [
        case.lesions[index].dsc
        for case in cases
        for index in members.get(case.case_id, [])
    ]

    return {
        "n_lesions": n_lesions,
        "dsc": float(numpy.mean(lesion_dsc)),
        "ap": average_precision(table, n_lesions),
        "sensitivity": sensitivity_at_fp(froc, fp_per_patient),
    }


def evaluate(
    prob_maps: Sequence[numpy.ndarray],
    masks: Sequence[numpy.ndarray],
    case_ids: Sequence[int] | None = None,
    section: dict[str, Any] | None = None,
    voxel_volume: float = 0.75,
    processes: int = 1,
) -> DetectionReport:
    """Runs the full evaluation protocol over a set of cases.

    Parameters
    ----------
    prob_maps
        ``[H, W, D]`` probability maps.
    masks
        The matching ground-truth masks.
    case_ids
        Case identifiers. Default to the positions in the list.
    section
        The ``evaluation`` configuration section.
    voxel_volume
        Volume of a voxel in mm³, for size stratification.
    processes
        Cases are evaluated in a pool of this many processes.

    """

    section = section or {}
    if len(prob_maps) != len(masks):
        raise ShapeError("The number of maps and masks differ.")
    if len(prob_maps) == 0:
        raise SpdaError("Nothing to evaluate.")

    case_ids = list(case_ids) if case_ids is not None else list(range(len(masks)))
    iou_min = section.get("iou_min", 0.1)
    fp_budget = section.get("fp_per_patient", 1.0)

    args = [
        (
            prob_map,
            mask,
            case_id,
            voxel_volume,
            section.get("threshold_steps", 20),
            section.get("grow_fraction", 0.5),
            section.get("binarize", 0.5),
            iou_min,
        )
        for prob_map, mask, case_id in zip(prob_maps, masks, case_ids)
    ]

    if processes > 1:
        with multiprocessing.Pool(processes) as pool:
            cases = pool.starmap(evaluate_case, args)
    else:
        cases = [evaluate_case(*arg) for arg in args]

    table, n_lesions = detection_table(cases, iou_min)
    froc = froc_curve(table, n_lesions, len(cases))

    labels = [case.label for case in cases]
    if all(labels) or not any(labels):
        warnings.warn(
            "AUC-ROC is undefined when all cases belong to one class.",
            SpdaUserWarning,
        )
        auc = math.nan
    else:
        auc = auc_roc([case.patient_score for case in cases], labels)

    report = DetectionReport(
        dsc=float(numpy.mean([case.dsc for case in cases])),
        ap=average_precision(table, n_lesions),
        auc=auc,
        sensitivity=sensitivity_at_fp(froc, fp_budget),
        fp_per_patient=fp_budget,
        cases=cases,
        pr=pr_curve(table, n_lesions),
        froc=froc,
    )

    if n_lesions > 0:
        keys = []
        volumes = []
        for case in cases:
            for index, lesion in enumerate(case.lesions):
                keys.append((case.case_id, index))
                volumes.append(lesion.volume_mm3)

        groups, thresholds = stratify_by_size(
            volumes,
            mode=section.get("size_mode", "percentile"),
            thresholds_mm3=tuple(section.get("size_thresholds_mm3", (931, 2337))),
        )
        report.size_thresholds_mm3 = thresholds

        for name in ("small", "medium", "large"):
            members: dict[int, list[int]] = {}
            for (case_id, index), group in zip(keys, groups):
                if group == name:
                    members.setdefault(case_id, []).append(index)
            report.groups[name] = _group_metrics(cases, members, iou_min, fp_budget)

    log.info(
        f"Evaluated {len(cases)} cases: DSC={report.dsc:.4f} AP={report.ap:.4f} "
        f"AUC={report.auc:.4f} Sen@{fp_budget:g}FP={report.sensitivity:.4f}."
    )

    return report
