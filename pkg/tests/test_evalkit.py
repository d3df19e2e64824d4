#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# @Author: José Sánchez-Gallego (gallegoj@uw.edu)
# @Date: 2024-03-16
# @Filename: test_evalkit.py
# @License: BSD 3-clause (http://www.opensource.org/licenses/BSD-3-Clause)

from __future__ import annotations

import json
import math

import numpy
import pandas
import pytest

from spda.evalkit import (
    auc_roc,
    average_precision,
    dsc,
    evaluate,
    extract_candidates,
    find_lesions,
    froc_curve,
    iou,
    match_candidates,
    nearest_rank_percentile,
    sensitivity_at_fp,
    stratify_by_size,
)
from spda.exceptions import SpdaError, SpdaUserWarning


#: Ranked detections over two cases with two lesions: TP, FP, TP.
DETECTIONS = [(0, 0, 0.9, True), (1, 0, 0.8, False), (0, 1, 0.7, True)]


def cube_mask(size=10, corner=2, width=3):
    mask = numpy.zeros((size, size, size), dtype=bool)
    sl = slice(corner, corner + width)
    mask[sl, sl, sl] = True
    return mask


@pytest.fixture()
def oracle_set():
    """Four cases: two with a cube lesion, two without."""

    masks = [cube_mask(corner=1), cube_mask(corner=5, width=4)]
    masks += [numpy.zeros((10, 10, 10), dtype=bool)] * 2

    yield masks


def test_two_blobs():
    prob = numpy.zeros((10, 10, 10))
    prob[1:3, 1:3, 1:3] = 0.6
    prob[6:8, 6:8, 6:8] = 0.9

    candidates = extract_candidates(prob)

    assert [cc.confidence for cc in candidates] == [0.9, 0.6]
    assert [cc.size for cc in candidates] == [8, 8]
    assert len(numpy.intersect1d(candidates[0].voxels, candidates[1].voxels)) == 0


def test_candidate_growth():
    prob = numpy.zeros((10, 10, 10))
    prob[2:6, 2:6, 2:6] = 0.5
    prob[3:5, 3:5, 3:5] = 0.9
    prob[6:8, 2:6, 2:6] = 0.4

    candidates = extract_candidates(prob, grow_fraction=0.5)

    # The 0.5 shell is absorbed (0.5 ≥ 0.45); the 0.4 slab touches the
    # candidate only below the growth limit and never becomes a new one.
    assert len(candidates) == 1
    assert candidates[0].size == 64


def test_candidates_stop_growing():
    prob = numpy.zeros((10, 10, 10))
    prob[2:6, 2:6, 2:6] = 0.3
    prob[3:5, 3:5, 3:5] = 0.9

    candidates = extract_candidates(prob, grow_fraction=0.5)

    assert len(candidates) == 1
    assert candidates[0].size == 8


def test_empty_map():
    assert extract_candidates(numpy.zeros((4, 4, 4))) == []


def test_dsc_and_iou():
    mask = cube_mask()

    assert dsc(mask, mask) == 1.0
    assert dsc(numpy.zeros_like(mask), numpy.zeros_like(mask)) == 1.0
    assert dsc(numpy.zeros_like(mask), mask) == 0.0

    voxels = numpy.flatnonzero(mask)
    assert iou(voxels, voxels) == 1.0
    assert iou(voxels, voxels[:9]) == pytest.approx(9 / 27)


def test_find_lesions():
    mask = cube_mask(corner=1) | cube_mask(corner=6)

    lesions = find_lesions(mask, voxel_volume=2.0)

    assert len(lesions) == 2
    assert [lesion.volume_mm3 for lesion in lesions] == [54.0, 54.0]


def test_match_candidates():
    ious = numpy.array([[0.5, 0.6], [0.0, 0.7], [0.15, 0.2]])

    # Candidate 0 takes lesion 1; candidate 1 is left with nothing above the cut.
    assert match_candidates(ious, iou_min=0.1) == [1, None, 0]


def test_average_precision():
    assert average_precision(DETECTIONS, 2) == pytest.approx(5 / 6)
    assert average_precision(DETECTIONS, 0) == 0.0
    assert average_precision([], 2) == 0.0


def test_froc():
    froc = froc_curve(DETECTIONS, n_lesions=2, n_cases=2)

    assert list(froc["mean_fp"]) == [0.0, 0.5, 0.5]
    assert list(froc["sensitivity"]) == [0.5, 0.5, 1.0]

    assert sensitivity_at_fp(froc, 1.0) == 1.0
    assert sensitivity_at_fp(froc, 0.25) == 0.5
    assert sensitivity_at_fp(pandas.DataFrame(columns=froc.columns), 1.0) == 0.0


def test_sensitivity_budget_never_met():
    froc = froc_curve([(0, 0, 0.9, False), (0, 1, 0.8, True)], 1, 1)

    assert sensitivity_at_fp(froc, 0.5) == 0.0


def test_auc_roc():
    assert auc_roc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)
    assert auc_roc([0.5] * 4, [0, 1, 0, 1]) == 0.5

    with pytest.raises(SpdaError):
        auc_roc([0.1, 0.2], [1, 1])


def random_detections(seed, n_candidates=10):
    rng = numpy.random.default_rng(seed)

    confidences = rng.permutation(n_candidates) / n_candidates + 0.05
    tps = rng.random(n_candidates) < 0.5
    cases = rng.integers(0, 3, size=n_candidates)

    detections = [
        (int(case), index, float(conf), bool(tp))
        for index, (case, conf, tp) in enumerate(zip(cases, confidences, tps))
    ]

    return detections, int(tps.sum()) + 1


def enumerate_ap(detections, n_lesions):
    ranked = sorted(detections, key=lambda row: -row[2])

    precisions = []
    for cut in range(1, len(ranked) + 1):
        n_tp = sum(1 for row in ranked[:cut] if row[3])
        precisions.append(n_tp / cut)

    total = 0.0
    for rank, row in enumerate(ranked):
        if row[3]:
            total += max(precisions[rank:]) / n_lesions

    return total


def enumerate_auc(scores, labels):
    positives = [ss for ss, ll in zip(scores, labels) if ll]
    negatives = [ss for ss, ll in zip(scores, labels) if not ll]

    wins = 0.0
    for pos in positives:
        for neg in negatives:
            wins += 1.0 if pos > neg else 0.5 if pos == neg else 0.0

    return wins / (len(positives) * len(negatives))


def test_average_precision_three_candidates():
    expected = enumerate_ap(DETECTIONS, 2)

    assert expected == pytest.approx(5 / 6)
    assert average_precision(DETECTIONS, 2) == pytest.approx(expected)


@pytest.mark.parametrize("seed", range(5))
def test_metrics_match_enumeration(seed):
    detections, n_lesions = random_detections(seed)

    ap = average_precision(detections, n_lesions)
    assert ap == pytest.approx(enumerate_ap(detections, n_lesions))

    froc = froc_curve(detections, n_lesions, n_cases=3)
    for threshold, mean_fp, sensitivity in froc.itertuples(index=False):
        selected = [row for row in detections if row[2] >= threshold]
        n_tp = sum(1 for row in selected if row[3])
        assert mean_fp == pytest.approx((len(selected) - n_tp) / 3)
        assert sensitivity == pytest.approx(n_tp / n_lesions)

    rng = numpy.random.default_rng(seed)
    scores = rng.integers(0, 4, size=10) / 4
    labels = [True] * 4 + [False] * 6
    assert auc_roc(scores, labels) == pytest.approx(enumerate_auc(scores, labels))


@pytest.mark.parametrize("seed", range(3))
def test_average_precision_monotone_invariance(seed):
    detections, n_lesions = random_detections(seed)
    squashed = [(cc, ii, math.exp(3 * conf), tp) for cc, ii, conf, tp in detections]

    assert average_precision(squashed, n_lesions) == average_precision(
        detections, n_lesions
    )


def test_auc_roc_reversed_scores(rng):
    scores = rng.integers(0, 5, size=12).astype(float)
    labels = rng.permutation([True] * 5 + [False] * 7)

    total = auc_roc(scores, labels) + auc_roc(-scores, labels)
    assert total == pytest.approx(1.0)


def test_dsc_is_symmetric(rng):
    pred = rng.random((6, 6, 6)) > 0.6
    gt = rng.random((6, 6, 6)) > 0.4

    assert dsc(pred, gt) == dsc(gt, pred)
    assert 0.0 < dsc(pred, gt) < 1.0


def test_nearest_rank_percentile():
    values = list(range(1, 11))

    assert nearest_rank_percentile(values, 33) == 4.0
    assert nearest_rank_percentile(values, 66) == 7.0
    assert nearest_rank_percentile([5.0], 33) == 5.0


def test_stratify_fixed():
    groups, thresholds = stratify_by_size(
        [500, 931, 2000, 2337, 3000],
        mode="fixed",
        thresholds_mm3=(931, 2337),
    )

    assert groups == ["small", "medium", "medium", "medium", "large"]
    assert thresholds == (931.0, 2337.0)


def test_stratify_percentile():
    groups, thresholds = stratify_by_size(range(1, 11), mode="percentile")

    assert thresholds == (4.0, 7.0)
    assert groups.count("small") == 3
    assert groups.count("large") == 3

    with pytest.raises(SpdaError):
        stratify_by_size([])


def test_evaluate_oracle(oracle_set, tmp_path):
    probs = [mask.astype(float) for mask in oracle_set]

    report = evaluate(probs, oracle_set, section={"size_mode": "fixed"})

    assert report.dsc == 1.0
    assert report.ap == 1.0
    assert report.auc == 1.0
    assert report.sensitivity == 1.0
    assert report.groups["small"]["dsc"] == 1.0

    report.write(tmp_path, extra={"provenance": {"seed": 0}})

    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert metrics["aggregate"]["ap"] == 1.0
    assert metrics["provenance"] == {"seed": 0}
    assert len(pandas.read_csv(tmp_path / "cases.csv")) == 4
    for name in ("pr_curve.csv", "froc.csv"):
        assert (tmp_path / name).exists()


def test_evaluate_zero_predictor(oracle_set):
    probs = [numpy.zeros(mask.shape) for mask in oracle_set]

    with pytest.warns(SpdaUserWarning):
        report = evaluate(probs, oracle_set, section={"size_mode": "percentile"})

    assert report.ap == 0.0
    assert report.sensitivity == 0.0
    assert report.auc == 0.5
    assert report.cases[2].dsc == 1.0
    assert report.cases[0].dsc == 0.0


def test_evaluate_single_class(oracle_set, tmp_path):
    masks = oracle_set[:2]
    probs = [mask.astype(float) for mask in masks]

    with pytest.warns(SpdaUserWarning):
        report = evaluate(probs, masks)

    assert math.isnan(report.auc)

    report.write(tmp_path)
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert metrics["aggregate"]["auc_roc"] is None


def test_evaluate_is_deterministic(oracle_set, rng):
    probs = [rng.random(mask.shape) * 0.5 + 0.5 * mask for mask in oracle_set]

    first = evaluate(probs, oracle_set).to_dict()
    second = evaluate(probs, oracle_set).to_dict()

    assert json.dumps(first, sort_keys=True) == json.dumps(second, sort_keys=True)


def test_plot_curves(oracle_set, tmp_path):
    from spda.plotting import plot_curves

    probs = [mask.astype(float) for mask in oracle_set]
    report = evaluate(probs, oracle_set, section={"size_mode": "fixed"})

    plot_curves(report, tmp_path)

    assert (tmp_path / "pr_curve.pdf").exists()
    assert (tmp_path / "froc.pdf").exists()
