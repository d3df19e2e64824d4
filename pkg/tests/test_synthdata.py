#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# @Author: José Sánchez-Gallego (gallegoj@uw.edu)
# @Date: 2024-03-16
# @Filename: test_synthdata.py
# @License: BSD 3-clause (http://www.opensource.org/licenses/BSD-3-Clause)

from __future__ import annotations

import json

import numpy
import pytest

from spda.evalkit import find_lesions
from spda.exceptions import ConfigurationError, CorruptFileError, SpdaError
from spda.synthdata import (
    SynthParams,
    case_seed,
    generate_case,
    generate_dataset,
    get_processes,
    load_case,
    read_dataset,
    read_manifest,
    save_case,
    write_dataset,
    zscore_normalize,
)


#: Three lesions of any class fit a 32³ grid of 8 mm³ voxels.
ROOMY = {"shape": (32, 32, 32), "voxel_volume": 8.0}


def test_case_seed():
    seeds = {case_seed(7, index) for index in range(100)}

    assert len(seeds) == 100
    assert case_seed(7, 3) == case_seed(7, 3)
    assert case_seed(7, 3) != case_seed(8, 3)
    assert all(0 <= seed < 2**64 for seed in seeds)


def test_generate_deterministic():
    first = generate_dataset(3, seed=5, **ROOMY)
    second = generate_dataset(3, seed=5, **ROOMY)

    for c1, c2 in zip(first, second):
        numpy.testing.assert_array_equal(c1.volume, c2.volume)
        numpy.testing.assert_array_equal(c1.mask, c2.mask)
        assert c1.lesions == c2.lesions


def test_generate_independent_of_processes():
    serial = generate_dataset(4, seed=5, processes=1, **ROOMY)
    parallel = generate_dataset(4, seed=5, processes=2, **ROOMY)

    for c1, c2 in zip(serial, parallel):
        numpy.testing.assert_array_equal(c1.volume, c2.volume)


def test_case_depends_only_on_index():
    params = SynthParams(n_cases=10, seed=5, **ROOMY)
    dataset = generate_dataset(3, seed=5, **ROOMY)

    case = generate_case(params, 2)

    numpy.testing.assert_array_equal(case.volume, dataset[2].volume)


def test_zscore(tiny_cases):
    for case in tiny_cases:
        assert case.volume.shape == (3, 8, 8, 8)
        axes = (1, 2, 3)
        numpy.testing.assert_allclose(case.volume.mean(axis=axes), 0, atol=1e-12)
        numpy.testing.assert_allclose(case.volume.std(axis=axes), 1, atol=1e-12)


def test_zscore_constant_channel():
    constant = numpy.full((2, 2, 2), 3.0)
    volume = numpy.stack([constant, numpy.arange(8.0).reshape(2, 2, 2)])

    out = zscore_normalize(volume)

    numpy.testing.assert_array_equal(out[0], 0.0)
    assert out[1].std() == pytest.approx(1.0)


@pytest.mark.parametrize("prevalence,label", [(0.0, False), (1.0, True)])
def test_prevalence_extremes(prevalence, label):
    cases = generate_dataset(4, prevalence=prevalence, seed=1, **ROOMY)

    assert all(case.label is label for case in cases)
    assert all(len(case.lesions) == int(label) for case in cases)


def test_lesions_are_separate_components():
    cases = generate_dataset(6, prevalence=1.0, seed=2, max_lesions=3, **ROOMY)

    for case in cases:
        lesions = find_lesions(case.mask, voxel_volume=8.0)
        assert len(lesions) == len(case.lesions)
        assert case.mask.sum() == sum(record.n_voxels for record in case.lesions)

        for record in case.lesions:
            assert record.volume_mm3 == record.n_voxels * 8.0
            assert record.size_class in ("small", "medium", "large")


def test_lesion_contrast():
    case = generate_dataset(1, prevalence=1.0, seed=3, **ROOMY)[0]

    inside = case.volume[:, case.mask].mean(axis=1)
    outside = case.volume[:, ~case.mask].mean(axis=1)

    # The DWI analog is brighter in the lesion.
    assert inside[1] > outside[1]


@pytest.mark.slow
def test_size_mix_proportions():
    cases = generate_dataset(
        50,
        prevalence=1.0,
        size_mix=(0.5, 0.5, 0.0),
        seed=4,
        max_lesions=3,
        **ROOMY,
    )

    classes = [record.size_class for case in cases for record in case.lesions]

    assert "large" not in classes
    assert 0.3 < classes.count("small") / len(classes) < 0.7


def test_placement_failure():
    with pytest.raises(SpdaError):
        generate_dataset(1, prevalence=1.0, shape=(4, 4, 4), size_mix=(0, 0, 1))


@pytest.mark.parametrize(
    "kwargs",
    [
        {"size_mix": (0.5, 0.6, 0.1)},
        {"size_mix": (1.2, -0.1, -0.1)},
        {"prevalence": 1.5},
        {"n_cases": 0},
        {"voxel_volume": 0.0},
        {"shape": (8, 8)},
    ],
)
def test_invalid_params(kwargs):
    with pytest.raises(ConfigurationError):
        SynthParams(**kwargs)


def test_params_from_config(config):
    params = SynthParams.from_config(config["synth"], n_cases=3, prevalence=None)

    assert params.n_cases == 3
    assert params.prevalence == config["synth"]["prevalence"]
    assert params.to_dict()["shape"] == config["synth"]["shape"]


def test_case_file_roundtrip(tiny_cases, tmp_path):
    case = tiny_cases[0]
    path = tmp_path / "case.spda"

    save_case(case, path)
    loaded = load_case(path)

    assert loaded.case_id == case.case_id
    assert loaded.seed == case.seed
    assert loaded.lesions == case.lesions
    numpy.testing.assert_array_equal(loaded.volume, case.volume)
    numpy.testing.assert_array_equal(loaded.mask, case.mask)


def test_case_file_corruption(tiny_cases, tmp_path):
    path = tmp_path / "case.spda"
    save_case(tiny_cases[0], path)
    raw = bytearray(path.read_bytes())

    flipped = bytearray(raw)
    flipped[-100] ^= 0xFF
    (tmp_path / "flipped.spda").write_bytes(bytes(flipped))
    with pytest.raises(CorruptFileError):
        load_case(tmp_path / "flipped.spda")

    (tmp_path / "truncated.spda").write_bytes(bytes(raw[:-20]))
    with pytest.raises(CorruptFileError):
        load_case(tmp_path / "truncated.spda")

    (tmp_path / "magic.spda").write_bytes(b"NOPE" + bytes(raw[4:]))
    with pytest.raises(CorruptFileError):
        load_case(tmp_path / "magic.spda")

    version = bytes(raw[:4]) + b"\x02\x00" + bytes(raw[6:])
    (tmp_path / "version.spda").write_bytes(version)
    with pytest.raises(CorruptFileError):
        load_case(tmp_path / "version.spda")


def test_write_dataset(tiny_cases, tmp_path):
    params = SynthParams(n_cases=len(tiny_cases), seed=11)
    directory = write_dataset(tiny_cases, tmp_path / "data", params=params)

    manifest = read_manifest(directory)
    assert manifest["seed"] == 11
    assert [entry["case_id"] for entry in manifest["cases"]] == list(range(6))
    assert [entry["label"] for entry in manifest["cases"]] == [
        case.label for case in tiny_cases
    ]

    loaded = read_dataset(directory)
    assert [case.case_id for case in loaded] == list(range(6))

    with pytest.raises(SpdaError):
        write_dataset(tiny_cases, directory)

    write_dataset(tiny_cases[:2], directory, force=True)
    assert len(read_dataset(directory)) == 2
    assert len(json.loads((directory / "manifest.json").read_text())["cases"]) == 2


def test_write_dataset_non_empty(tiny_cases, tmp_path):
    (tmp_path / "notes.txt").write_text("keep")

    with pytest.raises(SpdaError, match="not empty"):
        write_dataset(tiny_cases[:1], tmp_path)

    assert not (tmp_path / "manifest.json").exists()

    write_dataset(tiny_cases[:1], tmp_path, force=True)
    assert len(read_dataset(tmp_path)) == 1


def test_write_dataset_existing_empty(tiny_cases, tmp_path):
    write_dataset(tiny_cases[:1], tmp_path)

    assert len(read_dataset(tmp_path)) == 1


def test_read_empty_dataset(tmp_path):
    with pytest.raises(SpdaError):
        read_dataset(tmp_path)

    with pytest.raises(SpdaError):
        read_manifest(tmp_path)


def test_get_processes(monkeypatch):
    monkeypatch.setenv("SPDA_THREADS", "3")
    assert get_processes() == 3
    assert get_processes(2) == 2

    monkeypatch.delenv("SPDA_THREADS")
    assert get_processes() == 1
