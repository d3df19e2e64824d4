#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# @Author: José Sánchez-Gallego (gallegoj@uw.edu)
# @Date: 2024-03-16
# @Filename: conftest.py
# @License: BSD 3-clause (http://www.opensource.org/licenses/BSD-3-Clause)

from __future__ import annotations

import copy
import json

import numpy
import pytest

import spda
from spda.attention import AttentionConfig
from spda.segnet import UNetConfig
from spda.synthdata import generate_dataset, write_dataset
from spda.tensor import reset_graph


#: Lesion volumes that fit an 8³ grid of 1 mm³ voxels.
TINY_SIZES = ((8, 12), (12, 20), (20, 30))

#: Overrides that shrink every command to a few seconds.
TINY_OVERRIDES = {
    "network": {"levels": 2, "channels": [4, 8]},
    "attention": {"reduction_ratio": 2},
    "synth": {
        "n_cases": 6,
        "shape": [8, 8, 8],
        "voxel_volume": 1.0,
        "size_ranges_mm3": [list(rr) for rr in TINY_SIZES],
    },
    "training": {"epochs": 1, "holdout": 2, "batch_size": 2},
}


@pytest.fixture(autouse=True)
def clean_graph():
    """Every test starts and ends with an empty autodiff graph."""

    reset_graph()
    yield
    reset_graph()


@pytest.fixture()
def config():
    """Yields a copy of the default configuration."""

    yield copy.deepcopy(spda.config)


@pytest.fixture()
def tiny_overrides():
    yield copy.deepcopy(TINY_OVERRIDES)


@pytest.fixture()
def tiny_config_file(tmp_path):
    """A user configuration file with the tiny overrides."""

    # JSON is valid YAML.
    path = tmp_path / "tiny.yml"
    path.write_text(json.dumps(TINY_OVERRIDES))

    yield path


@pytest.fixture()
def rng():
    return numpy.random.default_rng(1234)


@pytest.fixture()
def tiny_unet():
    """A two-level network with SOGA heads."""

    def _build(variant: str = "soga", **kwargs):
        attention = AttentionConfig(variant=variant, reduction_ratio=2)
        return UNetConfig(levels=2, channels=[4, 8], attention=attention, **kwargs)

    return _build


@pytest.fixture(scope="session")
def tiny_cases():
    return generate_dataset(
        6,
        prevalence=0.5,
        shape=(8, 8, 8),
        seed=11,
        voxel_volume=1.0,
        size_ranges_mm3=TINY_SIZES,
    )


@pytest.fixture()
def tiny_dataset(tmp_path, tiny_cases):
    """A dataset directory with the tiny cases."""

    directory = tmp_path / "dataset"
    write_dataset(tiny_cases, directory)

    yield directory
