#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# @Author: José Sánchez-Gallego (gallegoj@uw.edu)
# @Date: 2024-03-13
# @Filename: gradcheck.py
# @License: BSD 3-clause (http://www.opensource.org/licenses/BSD-3-Clause)

from __future__ import annotations

from dataclasses import dataclass

from typing import Callable, Sequence

import numpy
import pandas

from spda import log
from spda.attention import AttentionConfig, FoaHead, SoaHead, SogaHead
from spda.linalg import qr_orthonormalize
from spda.segnet import dice_bce_loss
from spda.spd import bimap, bire_block, logeig, reeig, spd_pool, upper_triangle_vec
from spda.tensor import (
    Tensor,
    add,
    backward,
    batch_matmul,
    batch_norm3d,
    channel_scale,
    clamp,
    concat,
    conv3d,
    conv_transpose3d,
    div,
    linear,
    log as tlog,
    maxpool3d,
    mul,
    no_grad,
    reduce_mean,
    reduce_sum,
    relu,
    reset_graph,
    reshape,
    sigmoid,
    sub,
    transpose,
    upsample_nearest3d,
)


__all__ = [
    "CheckResult",
    "GradCheck",
    "check_gradients",
    "builtin_checks",
    "run_suite",
    "results_frame",
]


@dataclass
class CheckResult:
    """Outcome of a finite-difference check."""

    name: str
    max_abs_error: float
    max_rel_error: float
    n_checked: int
    n_abs_floor: int
    passed: bool


@dataclass
class GradCheck:
    """A function of some leaves, to be verified against finite differences."""

    name: str
    fn: Callable[[], Tensor]
    leaves: list[Tensor]


CheckBuilder = Callable[[numpy.random.Generator], GradCheck]


def check_gradients(
    check: GradCheck,
    rng: numpy.random.Generator,
    h: float = 1e-5,
    tol: float = 1e-4,
    atol: float = 1e-8,
    max_entries: int = 512,
) -> CheckResult:
    """Compares backward gradients with central differences.

    The output of ``check.fn`` is contracted with a fixed random projection to
    obtain a scalar. Every entry of a leaf is perturbed by ``±h``; leaves larger
    than ``max_entries`` are sampled at random instead. The relative error of
    an entry is ``|a - n| / max(|a|, |n|, 1e-8)``. An entry passes if it is at
    most ``tol``, or if the absolute error is at most ``atol``. Entries that
    pass only through ``atol`` are counted in ``n_abs_floor``.

    """

    for leaf in check.leaves:
        leaf.requires_grad = True
        leaf.grad = None

    reset_graph()
    output = check.fn()
    projection = Tensor(rng.uniform(0.5, 1.5, size=output.shape))
    backward(reduce_sum(mul(output, projection)))
    reset_graph()

    def scalar() -> float:
        with no_grad():
            return float(numpy.sum(check.fn().data * projection.data))

    max_abs = 0.0
    max_rel = 0.0
    passed = True
    n_checked = 0
    n_abs_floor = 0

    for leaf in check.leaves:
        analytic = numpy.zeros(leaf.shape) if leaf.grad is None else leaf.grad
        flat = leaf.data.reshape(-1)

        if flat.size <= max_entries:
            entries = numpy.arange(flat.size)
        else:
            entries = rng.choice(flat.size, size=max_entries, replace=False)

        for index in entries:
            original = flat[index]

            flat[index] = original + h
            f_plus = scalar()
            flat[index] = original - h
            f_minus = scalar()
            flat[index] = original

            numeric = (f_plus - f_minus) / (2.0 * h)
            value = analytic.reshape(-1)[index]

            abs_err = abs(value - numeric)
            rel_err = abs_err / max(abs(value), abs(numeric), 1e-8)

            max_abs = max(max_abs, abs_err)
            max_rel = max(max_rel, rel_err)
            if rel_err > tol:
                if abs_err > atol:
                    passed = False
                else:
                    n_abs_floor += 1

            n_checked += 1

    return CheckResult(check.name, max_abs, max_rel, n_checked, n_abs_floor, passed)


def _spd(rng, dim: int, low: float = 0.5, high: float = 2.0) -> numpy.ndarray:
    basis = qr_orthonormalize(rng.standard_normal((dim, dim)))
    return (basis * rng.uniform(low, high, size=dim)) @ basis.T


def _sym_mixed(rng, dim: int) -> numpy.ndarray:
    # Eigenvalues kept far from the 1e-4 ReEig kink.
    basis = qr_orthonormalize(rng.standard_normal((dim, dim)))
    signs = numpy.where(numpy.arange(dim) % 2, -1.0, 1.0)
    values = rng.uniform(0.2, 1.5, size=dim) * signs
    return (basis * values) @ basis.T


def _volume(rng, *shape) -> Tensor:
    return Tensor(rng.uniform(-1, 1, size=shape))


def _elementwise_checks(rng):
    a, b = _volume(rng, 2, 3), _volume(rng, 3)
    pos = Tensor(rng.uniform(0.5, 2.0, size=(2, 3)))
    x = _volume(rng, 2, 3)

    return [
        GradCheck("add", lambda: add(a, b), [a, b]),
        GradCheck("sub", lambda: sub(a, b), [a, b]),
        GradCheck("mul", lambda: mul(a, b), [a, b]),
        GradCheck("div", lambda: div(a, pos), [a, pos]),
        GradCheck("relu", lambda: relu(x), [x]),
        GradCheck("sigmoid", lambda: sigmoid(x), [x]),
        GradCheck("log", lambda: tlog(pos), [pos]),
        GradCheck("clamp", lambda: clamp(x, -2.0, 2.0), [x]),
    ]


def _shape_checks(rng):
    a, b = _volume(rng, 2, 3, 4), _volume(rng, 2, 4, 5)
    c = _volume(rng, 2, 2, 4)

    return [
        GradCheck("concat", lambda: concat([a, c], 1), [a, c]),
        GradCheck("reshape", lambda: reshape(a, (6, 4)), [a]),
        GradCheck("transpose", lambda: transpose(a, (2, 0, 1)), [a]),
        GradCheck("batch_matmul", lambda: batch_matmul(a, b), [a, b]),
        GradCheck("reduce_sum", lambda: reduce_sum(a, axis=1), [a]),
        GradCheck("reduce_mean", lambda: reduce_mean(a, axis=(0, 2)), [a]),
    ]


def _volume_checks(rng):
    x = _volume(rng, 2, 3, 4, 4, 4)
    coeffs = _volume(rng, 2, 3)
    kernel = _volume(rng, 4, 3, 3, 3, 3)
    bias = _volume(rng, 4)
    tkernel = _volume(rng, 3, 2, 2, 2, 2)
    tbias = _volume(rng, 2)
    weight, lbias = _volume(rng, 5, 3), _volume(rng, 5)
    flat = _volume(rng, 2, 3)
    gamma = Tensor(rng.uniform(0.5, 1.5, size=3))
    beta = _volume(rng, 3)
    running_mean, running_var = numpy.zeros(3), numpy.ones(3)

    def norm():
        return batch_norm3d(x, gamma, beta, running_mean, running_var, training=True)

    return [
        GradCheck("channel_scale", lambda: channel_scale(x, coeffs), [x, coeffs]),
        GradCheck("linear", lambda: linear(flat, weight, lbias), [flat, weight, lbias]),
        GradCheck("conv3d", lambda: conv3d(x, kernel, bias), [x, kernel, bias]),
        GradCheck(
            "conv_transpose3d",
            lambda: conv_transpose3d(x, tkernel, tbias),
            [x, tkernel, tbias],
        ),
        GradCheck("maxpool3d", lambda: maxpool3d(x), [x]),
        GradCheck("upsample_nearest3d", lambda: upsample_nearest3d(x), [x]),
        GradCheck("batch_norm3d", norm, [x, gamma, beta]),
    ]


def _spd_checks(rng):
    features = _volume(rng, 2, 4, 3, 3, 3)
    spd = Tensor(numpy.stack([_spd(rng, 4), _spd(rng, 4)]))
    mixed = Tensor(numpy.stack([_sym_mixed(rng, 4), _sym_mixed(rng, 4)]))
    weight = Tensor(qr_orthonormalize(rng.standard_normal((4, 2))))
    sym = Tensor(_sym_mixed(rng, 4))

    return [
        GradCheck("spd_pool", lambda: spd_pool(features), [features]),
        GradCheck("bimap", lambda: bimap(spd, weight), [spd, weight]),
        GradCheck("reeig", lambda: reeig(mixed, epsilon=1e-4), [mixed]),
        GradCheck("logeig", lambda: logeig(spd), [spd]),
        GradCheck("upper_triangle_vec", lambda: upper_triangle_vec(sym), [sym]),
        GradCheck("bire_block", lambda: bire_block(spd, weight), [spd, weight]),
    ]


def _head_check(name: str, head_class, rng, channels: int = 8):
    config = AttentionConfig(variant=name)
    head = head_class(channels, config, rng)

    # Non-zero biases so that the inner ReLU is not at its kink.
    head.fc1.bias.data = rng.uniform(0.1, 0.5, size=head.fc1.bias.shape)

    f_e = _volume(rng, 1, channels, 4, 4, 4)
    f_d = _volume(rng, 1, channels, 4, 4, 4)

    leaves = [f_e, f_d] + head.parameters()

    return GradCheck(f"{name}_head", lambda: head(f_e, f_d)[0], leaves)


def _head_checks(rng):
    return [
        _head_check("foa", FoaHead, rng),
        _head_check("soa", SoaHead, rng),
        _head_check("soga", SogaHead, rng),
    ]


def _loss_checks(rng):
    pred = Tensor(rng.uniform(0.05, 0.95, size=(2, 1, 4, 4, 4)))
    target = (rng.random((2, 1, 4, 4, 4)) > 0.5).astype(numpy.float64)

    return [GradCheck("dice_bce_loss", lambda: dice_bce_loss(pred, target), [pred])]


def builtin_checks(rng: numpy.random.Generator) -> list[GradCheck]:
    """Every differentiable operation, layer and attention head, plus the loss."""

    return (
        _elementwise_checks(rng)
        + _shape_checks(rng)
        + _volume_checks(rng)
        + _spd_checks(rng)
        + _head_checks(rng)
        + _loss_checks(rng)
    )


def run_suite(
    seed: int = 0,
    extra: Sequence[CheckBuilder] = (),
    h: float = 1e-5,
    tol: float = 1e-4,
) -> list[CheckResult]:
    """Runs the built-in checks, and any ``extra`` builders, for one seed."""

    rng = numpy.random.default_rng(seed)

    checks = builtin_checks(rng) + [builder(rng) for builder in extra]

    results = []
    for check in checks:
        result = check_gradients(check, rng, h=h, tol=tol)
        log.debug(
            f"gradcheck {result.name}: rel={result.max_rel_error:.3g} "
            f"abs={result.max_abs_error:.3g}."
        )
        results.append(result)

    reset_graph()

    return results


def results_frame(results: Sequence[CheckResult], seed: int | None = None):
    """Tabulates results as a `pandas.DataFrame`."""

    frame = pandas.DataFrame([vars(result) for result in results])
    if seed is not None:
        frame.insert(0, "seed", seed)

    return frame
