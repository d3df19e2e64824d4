#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# @Author: José Sánchez-Gallego (gallegoj@uw.edu)
# @Date: 2024-03-16
# @Filename: test_optim.py
# @License: BSD 3-clause (http://www.opensource.org/licenses/BSD-3-Clause)

from __future__ import annotations

import numpy
import pytest

from spda.exceptions import NumericalError, ShapeError
from spda.linalg import orthonormality_residual, qr_orthonormalize
from spda.nn import Parameter
from spda.optim import (
    RMSprop,
    RmspropState,
    StiefelSGD,
    rmsprop_step,
    stiefel_step,
    stiefel_tangent,
)


def test_rmsprop_step():
    state = RmspropState.zeros((1,), lr=0.01)

    new = rmsprop_step(numpy.array([1.0]), numpy.array([2.0]), state)

    assert state.square_avg[0] == pytest.approx(0.04)
    assert new[0] == pytest.approx(1.0 - 0.01 * 2.0 / (0.2 + 1e-8))


def test_rmsprop_zero_gradient():
    state = RmspropState(numpy.array([4.0, 1.0]), lr=0.01)
    param = numpy.array([1.0, -2.0])

    new = rmsprop_step(param, numpy.zeros(2), state)

    numpy.testing.assert_array_equal(new, param)
    numpy.testing.assert_allclose(state.square_avg, [3.96, 0.99])


@pytest.mark.parametrize("grad", [3.0, -0.5, 1e-3])
def test_rmsprop_constant_gradient_fixed_point(grad):
    state = RmspropState.zeros((1,), lr=0.01)
    param = numpy.zeros(1)

    for _ in range(5000):
        new = rmsprop_step(param, numpy.array([grad]), state)
        step, param = new - param, new

    assert step[0] == pytest.approx(-0.01 * numpy.sign(grad), rel=1e-2)


def test_rmsprop_scale_equivariance(rng):
    grads = rng.standard_normal((5000, 3))
    steps = []

    for scale in (1.0, 2.0):
        state = RmspropState.zeros((3,), lr=0.01)
        param = numpy.zeros(3)
        for grad in grads:
            new = rmsprop_step(param, scale * grad, state)
            step, param = new - param, new
        steps.append(step)

    numpy.testing.assert_allclose(steps[1], steps[0], rtol=1e-2)


def test_rmsprop_step_errors():
    state = RmspropState.zeros((2,))

    with pytest.raises(ShapeError):
        rmsprop_step(numpy.zeros(2), numpy.zeros(3), state)

    with pytest.raises(NumericalError):
        rmsprop_step(numpy.zeros(2), numpy.array([0.0, numpy.nan]), state)


def test_rmsprop_skips_parameters_without_gradient():
    with_grad = Parameter(numpy.ones(2))
    without_grad = Parameter(numpy.ones(2))
    with_grad.grad = numpy.ones(2)

    RMSprop([with_grad, without_grad], lr=0.1).step()

    assert numpy.all(with_grad.data < 1.0)
    numpy.testing.assert_array_equal(without_grad.data, numpy.ones(2))


def test_stiefel_tangent_is_tangent(rng):
    param = qr_orthonormalize(rng.standard_normal((6, 3)))
    tangent = stiefel_tangent(param, rng.standard_normal((6, 3)))

    # AᵀV is skew-symmetric for V in the tangent space at A.
    product = param.T @ tangent
    numpy.testing.assert_allclose(product, -product.T, atol=1e-12)


def test_stiefel_step_stays_on_manifold(rng):
    param = qr_orthonormalize(rng.standard_normal((8, 4)))

    for _ in range(50):
        param = stiefel_step(param, rng.standard_normal((8, 4)), lr=0.1)

    assert orthonormality_residual(param) < 1e-10


def test_stiefel_no_drift(rng):
    param = qr_orthonormalize(rng.standard_normal((8, 3)))

    for _ in range(1000):
        param = stiefel_step(param, rng.standard_normal((8, 3)), lr=0.1)

    assert orthonormality_residual(param) < 1e-10


def test_stiefel_step_descends(rng):
    for _ in range(10):
        param = qr_orthonormalize(rng.standard_normal((8, 3)))
        grad = rng.standard_normal((8, 3))

        stepped = stiefel_step(param, grad, lr=1e-3)

        assert orthonormality_residual(stepped) <= 1e-12
        assert numpy.sum(grad * stepped) < numpy.sum(grad * param)


def test_stiefel_nearest_orthonormal(rng):
    target = qr_orthonormalize(rng.standard_normal((6, 3)))
    param = qr_orthonormalize(target + 0.5 * rng.standard_normal((6, 3)))

    for _ in range(500):
        # Gradient of ‖A - B‖².
        param = stiefel_step(param, 2.0 * (param - target), lr=0.1)

    assert numpy.sum(param * target) == pytest.approx(3.0, abs=1e-4)


def test_stiefel_null_steps(rng):
    param = qr_orthonormalize(rng.standard_normal((5, 2)))

    assert stiefel_step(param, rng.standard_normal((5, 2)), lr=0.0) is param

    # A gradient of the form A·S with S symmetric has no tangent component.
    normal = param @ numpy.array([[2.0, 1.0], [1.0, 3.0]])
    stepped = stiefel_step(param, normal, lr=0.1)
    numpy.testing.assert_allclose(stepped, param, atol=1e-12)


def test_stiefel_descent_finds_top_eigenspace(rng):
    matrix = numpy.diag([5.0, 4.0, 3.0, 2.0, 1.0])
    param = qr_orthonormalize(rng.standard_normal((5, 2)))

    for _ in range(500):
        # Gradient of -tr(AᵀMA).
        param = stiefel_step(param, -2.0 * matrix @ param, lr=0.02)

    assert numpy.trace(param.T @ matrix @ param) == pytest.approx(9.0, abs=1e-6)


def test_stiefel_sgd(rng):
    weight = Parameter(qr_orthonormalize(rng.standard_normal((4, 2))), "stiefel")
    weight.grad = rng.standard_normal((4, 2))
    before = weight.data.copy()

    StiefelSGD([weight], lr=0.1).step()

    assert not numpy.array_equal(weight.data, before)
    assert orthonormality_residual(weight.data) < 1e-12
