#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# @Author: José Sánchez-Gallego (gallegoj@uw.edu)
# @Date: 2024-03-16
# @Filename: test_tensor.py
# @License: BSD 3-clause (http://www.opensource.org/licenses/BSD-3-Clause)

from __future__ import annotations

import numpy
import pytest

from spda.exceptions import NumericalError, ShapeError, SpdaError
from spda.tensor import (
    Tensor,
    add,
    backward,
    channel_scale,
    concat,
    conv3d,
    conv_transpose3d,
    get_graph,
    linear,
    maxpool3d,
    mul,
    no_grad,
    reduce_sum,
    reset_graph,
    upsample_nearest3d,
)


def test_broadcast_gradient():
    a = Tensor(numpy.ones((2, 3)), requires_grad=True)
    b = Tensor(numpy.arange(3.0), requires_grad=True)

    backward(reduce_sum(add(a, b)))

    numpy.testing.assert_array_equal(a.grad, numpy.ones((2, 3)))
    numpy.testing.assert_array_equal(b.grad, [2.0, 2.0, 2.0])


def test_shared_input_accumulates():
    x = Tensor([3.0], requires_grad=True)

    backward(reduce_sum(mul(x, x)))

    assert x.grad[0] == 6.0


def test_backward_twice_fails():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = reduce_sum(mul(x, 2.0))
    backward(loss)

    with pytest.raises(SpdaError):
        backward(loss)

    reset_graph()
    assert len(get_graph().nodes) == 0


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)

    with pytest.raises(ShapeError):
        backward(mul(x, 2.0))


def test_no_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)

    with no_grad():
        y = mul(x, 2.0)

    assert y.requires_grad is False
    assert y.is_leaf
    assert len(get_graph().nodes) == 0


def test_operator_overloads():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = 1.0 - x * 2.0 / 4.0 + (-x)

    numpy.testing.assert_allclose(y.data, [-0.5, -2.0])

    backward(y.sum())
    numpy.testing.assert_allclose(x.grad, [-1.5, -1.5])


def test_validate():
    with pytest.raises(NumericalError):
        Tensor([1.0, numpy.nan], name="bad").validate()


def test_item_requires_single_element():
    with pytest.raises(ShapeError):
        Tensor([1.0, 2.0]).item()


@pytest.mark.parametrize("kernel_size", [1, 3])
def test_conv3d_preserves_shape(kernel_size, rng):
    x = Tensor(rng.standard_normal((2, 3, 4, 4, 4)))
    kernel = Tensor(rng.standard_normal((5, 3) + (kernel_size,) * 3))

    assert conv3d(x, kernel).shape == (2, 5, 4, 4, 4)


def test_conv3d_identity_kernel(rng):
    x = Tensor(rng.standard_normal((1, 2, 3, 3, 3)))
    kernel = numpy.zeros((2, 2, 3, 3, 3))
    kernel[0, 0, 1, 1, 1] = kernel[1, 1, 1, 1, 1] = 1.0

    numpy.testing.assert_allclose(conv3d(x, Tensor(kernel)).data, x.data)


def test_conv3d_channel_mismatch(rng):
    x = Tensor(rng.standard_normal((1, 2, 4, 4, 4)))

    with pytest.raises(ShapeError):
        conv3d(x, Tensor(rng.standard_normal((3, 4, 3, 3, 3))))


def test_conv_transpose3d_shape(rng):
    x = Tensor(rng.standard_normal((1, 4, 2, 2, 2)))
    kernel = Tensor(rng.standard_normal((4, 3, 2, 2, 2)))

    assert conv_transpose3d(x, kernel).shape == (1, 3, 4, 4, 4)


def test_pool_and_upsample(rng):
    x = Tensor(rng.standard_normal((1, 2, 4, 4, 4)))

    pooled = maxpool3d(x)
    assert pooled.shape == (1, 2, 2, 2, 2)
    assert pooled.data[0, 0, 0, 0, 0] == x.data[0, 0, :2, :2, :2].max()

    up = upsample_nearest3d(pooled)
    assert up.shape == x.shape
    assert numpy.all(up.data >= x.data)

    with pytest.raises(ShapeError):
        maxpool3d(Tensor(numpy.zeros((1, 1, 3, 4, 4))))


def test_conv3d_matches_loops(rng):
    x = rng.standard_normal((1, 2, 3, 3, 3))
    kernel = rng.standard_normal((2, 2, 3, 3, 3))
    bias = rng.standard_normal(2)

    out = conv3d(Tensor(x), Tensor(kernel), Tensor(bias)).data

    padded = numpy.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    expected = numpy.zeros((1, 2, 3, 3, 3))
    for oc in range(2):
        for ii in range(3):
            for jj in range(3):
                for kk in range(3):
                    total = bias[oc]
                    for ic in range(2):
                        for di in range(3):
                            for dj in range(3):
                                for dk in range(3):
                                    total += (
                                        padded[0, ic, ii + di, jj + dj, kk + dk]
                                        * kernel[oc, ic, di, dj, dk]
                                    )
                    expected[0, oc, ii, jj, kk] = total

    numpy.testing.assert_allclose(out, expected, atol=1e-12)


def test_maxpool3d_matches_loops(rng):
    x = Tensor(rng.standard_normal((2, 2, 4, 4, 4)), requires_grad=True)
    grad = rng.standard_normal((2, 2, 2, 2, 2))

    out = maxpool3d(x)
    backward(reduce_sum(mul(out, Tensor(grad))))

    expected = numpy.zeros(out.shape)
    expected_grad = numpy.zeros(x.shape)
    for index in numpy.ndindex(*out.shape):
        bb, cc, ii, jj, kk = index
        window = x.data[bb, cc, 2 * ii : 2 * ii + 2, 2 * jj : 2 * jj + 2]
        window = window[:, :, 2 * kk : 2 * kk + 2]
        expected[index] = window.max()

        di, dj, dk = numpy.unravel_index(window.argmax(), (2, 2, 2))
        expected_grad[bb, cc, 2 * ii + di, 2 * jj + dj, 2 * kk + dk] = grad[index]

    numpy.testing.assert_array_equal(out.data, expected)
    numpy.testing.assert_array_equal(x.grad, expected_grad)


def test_maxpool3d_ties_go_to_first():
    x = Tensor(numpy.ones((1, 1, 4, 4, 4)), requires_grad=True)

    backward(reduce_sum(maxpool3d(x)))

    expected = numpy.zeros((1, 1, 4, 4, 4))
    expected[:, :, ::2, ::2, ::2] = 1.0

    numpy.testing.assert_array_equal(x.grad, expected)


def test_upsample_nearest3d_backward(rng):
    x = Tensor(rng.standard_normal((1, 2, 2, 3, 2)), requires_grad=True)

    out = upsample_nearest3d(x)
    backward(reduce_sum(out))

    assert out.shape == (1, 2, 4, 6, 4)
    assert out.data[0, 1, 3, 5, 2] == x.data[0, 1, 1, 2, 1]
    numpy.testing.assert_array_equal(x.grad, numpy.full(x.shape, 8.0))


def test_linear_matches_loops(rng):
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    weight = Tensor(rng.standard_normal((2, 4)), requires_grad=True)
    bias = Tensor(rng.standard_normal(2), requires_grad=True)
    grad = rng.standard_normal((3, 2))

    out = linear(x, weight, bias)
    backward(reduce_sum(mul(out, Tensor(grad))))

    expected = numpy.zeros((3, 2))
    grad_weight = numpy.zeros((2, 4))
    for bb in range(3):
        for oo in range(2):
            expected[bb, oo] = bias.data[oo]
            for ii in range(4):
                expected[bb, oo] += x.data[bb, ii] * weight.data[oo, ii]
                grad_weight[oo, ii] += grad[bb, oo] * x.data[bb, ii]

    numpy.testing.assert_allclose(out.data, expected, atol=1e-12)
    numpy.testing.assert_allclose(weight.grad, grad_weight, atol=1e-12)
    numpy.testing.assert_allclose(bias.grad, grad.sum(axis=0), atol=1e-12)


def test_channel_scale(rng):
    x = Tensor(rng.standard_normal((2, 3, 2, 2, 2)))

    out = channel_scale(x, Tensor(numpy.ones((2, 3))))
    numpy.testing.assert_array_equal(out.data, x.data)

    with pytest.raises(ShapeError):
        channel_scale(x, Tensor(numpy.ones((2, 4))))


def test_concat_gradient_split():
    a = Tensor(numpy.zeros((1, 2)), requires_grad=True)
    b = Tensor(numpy.zeros((1, 3)), requires_grad=True)

    out = concat([a, b], 1)
    backward(reduce_sum(mul(out, Tensor(numpy.arange(5.0)))))

    numpy.testing.assert_array_equal(a.grad, [[0.0, 1.0]])
    numpy.testing.assert_array_equal(b.grad, [[2.0, 3.0, 4.0]])
