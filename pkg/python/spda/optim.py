#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# @Author: José Sánchez-Gallego (gallegoj@uw.edu)
# @Date: 2024-03-07
# @Filename: optim.py
# @License: BSD 3-clause (http://www.opensource.org/licenses/BSD-3-Clause)

from __future__ import annotations

from dataclasses import dataclass, field

from typing import Sequence

import numpy

from spda.exceptions import ConvergenceError, NumericalError, ShapeError
from spda.linalg import qr_orthonormalize, sym
from spda.nn import Parameter


__all__ = [
    "RmspropState",
    "rmsprop_step",
    "stiefel_tangent",
    "stiefel_step",
    "RMSprop",
    "StiefelSGD",
]


@dataclass
class RmspropState:
    """Running state of RMSprop for one parameter."""

    square_avg: numpy.ndarray
    lr: float = 1e-4
    alpha: float = 0.99
    eps: float = 1e-8

    @classmethod
    def zeros(cls, shape: tuple[int, ...], **kwargs):
        return cls(numpy.zeros(shape), **kwargs)


def _check_grad(grad: numpy.ndarray, shape: tuple[int, ...], what: str):
    if grad.shape != shape:
        raise ShapeError(f"{what}: gradient {grad.shape} vs parameter {shape}.")
    if not numpy.all(numpy.isfinite(grad)):
        raise NumericalError(f"{what}: non-finite gradient.")


def rmsprop_step(
    param: numpy.ndarray,
    grad: numpy.ndarray,
    state: RmspropState,
) -> numpy.ndarray:
    """One RMSprop update.

    ``state.square_avg`` is updated in place; the new parameter value is
    returned.

    """

    grad = numpy.asarray(grad, dtype=numpy.float64)
    _check_grad(grad, param.shape, "rmsprop_step()")

    state.square_avg *= state.alpha
    state.square_avg += (1.0 - state.alpha) * grad**2

    return param - state.lr * grad / (numpy.sqrt(state.square_avg) + state.eps)


def stiefel_tangent(param: numpy.ndarray, grad: numpy.ndarray) -> numpy.ndarray:
    """Projects a Euclidean gradient onto the tangent space at ``param``."""

    return grad - param @ sym(param.T @ grad)


def stiefel_step(
    param: numpy.ndarray,
    grad: numpy.ndarray,
    lr: float = 0.1,
) -> numpy.ndarray:
    """Riemannian gradient descent step with QR retraction.

    Parameters
    ----------
    param
        A column-orthonormal ``n×p`` matrix.
    grad
        The Euclidean gradient of the loss with respect to ``param``.
    lr
        Step size.

    Returns
    -------
    updated
        The retracted matrix. If the step is null (zero learning rate or zero
        tangent gradient) ``param`` is returned unchanged.

    Raises
    ------
    ConvergenceError
        If the candidate matrix loses rank during the retraction.

    """

    grad = numpy.asarray(grad, dtype=numpy.float64)
    _check_grad(grad, param.shape, "stiefel_step()")

    tangent = stiefel_tangent(param, grad)
    if lr == 0.0 or not numpy.any(tangent):
        return param

    try:
        return qr_orthonormalize(param - lr * tangent)
    except NumericalError as err:
        raise ConvergenceError(
            f"Stiefel retraction collapsed (lr={lr}). Try a smaller step."
        ) from err


@dataclass
class RMSprop:
    """RMSprop over a list of Euclidean parameters."""

    params: Sequence[Parameter]
    lr: float = 1e-4
    alpha: float = 0.99
    eps: float = 1e-8
    states: list[RmspropState] = field(init=False)

    def __post_init__(self):
        self.states = [
            RmspropState.zeros(pp.shape, lr=self.lr, alpha=self.alpha, eps=self.eps)
            for pp in self.params
        ]

    def step(self):
        for param, state in zip(self.params, self.states):
            if param.grad is None:
                continue
            param.data = rmsprop_step(param.data, param.grad, state)


@dataclass
class StiefelSGD:
    """Riemannian gradient descent over a list of Stiefel parameters."""

    params: Sequence[Parameter]
    lr: float = 0.1

    def step(self):
        for param in self.params:
            if param.grad is None:
                continue
            param.data = stiefel_step(param.data, param.grad, lr=self.lr)
