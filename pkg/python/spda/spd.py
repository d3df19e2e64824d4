#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# @Author: José Sánchez-Gallego (gallegoj@uw.edu)
# @Date: 2024-03-06
# @Filename: spd.py
# @License: BSD 3-clause (http://www.opensource.org/licenses/BSD-3-Clause)

from __future__ import annotations

import numpy

from spda.exceptions import NumericalError, ShapeError
from spda.linalg import qr_orthonormalize, sym_eig, sym_matrix_function
from spda.nn import Module, Parameter
from spda.tensor import Tensor, add, apply_op, batch_matmul, mul, transpose


__all__ = [
    "JITTER",
    "spd_pool",
    "bimap",
    "reeig",
    "logeig",
    "expeig",
    "upper_triangle_vec",
    "bire_block",
    "BiMap",
    "BiRe",
    "SpdBranch",
    "min_eigenvalue",
]


#: Relative identity jitter added by `spd_pool`.
JITTER = 1e-5


def spd_pool(features: Tensor) -> Tensor:
    """Second-order pooling of a feature bank.

    For features ``[..., C, H, W, D]`` returns ``(1/N) R Rᵀ + γI`` of shape
    ``[..., C, C]``, where ``R`` is the ``C×N`` matrix of flattened channels,
    ``N = H·W·D`` and ``γ = 1e-5·max(tr/C, 1e-12)``. The jitter guarantees a
    strictly positive spectrum when channels are collinear or ``N < C``.

    """

    if features.ndim < 4:
        raise ShapeError(f"spd_pool(): expected [..., C, H, W, D]: {features.shape}.")

    if not numpy.all(numpy.isfinite(features.data)):
        raise NumericalError("spd_pool(): non-finite features.")

    lead = features.shape[:-3]
    n_chan = features.shape[-4]
    n_vox = int(numpy.prod(features.shape[-3:]))

    rr = features.data.reshape(lead + (n_vox,))
    gram = numpy.matmul(rr, numpy.swapaxes(rr, -1, -2)) / n_vox
    gram = 0.5 * (gram + numpy.swapaxes(gram, -1, -2))

    mean_trace = numpy.trace(gram, axis1=-2, axis2=-1) / n_chan
    active = mean_trace > 1e-12
    gamma = JITTER * numpy.maximum(mean_trace, 1e-12)

    eye = numpy.eye(n_chan)
    out = gram + gamma[..., None, None] * eye

    def backward_fn(grad):
        trace_grad = numpy.trace(grad, axis1=-2, axis2=-1)
        jitter_grad = numpy.where(active, JITTER / n_chan * trace_grad, 0.0)
        grad_gram = grad + jitter_grad[..., None, None] * eye
        grad_gram = grad_gram + numpy.swapaxes(grad_gram, -1, -2)
        grad_r = numpy.matmul(grad_gram, rr) / n_vox
        return (grad_r.reshape(features.shape),)

    return apply_op(out, (features,), backward_fn, "spd_pool")


def bimap(x: Tensor, weight: Tensor) -> Tensor:
    """Bilinear map ``Aᵀ X A`` with ``A`` the ``d_in×d_out`` transposed weight.

    The result is explicitly symmetrised.

    """

    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"bimap(): input {x.shape} vs weight {weight.shape}.")
    if weight.shape[1] > weight.shape[0]:
        raise ShapeError("bimap(): output dimension larger than input dimension.")

    out = batch_matmul(batch_matmul(transpose(weight), x), weight)

    return mul(add(out, transpose(out)), 0.5)


def _rectifier(epsilon: float):
    def func(values):
        return numpy.maximum(values, epsilon)

    def fprime(values):
        # The subgradient at exactly epsilon is taken on the flat side.
        return (values > epsilon).astype(numpy.float64)

    return func, fprime


def reeig(x: Tensor, epsilon: float = 1e-4) -> Tensor:
    """Eigenvalue rectification ``U max(εI, Σ) Uᵀ``."""

    func, fprime = _rectifier(epsilon)

    return sym_matrix_function(x, func, fprime, name="reeig")


def logeig(x: Tensor) -> Tensor:
    """Matrix logarithm ``U log(Σ) Uᵀ`` of SPD matrices."""

    return sym_matrix_function(
        x,
        numpy.log,
        lambda values: 1.0 / values,
        name="logeig",
        domain=lambda values: bool(numpy.all(values > 0)),
    )


def expeig(x: Tensor) -> Tensor:
    """Matrix exponential ``U exp(Σ) Uᵀ``, the inverse of `logeig`."""

    return sym_matrix_function(x, numpy.exp, numpy.exp, name="expeig")


def upper_triangle_vec(x: Tensor, sqrt2: bool = True) -> Tensor:
    """Row-major upper triangle ``(i, j), i ≤ j`` of symmetric matrices.

    With ``sqrt2`` the off-diagonal entries are scaled by ``√2`` so that the
    dot product of two vectors equals the Frobenius product of the matrices.

    """

    if x.ndim < 2 or x.shape[-1] != x.shape[-2]:
        raise ShapeError(f"upper_triangle_vec(): expected [..., d, d], got {x.shape}.")

    dim = x.shape[-1]
    rows, cols = numpy.triu_indices(dim)

    scale = numpy.ones(len(rows))
    if sqrt2:
        scale[rows != cols] = numpy.sqrt(2.0)

    out = x.data[..., rows, cols] * scale

    def backward_fn(grad):
        grad_x = numpy.zeros(x.shape)
        grad_x[..., rows, cols] = grad * scale
        return (grad_x,)

    return apply_op(out, (x,), backward_fn, "triu_vec")


def bire_block(x: Tensor, weight: Tensor, epsilon: float = 1e-4) -> Tensor:
    """BiMap followed by ReEig."""

    return reeig(bimap(x, weight), epsilon=epsilon)


def min_eigenvalue(x: Tensor | numpy.ndarray) -> float:
    """Smallest eigenvalue over a stack of symmetric matrices."""

    data = x.data if isinstance(x, Tensor) else numpy.asarray(x)
    dim = data.shape[-1]

    return float(
        min(sym_eig(mm).eigenvalues[-1] for mm in data.reshape(-1, dim, dim))
    )


class BiMap(Module):
    """BiMap layer with a Stiefel-constrained ``d_in×d_out`` weight.

    The weight is initialised as the QR orthonormalisation of a Gaussian
    matrix.

    """

    def __init__(self, in_dim: int, out_dim: int, rng: numpy.random.Generator):
        super().__init__()

        if out_dim > in_dim:
            raise ShapeError("BiMap output dimension must not exceed the input one.")

        self.in_dim = in_dim
        self.out_dim = out_dim

        initial = qr_orthonormalize(rng.standard_normal((in_dim, out_dim)))
        self.weight = Parameter(initial, manifold="stiefel")

    def forward(self, x: Tensor) -> Tensor:
        return bimap(x, self.weight)


class BiRe(Module):
    """A BiRe block halving the SPD dimension."""

    def __init__(self, dim: int, rng: numpy.random.Generator, epsilon: float = 1e-4):
        super().__init__()

        if dim % 2 != 0:
            raise ShapeError(f"BiRe block requires an even dimension, got {dim}.")

        self.bimap = BiMap(dim, dim // 2, rng)
        self.epsilon = epsilon

    def forward(self, x: Tensor) -> Tensor:
        return bire_block(x, self.bimap.weight, epsilon=self.epsilon)


class SpdBranch(Module):
    """A sequence of BiRe blocks, LogEig and upper-triangle vectorisation.

    Parameters
    ----------
    dim
        Dimension of the input SPD matrices.
    rng
        Generator used to initialise the BiMap weights.
    n_blocks
        Number of BiRe blocks, each halving the dimension.
    epsilon
        ReEig threshold.
    sqrt2
        Whether the vectorisation scales off-diagonal entries by ``√2``.

    """

    def __init__(
        self,
        dim: int,
        rng: numpy.random.Generator,
        n_blocks: int = 1,
        epsilon: float = 1e-4,
        sqrt2: bool = True,
    ):
        super().__init__()

        if n_blocks < 1 or dim % (2**n_blocks) != 0:
            raise ShapeError(f"Cannot halve dimension {dim} {n_blocks} times.")

        self.blocks = [
            BiRe(dim // 2**ii, rng, epsilon=epsilon) for ii in range(n_blocks)
        ]
        self.sqrt2 = sqrt2
        self.out_dim = dim // 2**n_blocks

    @property
    def embedding_dim(self) -> int:
        return self.out_dim * (self.out_dim + 1) // 2

    def rectified(self, x: Tensor) -> list[Tensor]:
        """Returns the output of every BiRe block."""

        outputs = []
        for block in self.blocks:
            x = block(x)
            outputs.append(x)

        return outputs

    def forward(self, x: Tensor) -> Tensor:
        x = self.rectified(x)[-1]
        return upper_triangle_vec(logeig(x), sqrt2=self.sqrt2)
