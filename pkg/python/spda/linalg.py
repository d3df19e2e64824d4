#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# @Author: José Sánchez-Gallego (gallegoj@uw.edu)
# @Date: 2024-03-05
# @Filename: linalg.py
# @License: BSD 3-clause (http://www.opensource.org/licenses/BSD-3-Clause)

from __future__ import annotations

from dataclasses import dataclass

from typing import Callable

import numpy
import scipy.linalg

from spda import config
from spda.exceptions import ConvergenceError, NumericalError, ShapeError
from spda.tensor import Tensor, apply_op


__all__ = [
    "EigenPair",
    "sym",
    "sym_eig",
    "sym_matrix_function",
    "qr_orthonormalize",
    "orthonormality_residual",
]


ScalarFunction = Callable[[numpy.ndarray], numpy.ndarray]


@dataclass
class EigenPair:
    """Eigendecomposition of a symmetric matrix.

    Eigenvalues are sorted in descending order and column ``i`` of
    ``eigenvectors`` is paired with eigenvalue ``i``. The first nonzero
    component of each eigenvector is non-negative.

    """

    eigenvalues: numpy.ndarray
    eigenvectors: numpy.ndarray

    def reconstruct(self, values: numpy.ndarray | None = None) -> numpy.ndarray:
        """Returns ``U diag(values) Uᵀ``, by default with the eigenvalues."""

        values = self.eigenvalues if values is None else values
        uu = self.eigenvectors
        return (uu * values) @ uu.T


def sym(matrix: numpy.ndarray) -> numpy.ndarray:
    """Symmetric part over the last two axes."""

    return 0.5 * (matrix + numpy.swapaxes(matrix, -1, -2))


def _jacobi(matrix: numpy.ndarray, max_sweeps: int):
    """Cyclic Jacobi rotations. Returns unsorted eigenvalues and vectors."""

    aa = matrix.copy()
    dim = aa.shape[0]
    vv = numpy.eye(dim)

    norm = numpy.linalg.norm(aa)
    if dim < 2 or norm == 0.0:
        return numpy.diag(aa).copy(), vv

    eps = numpy.finfo(numpy.float64).eps
    negligible = eps * norm / dim
    tolerance = dim * eps * norm

    for _ in range(max_sweeps):
        off = numpy.linalg.norm(aa - numpy.diag(numpy.diag(aa)))
        if off <= tolerance:
            return numpy.diag(aa).copy(), vv

        rotated = False
        for pp in range(dim - 1):
            for qq in range(pp + 1, dim):
                apq = aa[pp, qq]
                if abs(apq) <= negligible:
                    continue

                rotated = True

                tau = (aa[qq, qq] - aa[pp, pp]) / (2.0 * apq)
                if tau >= 0:
                    tt = 1.0 / (tau + numpy.sqrt(1.0 + tau * tau))
                else:
                    tt = -1.0 / (-tau + numpy.sqrt(1.0 + tau * tau))
                cc = 1.0 / numpy.sqrt(1.0 + tt * tt)
                ss = tt * cc

                col_p = aa[:, pp].copy()
                col_q = aa[:, qq].copy()
                aa[:, pp] = cc * col_p - ss * col_q
                aa[:, qq] = ss * col_p + cc * col_q

                row_p = aa[pp, :].copy()
                row_q = aa[qq, :].copy()
                aa[pp, :] = cc * row_p - ss * row_q
                aa[qq, :] = ss * row_p + cc * row_q

                aa[pp, qq] = aa[qq, pp] = 0.0

                vec_p = vv[:, pp].copy()
                vec_q = vv[:, qq].copy()
                vv[:, pp] = cc * vec_p - ss * vec_q
                vv[:, qq] = ss * vec_p + cc * vec_q

        if not rotated:
            return numpy.diag(aa).copy(), vv

    raise ConvergenceError(
        f"Jacobi eigensolver did not converge after {max_sweeps} sweeps. "
        "The input is likely ill-conditioned."
    )


def sym_eig(
    matrix: numpy.ndarray,
    method: str | None = None,
    max_sweeps: int | None = None,
) -> EigenPair:
    """Eigendecomposition of a symmetric matrix.

    Parameters
    ----------
    matrix
        A ``d×d`` matrix, symmetric to rounding. It is symmetrised as
        ``(X + Xᵀ) / 2`` before decomposition.
    method
        ``jacobi`` (cyclic Jacobi rotations) or ``lapack``
        (`scipy.linalg.eigh`). Defaults to ``linalg.eigensolver`` in the
        configuration.
    max_sweeps
        Iteration cap for the Jacobi solver.

    Raises
    ------
    NumericalError
        If the matrix contains non-finite values.
    ConvergenceError
        If the Jacobi solver reaches the sweep cap.

    """

    matrix = numpy.asarray(matrix, dtype=numpy.float64)

    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ShapeError(f"sym_eig() requires a square matrix, got {matrix.shape}.")

    if not numpy.all(numpy.isfinite(matrix)):
        raise NumericalError("sym_eig() received non-finite entries.")

    method = method or config["linalg"]["eigensolver"]
    max_sweeps = max_sweeps or config["linalg"]["max_sweeps"]

    matrix = sym(matrix)

    if method == "jacobi":
        values, vectors = _jacobi(matrix, max_sweeps)
    elif method == "lapack":
        values, vectors = scipy.linalg.eigh(matrix)
    else:
        raise ValueError(f"Unknown eigensolver {method!r}.")

    order = numpy.argsort(-values, kind="stable")
    values = values[order]
    vectors = vectors[:, order]

    for ii in range(vectors.shape[1]):
        nonzero = numpy.flatnonzero(numpy.abs(vectors[:, ii]) > 1e-12)
        if len(nonzero) > 0 and vectors[nonzero[0], ii] < 0:
            vectors[:, ii] = -vectors[:, ii]

    return EigenPair(values, vectors)


def _divided_differences(
    values: numpy.ndarray,
    fvalues: numpy.ndarray,
    fprime: ScalarFunction,
) -> numpy.ndarray:
    """The Daleckii-Krein matrix of first divided differences of ``f``."""

    scale = max(1.0, float(numpy.max(numpy.abs(values))))
    tau = 1e-10 * scale

    diff = values[:, None] - values[None, :]
    fdiff = fvalues[:, None] - fvalues[None, :]
    close = numpy.abs(diff) <= tau

    midpoint = 0.5 * (values[:, None] + values[None, :])
    safe_diff = numpy.where(close, 1.0, diff)

    return numpy.where(close, fprime(midpoint), fdiff / safe_diff)


def sym_matrix_function(
    x: Tensor,
    func: ScalarFunction,
    fprime: ScalarFunction,
    name: str = "sym_function",
    domain: Callable[[numpy.ndarray], bool] | None = None,
) -> Tensor:
    """Differentiable spectral function ``U f(Λ) Uᵀ`` of symmetric matrices.

    Operates on the last two axes of ``x``; leading axes are a batch processed
    in index order. The backward pass maps the output gradient ``G`` to
    ``U (K ∘ (Uᵀ sym(G) U)) Uᵀ`` where ``K`` holds the divided differences
    ``(f(λᵢ) - f(λⱼ)) / (λᵢ - λⱼ)``, replaced by ``f'((λᵢ + λⱼ) / 2)`` when the
    gap is below ``1e-10·max(1, |λ|max)``.

    Parameters
    ----------
    x
        Tensor of shape ``[..., d, d]``.
    func, fprime
        The scalar function and its derivative, both vectorised.
    name
        Name of the operation, used in error messages.
    domain
        Optional predicate on the eigenvalues. If it returns `False` a
        `.NumericalError` is raised.

    """

    if x.ndim < 2 or x.shape[-1] != x.shape[-2]:
        raise ShapeError(f"{name}: expected [..., d, d], got {x.shape}.")

    if not numpy.all(numpy.isfinite(x.data)):
        raise NumericalError(f"{name}: non-finite input.")

    dim = x.shape[-1]
    flat = x.data.reshape(-1, dim, dim)

    pairs: list[EigenPair] = []
    fvalues: list[numpy.ndarray] = []
    out = numpy.empty_like(flat)

    for ii in range(flat.shape[0]):
        pair = sym_eig(flat[ii])
        if domain is not None and not domain(pair.eigenvalues):
            raise NumericalError(
                f"{name}: function undefined on eigenvalue "
                f"{pair.eigenvalues.min():.3g}."
            )
        fv = func(pair.eigenvalues)
        out[ii] = pair.reconstruct(fv)
        pairs.append(pair)
        fvalues.append(fv)

    def backward_fn(grad):
        grad_flat = sym(grad.reshape(-1, dim, dim))
        grad_x = numpy.empty_like(grad_flat)

        for ii, pair in enumerate(pairs):
            uu = pair.eigenvectors
            kk = _divided_differences(pair.eigenvalues, fvalues[ii], fprime)
            grad_x[ii] = uu @ (kk * (uu.T @ grad_flat[ii] @ uu)) @ uu.T

        return (grad_x.reshape(x.shape),)

    return apply_op(out.reshape(x.shape), (x,), backward_fn, name)


def qr_orthonormalize(matrix: numpy.ndarray) -> numpy.ndarray:
    """Thin QR orthonormalisation with a positive ``R`` diagonal.

    Raises
    ------
    NumericalError
        If the matrix is rank deficient (``|R_ii| < 1e-12``).

    """

    matrix = numpy.asarray(matrix, dtype=numpy.float64)

    if matrix.ndim != 2 or matrix.shape[0] < matrix.shape[1]:
        raise ShapeError(f"qr_orthonormalize() requires n ≥ p, got {matrix.shape}.")

    qq, rr = numpy.linalg.qr(matrix, mode="reduced")
    diag = numpy.diag(rr)

    if numpy.any(numpy.abs(diag) < 1e-12):
        raise NumericalError("Matrix is rank deficient; cannot orthonormalise.")

    return qq * numpy.sign(diag)


def orthonormality_residual(matrix: numpy.ndarray) -> float:
    """Returns ``‖AᵀA - I‖_F``."""

    matrix = numpy.asarray(matrix)
    gram = matrix.T @ matrix

    return float(numpy.linalg.norm(gram - numpy.eye(matrix.shape[1])))
