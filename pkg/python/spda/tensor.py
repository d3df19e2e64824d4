#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# @Author: José Sánchez-Gallego (gallegoj@uw.edu)
# @Date: 2024-03-02
# @Filename: tensor.py
# @License: BSD 3-clause (http://www.opensource.org/licenses/BSD-3-Clause)

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

from typing import Callable, Iterator, Sequence

import numpy
import numpy.typing
import scipy.special

from spda.exceptions import NumericalError, ShapeError, SpdaError


__all__ = [
    "Tensor",
    "Graph",
    "get_graph",
    "reset_graph",
    "no_grad",
    "apply_op",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "relu",
    "sigmoid",
    "log",
    "clamp",
    "concat",
    "reshape",
    "transpose",
    "batch_matmul",
    "reduce_sum",
    "reduce_mean",
    "channel_scale",
    "linear",
    "conv3d",
    "conv_transpose3d",
    "maxpool3d",
    "upsample_nearest3d",
    "batch_norm3d",
]


ArrayLike = numpy.typing.ArrayLike
BackwardFn = Callable[[numpy.ndarray], Sequence["numpy.ndarray | None"]]


class Tensor:
    """A dense float64 array with an optional gradient slot.

    Tensors produced by operations while the graph is recording, and with at
    least one parent that requires a gradient, are attached to a `.Node` of the
    active `.Graph`. Leaves (tensors created directly) receive their
    gradient in ``grad`` after `.backward` is called on a scalar loss.

    Parameters
    ----------
    data
        The values. Always copied and cast to a contiguous float64 array.
    requires_grad
        Whether gradients should be accumulated for this tensor.
    name
        An optional name, used in diagnostics.

    """

    __array_priority__ = 1000

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: str | None = None,
    ):
        self.data = numpy.array(data, dtype=numpy.float64, order="C")
        self.requires_grad = requires_grad
        self.grad: numpy.ndarray | None = None
        self.name = name
        self._node: Node | None = None

    def __repr__(self):
        return f"<Tensor shape={self.shape} requires_grad={self.requires_grad}>"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> numpy.ndarray:
        """Returns the underlying array (not a copy)."""

        return self.data

    def item(self) -> float:
        """Returns the value of a single-element tensor."""

        if self.size != 1:
            raise ShapeError(f"item() requires a single element, got {self.shape}.")

        return float(self.data.reshape(-1)[0])

    def validate(self):
        """Raises `.NumericalError` if any value is NaN or infinite."""

        if not numpy.all(numpy.isfinite(self.data)):
            name = self.name or "tensor"
            raise NumericalError(f"Non-finite values found in {name}.")

        return self

    def detach(self) -> Tensor:
        """Returns a new leaf tensor that shares no history with this one."""

        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Runs reverse-mode differentiation from this scalar tensor."""

        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return batch_matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def mT(self) -> Tensor:
        """The tensor with its last two axes swapped."""

        return transpose(self)


@dataclass
class Node:
    """A recorded operation."""

    output: Tensor
    parents: tuple[Tensor, ...]
    backward_fn: BackwardFn
    name: str = ""


@dataclass
class Graph:
    """A define-by-run record of the operations executed since the last reset.

    Nodes are kept in insertion order, which is a valid topological order since
    an operation can only consume tensors that already exist.

    """

    nodes: list[Node] = field(default_factory=list)
    recording: bool = True
    consumed: bool = False

    def record(
        self,
        output: Tensor,
        parents: tuple[Tensor, ...],
        backward_fn: BackwardFn,
        name: str = "",
    ):
        node = Node(output, parents, backward_fn, name)
        output._node = node
        self.nodes.append(node)

    def reset(self):
        """Drops all recorded nodes."""

        for node in self.nodes:
            node.output._node = None
        self.nodes.clear()
        self.consumed = False

    def backward(self, loss: Tensor):
        """Populates ``grad`` in every leaf that requires it."""

        if loss.size != 1:
            raise ShapeError(f"backward() requires a scalar loss, got {loss.shape}.")

        if self.consumed:
            raise SpdaError("backward() called twice without resetting the graph.")

        seed = numpy.ones_like(loss.data)

        if loss.is_leaf:
            if loss.requires_grad:
                _accumulate_leaf(loss, seed)
            self.consumed = True
            return

        grads: dict[int, numpy.ndarray] = {id(loss): seed}

        for node in reversed(self.nodes):
            grad = grads.pop(id(node.output), None)
            if grad is None:
                continue

            parent_grads = node.backward_fn(grad)
            for parent, parent_grad in zip(node.parents, parent_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue

                if parent.is_leaf:
                    _accumulate_leaf(parent, parent_grad)
                elif id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + parent_grad
                else:
                    grads[id(parent)] = parent_grad

        self.consumed = True


def _accumulate_leaf(leaf: Tensor, grad: numpy.ndarray):
    grad = numpy.asarray(grad, dtype=numpy.float64).reshape(leaf.shape)
    if leaf.grad is None:
        leaf.grad = grad.copy()
    else:
        leaf.grad = leaf.grad + grad


_GRAPH = Graph()


def get_graph() -> Graph:
    """Returns the active graph."""

    return _GRAPH


def reset_graph():
    """Resets the active graph. Must be called between training steps."""

    _GRAPH.reset()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disables recording within the context."""

    previous = _GRAPH.recording
    _GRAPH.recording = False
    try:
        yield
    finally:
        _GRAPH.recording = previous


def backward(loss: Tensor):
    """Back-propagates from a scalar loss through the active graph."""

    _GRAPH.backward(loss)


def apply_op(
    data: numpy.ndarray,
    parents: Sequence[Tensor],
    backward_fn: BackwardFn,
    name: str = "",
) -> Tensor:
    """Wraps the result of a forward computation and records it if needed.

    ``backward_fn`` receives the gradient of the output and must return one
    gradient (or `None`) per parent, each with the shape of that parent.

    """

    parents = tuple(parents)
    requires_grad = _GRAPH.recording and any(pp.requires_grad for pp in parents)

    out = Tensor(data, requires_grad=requires_grad)
    if requires_grad:
        _GRAPH.record(out, parents, backward_fn, name)

    return out


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _unbroadcast(grad: numpy.ndarray, shape: tuple[int, ...]) -> numpy.ndarray:
    """Sums ``grad`` down to ``shape`` following numpy broadcasting rules."""

    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)

    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)

    return grad


def _check_broadcast(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return numpy.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"Shapes {a.shape} and {b.shape} cannot be broadcast.")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)

    def backward_fn(grad):
        return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)

    return apply_op(a.data + b.data, (a, b), backward_fn, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)

    def backward_fn(grad):
        return _unbroadcast(grad, a.shape), _unbroadcast(-grad, b.shape)

    return apply_op(a.data - b.data, (a, b), backward_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)

    def backward_fn(grad):
        return (
            _unbroadcast(grad * b.data, a.shape),
            _unbroadcast(grad * a.data, b.shape),
        )

    return apply_op(a.data * b.data, (a, b), backward_fn, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)

    if numpy.any(b.data == 0):
        raise NumericalError("Division by zero.")

    def backward_fn(grad):
        return (
            _unbroadcast(grad / b.data, a.shape),
            _unbroadcast(-grad * a.data / b.data**2, b.shape),
        )

    return apply_op(a.data / b.data, (a, b), backward_fn, "div")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward_fn(grad):
        return (grad * mask,)

    return apply_op(x.data * mask, (x,), backward_fn, "relu")


def sigmoid(x: Tensor) -> Tensor:
    out = scipy.special.expit(x.data)

    def backward_fn(grad):
        return (grad * out * (1.0 - out),)

    return apply_op(out, (x,), backward_fn, "sigmoid")


def log(x: Tensor) -> Tensor:
    if numpy.any(x.data <= 0):
        raise NumericalError("log() of a non-positive value.")

    def backward_fn(grad):
        return (grad / x.data,)

    return apply_op(numpy.log(x.data), (x,), backward_fn, "log")


def clamp(x: Tensor, low: float | None = None, high: float | None = None) -> Tensor:
    """Clips values to ``[low, high]``. The gradient is zero outside the range."""

    low_ = -numpy.inf if low is None else low
    high_ = numpy.inf if high is None else high

    mask = (x.data >= low_) & (x.data <= high_)

    def backward_fn(grad):
        return (grad * mask,)

    return apply_op(numpy.clip(x.data, low_, high_), (x,), backward_fn, "clamp")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(tt) for tt in tensors]
    if len(tensors) == 0:
        raise ShapeError("concat() requires at least one tensor.")

    try:
        out = numpy.concatenate([tt.data for tt in tensors], axis=axis)
    except ValueError as err:
        raise ShapeError(f"Cannot concatenate: {err}")

    sizes = [tt.shape[axis] for tt in tensors]
    splits = numpy.cumsum(sizes)[:-1]

    def backward_fn(grad):
        return numpy.split(grad, splits, axis=axis)

    return apply_op(out, tensors, backward_fn, "concat")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as err:
        raise ShapeError(str(err))

    def backward_fn(grad):
        return (grad.reshape(x.shape),)

    return apply_op(out, (x,), backward_fn, "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permutes axes. By default swaps the last two."""

    if axes is None:
        if x.ndim < 2:
            raise ShapeError("transpose() requires at least two dimensions.")
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]

    axes = tuple(axes)
    inverse = tuple(numpy.argsort(axes))

    def backward_fn(grad):
        return (grad.transpose(inverse),)

    return apply_op(x.data.transpose(axes), (x,), backward_fn, "transpose")


def batch_matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""

    a, b = _as_tensor(a), _as_tensor(b)

    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("batch_matmul() requires at least two dimensions.")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"Cannot multiply {a.shape} by {b.shape}.")

    def backward_fn(grad):
        grad_a = numpy.matmul(grad, numpy.swapaxes(b.data, -1, -2))
        grad_b = numpy.matmul(numpy.swapaxes(a.data, -1, -2), grad)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return apply_op(numpy.matmul(a.data, b.data), (a, b), backward_fn, "matmul")


def _normalise_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(aa % ndim for aa in axis))


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalise_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward_fn(grad):
        if not keepdims:
            grad = numpy.expand_dims(grad, axes)
        return (numpy.broadcast_to(grad, x.shape).copy(),)

    return apply_op(out, (x,), backward_fn, "sum")


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalise_axes(axis, x.ndim)
    count = int(numpy.prod([x.shape[aa] for aa in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def backward_fn(grad):
        if not keepdims:
            grad = numpy.expand_dims(grad, axes)
        return (numpy.broadcast_to(grad / count, x.shape).copy(),)

    return apply_op(out, (x,), backward_fn, "mean")


def channel_scale(features: Tensor, coeffs: Tensor) -> Tensor:
    """Multiplies every voxel of channel ``c`` in batch ``b`` by ``coeffs[b, c]``."""

    if features.ndim < 2 or coeffs.shape != features.shape[:2]:
        raise ShapeError(
            f"Coefficients {coeffs.shape} do not match features {features.shape}."
        )

    spatial = (1,) * (features.ndim - 2)
    scale = coeffs.data.reshape(coeffs.shape + spatial)
    spatial_axes = tuple(range(2, features.ndim))

    def backward_fn(grad):
        return grad * scale, (grad * features.data).sum(axis=spatial_axes)

    return apply_op(features.data * scale, (features, coeffs), backward_fn, "cscale")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for ``x`` of shape ``[B, n]``."""

    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear(): input {x.shape} vs weight {weight.shape}.")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear(): bias {bias.shape} vs weight {weight.shape}.")

    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(grad):
        grads = [grad @ weight.data, grad.T @ x.data]
        if bias is not None:
            grads.append(grad.sum(axis=0))
        return grads

    return apply_op(out, parents, backward_fn, "linear")


def _check_volume(x: Tensor, op: str):
    if x.ndim != 5:
        raise ShapeError(f"{op}(): expected [B, C, H, W, D], got {x.shape}.")


def conv3d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    padding: int | None = None,
) -> Tensor:
    """Stride-1 3D cross-correlation with zero padding.

    The padding defaults to ``k // 2`` so that odd kernels preserve the spatial
    shape. The sum runs as one loop over kernel offsets, each a channel
    contraction of a shifted view of the padded input.

    """

    _check_volume(x, "conv3d")

    if kernel.ndim != 5:
        raise ShapeError(f"conv3d(): kernel must be 5D, got {kernel.shape}.")

    n_batch, c_in, nh, nw, nd = x.shape
    c_out, k_in, kh, kw, kd = kernel.shape

    if k_in != c_in:
        raise ShapeError(f"conv3d(): input has {c_in} channels, kernel {k_in}.")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv3d(): bias {bias.shape} for {c_out} channels.")

    if padding is None:
        ph, pw, pd = kh // 2, kw // 2, kd // 2
    else:
        ph = pw = pd = padding

    oh, ow, od = nh + 2 * ph - kh + 1, nw + 2 * pw - kw + 1, nd + 2 * pd - kd + 1
    if min(oh, ow, od) < 1:
        raise ShapeError("conv3d(): kernel larger than padded input.")

    padded = numpy.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw), (pd, pd)))
    out = numpy.zeros((n_batch, c_out, oh, ow, od))

    offsets = [(ii, jj, kk) for ii in range(kh) for jj in range(kw) for kk in range(kd)]

    for ii, jj, kk in offsets:
        patch = padded[:, :, ii : ii + oh, jj : jj + ow, kk : kk + od]
        contrib = numpy.tensordot(kernel.data[:, :, ii, jj, kk], patch, axes=(1, 1))
        out += contrib.transpose(1, 0, 2, 3, 4)

    if bias is not None:
        out += bias.data.reshape(1, c_out, 1, 1, 1)

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward_fn(grad):
        grad_padded = numpy.zeros_like(padded)
        grad_kernel = numpy.zeros_like(kernel.data)

        for ii, jj, kk in offsets:
            patch = padded[:, :, ii : ii + oh, jj : jj + ow, kk : kk + od]
            back = numpy.tensordot(grad, kernel.data[:, :, ii, jj, kk], axes=(1, 0))
            grad_padded[:, :, ii : ii + oh, jj : jj + ow, kk : kk + od] += (
                back.transpose(0, 4, 1, 2, 3)
            )
            grad_kernel[:, :, ii, jj, kk] = numpy.tensordot(
                grad,
                patch,
                axes=((0, 2, 3, 4), (0, 2, 3, 4)),
            )

        grad_x = grad_padded[:, :, ph : ph + nh, pw : pw + nw, pd : pd + nd]
        grads = [grad_x, grad_kernel]
        if bias is not None:
            grads.append(grad.sum(axis=(0, 2, 3, 4)))

        return grads

    return apply_op(out, parents, backward_fn, "conv3d")


def conv_transpose3d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Transposed convolution with stride equal to the kernel size.

    ``kernel`` has shape ``[C_in, C_out, f, f, f]``; each input voxel is mapped
    to a non-overlapping ``f×f×f`` output block.

    """

    _check_volume(x, "conv_transpose3d")

    n_batch, c_in, nh, nw, nd = x.shape
    k_in, c_out, fh, fw, fd = kernel.shape

    if k_in != c_in:
        raise ShapeError(f"conv_transpose3d(): input {c_in} vs kernel {k_in}.")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv_transpose3d(): bias {bias.shape}.")

    out = numpy.zeros((n_batch, c_out, nh * fh, nw * fw, nd * fd))
    offsets = [(ii, jj, kk) for ii in range(fh) for jj in range(fw) for kk in range(fd)]

    for ii, jj, kk in offsets:
        block = numpy.tensordot(x.data, kernel.data[:, :, ii, jj, kk], axes=(1, 0))
        out[:, :, ii::fh, jj::fw, kk::fd] = block.transpose(0, 4, 1, 2, 3)

    if bias is not None:
        out += bias.data.reshape(1, c_out, 1, 1, 1)

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward_fn(grad):
        grad_x = numpy.zeros_like(x.data)
        grad_kernel = numpy.zeros_like(kernel.data)

        for ii, jj, kk in offsets:
            sub_grad = grad[:, :, ii::fh, jj::fw, kk::fd]
            back = numpy.tensordot(sub_grad, kernel.data[:, :, ii, jj, kk], axes=(1, 1))
            grad_x += back.transpose(0, 4, 1, 2, 3)
            grad_kernel[:, :, ii, jj, kk] = numpy.tensordot(
                x.data,
                sub_grad,
                axes=((0, 2, 3, 4), (0, 2, 3, 4)),
            )

        grads = [grad_x, grad_kernel]
        if bias is not None:
            grads.append(grad.sum(axis=(0, 2, 3, 4)))

        return grads

    return apply_op(out, parents, backward_fn, "conv_transpose3d")


def maxpool3d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping max pooling.

    The gradient goes to the first maximal element of each window, in
    row-major window order.

    """

    _check_volume(x, "maxpool3d")

    n_batch, n_chan, nh, nw, nd = x.shape
    if nh % window or nw % window or nd % window:
        raise ShapeError(f"maxpool3d(): {x.shape[2:]} not divisible by {window}.")

    oh, ow, od = nh // window, nw // window, nd // window
    ww = window

    blocks = x.data.reshape(n_batch, n_chan, oh, ww, ow, ww, od, ww)
    blocks = blocks.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(
        n_batch, n_chan, oh, ow, od, ww**3
    )

    argmax = blocks.argmax(axis=-1)[..., None]
    out = numpy.take_along_axis(blocks, argmax, axis=-1)[..., 0]

    def backward_fn(grad):
        grad_blocks = numpy.zeros((n_batch, n_chan, oh, ow, od, ww**3))
        numpy.put_along_axis(grad_blocks, argmax, grad[..., None], axis=-1)
        grad_blocks = grad_blocks.reshape(n_batch, n_chan, oh, ow, od, ww, ww, ww)
        grad_x = grad_blocks.transpose(0, 1, 2, 5, 3, 6, 4, 7).reshape(x.shape)
        return (grad_x,)

    return apply_op(out, (x,), backward_fn, "maxpool3d")


def upsample_nearest3d(x: Tensor, factor: int = 2) -> Tensor:
    """Replicates each voxel into a ``factor³`` block."""

    _check_volume(x, "upsample_nearest3d")

    out = x.data
    for axis in (2, 3, 4):
        out = numpy.repeat(out, factor, axis=axis)

    n_batch, n_chan, nh, nw, nd = x.shape

    def backward_fn(grad):
        grad = grad.reshape(n_batch, n_chan, nh, factor, nw, factor, nd, factor)
        return (grad.sum(axis=(3, 5, 7)),)

    return apply_op(out, (x,), backward_fn, "upsample")


def batch_norm3d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: numpy.ndarray,
    running_var: numpy.ndarray,
    training: bool = True,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalisation over the batch and spatial axes.

    In training mode the batch statistics are used and the running buffers
    are updated in place (the running variance uses the unbiased estimate).

    """

    _check_volume(x, "batch_norm3d")

    n_chan = x.shape[1]
    if gamma.shape != (n_chan,) or beta.shape != (n_chan,):
        raise ShapeError("batch_norm3d(): affine parameters do not match channels.")

    axes = (0, 2, 3, 4)
    bshape = (1, n_chan, 1, 1, 1)
    count = x.size // n_chan

    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * count / (count - 1) if count > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mean = running_mean.copy()
        var = running_var.copy()

    inv_std = 1.0 / numpy.sqrt(var + eps)
    xhat = (x.data - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def backward_fn(grad):
        grad_gamma = (grad * xhat).sum(axis=axes)
        grad_beta = grad.sum(axis=axes)
        grad_xhat = grad * gamma.data.reshape(bshape)

        if training:
            sum_g = grad_xhat.sum(axis=axes).reshape(bshape)
            sum_gx = (grad_xhat * xhat).sum(axis=axes).reshape(bshape)
            scale = inv_std.reshape(bshape) / count
            grad_x = scale * (count * grad_xhat - sum_g - xhat * sum_gx)
        else:
            grad_x = grad_xhat * inv_std.reshape(bshape)

        return grad_x, grad_gamma, grad_beta

    return apply_op(out, (x, gamma, beta), backward_fn, "batch_norm3d")
