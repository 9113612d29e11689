"""
Differentiable Operations - engine/ops.py

RESPONSIBILITIES:
-----------------
Every op the phase-profile network needs, each as a pair of pure array
kernels (forward, backward) registered through ``apply_op``:

- conv2d / conv3d        cross-correlation, zero "same" padding, stride
- interp3d / resize3d    trilinear resampling, align-corners=false
- softmax                max-subtracted, along any axis
- concat                 along any axis; backward splits the gradient
- broadcast_add          trailing-axis broadcasting; backward reduces
- mul, sub, neg, power, sum, mean, reshape, permute, index,
  broadcast_to, log, clamp_min, relu, tanh

CONVENTIONS:
-----------
- No kernel flip: conv(x, w)[o, p] = sum_{c, k} w[o, c, k] * x[c, p*s + k]
- "same" needs odd kernels and pads (k - 1) / 2 zeros on each side
- Resampling source coordinate: (i + 0.5) * n_in / n_out - 0.5, clamped
  at 0, neighbour index clamped at n_in - 1
- Convolution accumulates kernel offsets, then batch items, in a fixed
  order so results are bitwise reproducible
"""

import logging
import math
from collections.abc import Sequence
from fractions import Fraction
from functools import partial
from typing import Any, Optional, Union

import numpy as np

from engine.tensor import Tensor, apply_op, as_tensor
from utils.validation import ShapeError, ValidationError

logger = logging.getLogger(__name__)

Axis = Optional[Union[int, tuple[int, ...]]]


# ============================================================================
# BROADCASTING HELPERS
# ============================================================================

def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the axes that broadcasting expanded from ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(a, b))
    except ValueError as e:
        raise ShapeError(f"{op}: shapes {a} and {b} are not broadcast-compatible", field=op, value=(a, b)) from e


def _normalize_axis(op: str, axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ValidationError(f"{op}: axis {axis} out of range for rank {ndim}", field="axis", value=axis)
    return axis % ndim


# ============================================================================
# ELEMENTWISE ARITHMETIC
# ============================================================================

def _add_backward(g, x, y, *, out):
    return _unbroadcast(g, x.shape), _unbroadcast(g, y.shape)


def broadcast_add(a: Any, b: Any) -> Tensor:
    """
    Elementwise sum with trailing-axis broadcasting (size-1 expansion).

    Raises:
        ShapeError: incompatible shapes
    """
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("broadcast_add", a.shape, b.shape)
    return apply_op("broadcast_add", np.add, _add_backward, a, b)


def _sub_backward(g, x, y, *, out):
    return _unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)


def sub(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a.shape, b.shape)
    return apply_op("sub", np.subtract, _sub_backward, a, b)


def _mul_backward(g, x, y, *, out):
    return _unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)


def mul(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)
    return apply_op("mul", np.multiply, _mul_backward, a, b)


def neg(a: Tensor) -> Tensor:
    return apply_op("neg", np.negative, lambda g, x, *, out: (-g,), as_tensor(a))


def power(a: Tensor, exponent: float) -> Tensor:
    p = float(exponent)

    def forward(x):
        return np.power(x, p)

    def backward(g, x, *, out):
        return (g * p * np.power(x, p - 1.0),)

    return apply_op("power", forward, backward, as_tensor(a))


def log(a: Tensor) -> Tensor:
    return apply_op("log", np.log, lambda g, x, *, out: (g / x,), as_tensor(a))


def clamp_min(a: Tensor, low: float) -> Tensor:
    """max(a, low); gradient passes where a >= low."""
    def forward(x):
        return np.maximum(x, low)

    def backward(g, x, *, out):
        return (g * (x >= low),)

    return apply_op("clamp_min", forward, backward, as_tensor(a))


def relu(a: Tensor) -> Tensor:
    def forward(x):
        return np.maximum(x, 0.0)

    def backward(g, x, *, out):
        return (g * (x > 0.0),)

    return apply_op("relu", forward, backward, as_tensor(a))


def tanh(a: Tensor) -> Tensor:
    def backward(g, x, *, out):
        return (g * (1.0 - out * out),)

    return apply_op("tanh", np.tanh, backward, as_tensor(a))


# ============================================================================
# REDUCTIONS AND SHAPE OPS
# ============================================================================

def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis: Axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = tuple(sorted(a % len(shape) for a in axes))
        for a in axes:
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape).copy()


def sum(a: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def forward(x):
        return np.sum(x, axis=axis, keepdims=keepdims)

    def backward(g, x, *, out):
        return (_expand_reduced(g, x.shape, axis, keepdims),)

    return apply_op("sum", forward, backward, as_tensor(a))


def mean(a: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = math.prod(a.shape[ax] for ax in axes)

    def forward(x):
        return np.sum(x, axis=axis, keepdims=keepdims) / count

    def backward(g, x, *, out):
        return (_expand_reduced(g, x.shape, axis, keepdims) / count,)

    return apply_op("mean", forward, backward, a)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    target = tuple(int(s) for s in shape)
    if -1 not in target and math.prod(target) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {target}", field="shape", value=target)

    def forward(x):
        return x.reshape(target)

    def backward(g, x, *, out):
        return (g.reshape(x.shape),)

    return apply_op("reshape", forward, backward, a)


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    order = tuple(int(ax) for ax in axes)
    if sorted(order) != list(range(a.ndim)):
        raise ShapeError(f"invalid permutation {order} for rank {a.ndim}", field="axes", value=order)
    inverse = tuple(int(i) for i in np.argsort(order))

    def forward(x):
        return np.transpose(x, order)

    def backward(g, x, *, out):
        return (np.transpose(g, inverse),)

    return apply_op("permute", forward, backward, a)


def _is_basic_index(key: Any) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, np.integer, slice)) or k is None or k is Ellipsis for k in parts)


def index(a: Tensor, key: Any) -> Tensor:
    """Basic/advanced indexing; backward scatters (np.add.at for repeats)."""
    basic = _is_basic_index(key)

    def forward(x):
        return np.array(x[key], dtype=np.float64)

    def backward(g, x, *, out):
        grad = np.zeros_like(x)
        if basic:
            grad[key] += g
        else:
            np.add.at(grad, key, g)
        return (grad,)

    return apply_op("index", forward, backward, as_tensor(a))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Replicate ``a`` to ``shape``; backward sums over the replicated axes."""
    a = as_tensor(a)
    target = tuple(int(s) for s in shape)
    if _broadcast_shape("broadcast_to", a.shape, target) != target:
        raise ShapeError(f"cannot broadcast {a.shape} to {target}", field="shape", value=target)

    def forward(x):
        return np.broadcast_to(x, target).copy()

    def backward(g, x, *, out):
        return (_unbroadcast(g, x.shape),)

    return apply_op("broadcast_to", forward, backward, a)


# ============================================================================
# SOFTMAX / CONCAT
# ============================================================================

def _softmax_forward(x: np.ndarray, *, axis: int) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def _softmax_backward(g, x, *, out, axis):
    return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)


def softmax(a: Tensor, axis: int) -> Tensor:
    """
    Numerically stabilised softmax along ``axis``.

    Example:
        >>> softmax(Tensor([1000.0, 0.0]), axis=0).data
        array([1., 0.])
    """
    a = as_tensor(a)
    ax = _normalize_axis("softmax", axis, a.ndim)
    return apply_op(
        "softmax",
        partial(_softmax_forward, axis=ax),
        partial(_softmax_backward, axis=ax),
        a,
    )


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    """
    Concatenate along ``axis``; every other dimension must agree.

    Raises:
        ShapeError: empty list or off-axis disagreement
    """
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeError("concat needs at least one tensor", field="tensors")
    ax = _normalize_axis("concat", axis, parts[0].ndim)
    reference = parts[0].shape
    for t in parts[1:]:
        if t.ndim != len(reference) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, reference)) if i != ax
        ):
            raise ShapeError(
                f"concat: shape {t.shape} disagrees with {reference} off axis {ax}",
                field="tensors",
                value=t.shape,
            )
    bounds = np.cumsum([t.shape[ax] for t in parts])[:-1]

    def forward(*xs):
        return np.concatenate(xs, axis=ax)

    def backward(g, *xs, out):
        return tuple(np.split(g, bounds, axis=ax))

    return apply_op("concat", forward, backward, *parts)


# ============================================================================
# CONVOLUTION
# ============================================================================

def _window(offset: tuple[int, ...], out_sizes: Sequence[int], stride: int) -> tuple[slice, ...]:
    return tuple(slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(offset, out_sizes))


def _pad(x: np.ndarray, pads: Sequence[int]) -> np.ndarray:
    if not any(pads):
        return x
    return np.pad(x, [(0, 0), (0, 0)] + [(p, p) for p in pads])


def _conv_forward(x, w, b, *, stride, pads):
    xp = _pad(x, pads)
    kernel = w.shape[2:]
    out_sizes = [(xp.shape[2 + i] - k) // stride + 1 for i, k in enumerate(kernel)]
    n = len(kernel)
    out = np.empty((x.shape[0], w.shape[0], *out_sizes), dtype=np.float64)
    out[...] = b.reshape((1, -1) + (1,) * n)
    for offset in np.ndindex(*kernel):
        w_o = w[(slice(None), slice(None)) + offset]
        win = (slice(None),) + _window(offset, out_sizes, stride)
        for bi in range(x.shape[0]):
            out[bi] += np.tensordot(w_o, xp[bi][win], axes=([1], [0]))
    return out


def _conv_backward(g, x, w, b, *, out, stride, pads):
    xp = _pad(x, pads)
    kernel = w.shape[2:]
    n = len(kernel)
    out_sizes = g.shape[2:]
    spatial = tuple(range(1, n + 1))
    grad_xp = np.zeros_like(xp)
    grad_w = np.zeros_like(w)
    grad_b = g.sum(axis=(0,) + tuple(range(2, g.ndim)))
    for offset in np.ndindex(*kernel):
        w_index = (slice(None), slice(None)) + offset
        w_o = w[w_index]
        win = (slice(None),) + _window(offset, out_sizes, stride)
        for bi in range(x.shape[0]):
            grad_w[w_index] += np.tensordot(g[bi], xp[bi][win], axes=(spatial, spatial))
            grad_xp[bi][win] += np.tensordot(w_o, g[bi], axes=([0], [0]))
    crop = (slice(None), slice(None)) + tuple(slice(p, p + s) for p, s in zip(pads, x.shape[2:]))
    return grad_xp[crop], grad_w, grad_b


def _conv_nd(op: str, spatial_dims: int, input: Any, weight: Any, bias: Any, stride: int, padding: str) -> Tensor:
    x, w, b = as_tensor(input), as_tensor(weight), as_tensor(bias)
    rank = spatial_dims + 2
    if x.ndim != rank:
        raise ShapeError(f"{op}: input must be rank {rank}, got {x.shape}", field="input", value=x.shape)
    if w.ndim != rank:
        raise ShapeError(f"{op}: weight must be rank {rank}, got {w.shape}", field="weight", value=w.shape)
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"{op}: input has {x.shape[1]} channels but weight expects {w.shape[1]}",
            field="input",
            value=x.shape,
        )
    if b.shape != (w.shape[0],):
        raise ShapeError(f"{op}: bias must have shape ({w.shape[0]},), got {b.shape}", field="bias", value=b.shape)
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise ValidationError(f"{op}: stride must be a positive integer", field="stride", value=stride)

    kernel = w.shape[2:]
    if padding == "same":
        if any(k % 2 == 0 for k in kernel):
            raise ShapeError(f"{op}: 'same' padding needs odd kernel sizes, got {kernel}", field="weight", value=kernel)
        pads = tuple((k - 1) // 2 for k in kernel)
    elif padding == "valid":
        pads = (0,) * spatial_dims
    else:
        raise ValidationError(f"{op}: padding must be 'same' or 'valid'", field="padding", value=padding)

    padded = [s + 2 * p for s, p in zip(x.shape[2:], pads)]
    if any(k > s for k, s in zip(kernel, padded)):
        raise ShapeError(
            f"{op}: kernel {kernel} larger than padded input {tuple(padded)}",
            field="weight",
            value=kernel,
        )

    return apply_op(
        op,
        partial(_conv_forward, stride=int(stride), pads=pads),
        partial(_conv_backward, stride=int(stride), pads=pads),
        x, w, b,
    )


def conv2d(input: Any, weight: Any, bias: Any, stride: int = 1, padding: str = "same") -> Tensor:
    """
    2D cross-correlation.

    Args:
        input: [B, Cin, H, W]
        weight: [Cout, Cin, kh, kw]
        bias: [Cout]
        stride: step along both spatial axes
        padding: "same" (zero fill, odd kernels) or "valid"

    Returns:
        [B, Cout, H', W']
    """
    return _conv_nd("conv2d", 2, input, weight, bias, stride, padding)


def conv3d(input: Any, weight: Any, bias: Any, stride: int = 1, padding: str = "same") -> Tensor:
    """3D cross-correlation; input [B, Cin, D, H, W], weight [Cout, Cin, kd, kh, kw]."""
    return _conv_nd("conv3d", 3, input, weight, bias, stride, padding)


# ============================================================================
# TRILINEAR RESAMPLING
# ============================================================================

def _axis_plan(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    return i0, i1, lam


def _axis_matrix(n_in: int, n_out: int) -> np.ndarray:
    i0, i1, lam = _axis_plan(n_in, n_out)
    matrix = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(matrix, (rows, i0), 1.0 - lam)
    np.add.at(matrix, (rows, i1), lam)
    return matrix


def _resize_forward(x: np.ndarray, *, size: tuple[int, int, int]) -> np.ndarray:
    out = x
    for axis, n_out in zip((2, 3, 4), size):
        n_in = out.shape[axis]
        if n_in == n_out:
            continue
        i0, i1, lam = _axis_plan(n_in, n_out)
        lam_shape = [1] * out.ndim
        lam_shape[axis] = n_out
        a0 = np.take(out, i0, axis=axis)
        a1 = np.take(out, i1, axis=axis)
        out = a0 + lam.reshape(lam_shape) * (a1 - a0)
    return out.copy() if out is x else out


def _resize_backward(g, x, *, out, size):
    grad = g
    for axis in (4, 3, 2):
        n_in = x.shape[axis]
        n_out = grad.shape[axis]
        if n_in == n_out:
            continue
        matrix = _axis_matrix(n_in, n_out)
        grad = np.moveaxis(np.tensordot(grad, matrix, axes=([axis], [0])), -1, axis)
    return (grad,)


def resize3d(input: Any, size: Sequence[int]) -> Tensor:
    """
    Trilinear resampling of [B, C, D, H, W] to an explicit (D', H', W').

    Axes whose size is unchanged are passed through untouched.
    """
    x = as_tensor(input)
    if x.ndim != 5:
        raise ShapeError(f"resize3d: input must be rank 5, got {x.shape}", field="input", value=x.shape)
    target = tuple(int(s) for s in size)
    if len(target) != 3 or any(s < 1 for s in target):
        raise ShapeError(f"resize3d: output size must be three positive ints, got {target}", field="size", value=target)
    return apply_op(
        "resize3d",
        partial(_resize_forward, size=target),
        partial(_resize_backward, size=target),
        x,
    )


def parse_scale(scale: Union[str, float, int, Fraction]) -> Fraction:
    """Accept 0.5, "1/2", Fraction(1, 2) alike."""
    try:
        value = Fraction(scale).limit_denominator(1_000_000) if not isinstance(scale, Fraction) else scale
    except (ValueError, ZeroDivisionError, TypeError) as e:
        raise ValidationError(f"cannot parse scale {scale!r}", field="scale", value=scale) from e
    if value <= 0:
        raise ValidationError("scale must be positive", field="scale", value=scale)
    return value


def scaled_size(n: int, scale: Union[str, float, Fraction]) -> int:
    """round(n * scale) with halves rounded up, computed exactly."""
    return math.floor(n * parse_scale(scale) + Fraction(1, 2))


def interp3d(input: Any, scale: Union[str, float, Fraction]) -> Tensor:
    """
    Trilinear resampling of [B, C, D, H, W] by a positive rational factor.

    Output dims are round(n * scale). A scale of 1 is an exact identity.

    Raises:
        ValidationError: non-positive scale
        ShapeError: an output dimension would be zero
    """
    x = as_tensor(input)
    if x.ndim != 5:
        raise ShapeError(f"interp3d: input must be rank 5, got {x.shape}", field="input", value=x.shape)
    s = parse_scale(scale)
    size = tuple(scaled_size(n, s) for n in x.shape[2:])
    if any(n < 1 for n in size):
        raise ShapeError(f"interp3d: scale {s} maps {x.shape[2:]} to {size}", field="scale", value=str(s))
    return resize3d(x, size)
