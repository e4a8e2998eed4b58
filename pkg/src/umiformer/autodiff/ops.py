"""The closed set of differentiable ops used by the model.

Shape rules (no implicit broadcasting anywhere; use :func:`broadcast`):

=====================  ==========================================================
op                     rule
=====================  ==========================================================
matmul                 a (..., m, k) @ b (k, n) -> (..., m, n), or b (..., k, n)
                       with leading dims identical to a's
add, sub, mul, div     identical shapes -> same shape
scalar_mul             any -> same
exp, log, tanh, gelu   any -> same
softmax, layernorm     any, normalized along ``axis`` -> same
reduce_{sum,mean,max}  drops ``axis`` (int, tuple or None for all)
reshape                same element count
transpose              permutation of axes (reverse when omitted)
concat                 equal shapes except along ``axis``
gather                 x.shape[:axis] + indices.shape + x.shape[axis+1:]
broadcast              equal rank; each input dim is 1 or equals the target
nearest_upsample_3d    (..., X, Y, Z, C) -> (..., fX, fY, fZ, C)
conv3d_pointwise       (..., X, Y, Z, Cin) with w (Cin, Cout) -> (..., X, Y, Z, Cout)
=====================  ==========================================================

GELU is the tanh approximation
``0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x**3)))``.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import ContractError, NumericalError, ShapeError, Tensor, as_tensor

LAYERNORM_EPS = 1e-6
_GELU_C = math.sqrt(2.0 / math.pi)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} differ")


def _norm_axis(op: str, axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for rank {ndim}")
    return axis % ndim


def _norm_axes(op: str, axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (_norm_axis(op, axis, ndim),)
    return tuple(sorted(_norm_axis(op, a, ndim) for a in axis))


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return Tensor._from_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    return Tensor._from_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scalar_mul(a: Tensor, c: float) -> Tensor:
    return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,), "scalar_mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("div", a, b)
    if not np.all(b.data != 0):
        raise NumericalError(f"div: zero in denominator of shape {b.shape}")
    out = a.data / b.data

    def backward(g):
        gb = -g * out / b.data
        return g / b.data, gb

    return Tensor._from_op(out, (a, b), backward, "div")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericalError(f"log: non-positive input of shape {a.shape}")
    return Tensor._from_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def gelu(a: Tensor) -> Tensor:
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return Tensor._from_op(out, (a,), backward, "gelu")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _norm_axis("softmax", axis, a.ndim)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (a,), backward, "softmax")


def layernorm(a: Tensor, axis: int = -1, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize to zero mean and unit variance along ``axis`` (no affine)."""
    axis = _norm_axis("layernorm", axis, a.ndim)
    mu = a.data.mean(axis=axis, keepdims=True)
    centered = a.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=axis, keepdims=True) + eps)
    out = centered * inv_std

    def backward(g):
        gm = g.mean(axis=axis, keepdims=True)
        gym = (g * out).mean(axis=axis, keepdims=True)
        return (inv_std * (g - gm - out * gym),)

    return Tensor._from_op(out, (a,), backward, "layernorm")


def _restore_axes(g: np.ndarray, axes: tuple[int, ...], shape: tuple[int, ...]) -> np.ndarray:
    return np.broadcast_to(np.expand_dims(g, axes), shape)


def reduce_sum(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axes("reduce_sum", axis, a.ndim)
    out = np.asarray(a.data.sum(axis=axes))
    return Tensor._from_op(out, (a,), lambda g: (_restore_axes(g, axes, a.shape).copy(),), "reduce_sum")


def reduce_mean(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axes("reduce_mean", axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = np.asarray(a.data.mean(axis=axes))
    return Tensor._from_op(out, (a,), lambda g: (_restore_axes(g / count, axes, a.shape).copy(),), "reduce_mean")


def reduce_max(a: Tensor, axis: int) -> Tensor:
    """Max along one axis; the gradient goes to the first maximal entry."""
    axis = _norm_axis("reduce_max", axis, a.ndim)
    idx = np.expand_dims(a.data.argmax(axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx, np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return Tensor._from_op(out, (a,), backward, "reduce_max")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    known = [s for s in shape if s != -1]
    if shape.count(-1) > 1 or any(s <= 0 for s in known):
        raise ShapeError(f"reshape: invalid target shape {shape}")
    if -1 not in shape and int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: cannot reshape {a.shape} ({a.data.size} elements) to {shape}")
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from exc
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(_norm_axis("transpose", ax, a.ndim) for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of rank {a.ndim}")
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return Tensor._from_op(out, (a,), lambda g: (g.transpose(inverse),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat: needs at least one tensor")
    ndim = tensors[0].ndim
    axis = _norm_axis("concat", axis, ndim)
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis):
            raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} differ off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return Tensor._from_op(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def gather(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Select entries along ``axis``; gradient scatter-adds, repeated indices accumulate."""
    axis = _norm_axis("gather", axis, a.ndim)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ContractError(f"gather: indices must be integers, got {idx.dtype}")
    size = a.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise ShapeError(f"gather: index out of range [0, {size}) on axis {axis}")
    out = np.take(a.data, idx, axis=axis)

    def backward(g):
        ga = np.zeros_like(a.data)
        if axis == 0:
            flat_g = g.reshape((idx.size,) + a.shape[1:])
            np.add.at(ga, idx.ravel(), flat_g)
        else:
            moved = np.moveaxis(ga, axis, 0)
            gm = np.moveaxis(g.reshape(a.shape[:axis] + (idx.size,) + a.shape[axis + 1:]), axis, 0)
            np.add.at(moved, idx.ravel(), gm)
        return (ga,)

    return Tensor._from_op(out, (a,), backward, "gather")


def broadcast(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if len(shape) != a.ndim or any(s != 1 and s != t for s, t in zip(a.shape, shape)):
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s == 1 and t != 1)
    out = np.broadcast_to(a.data, shape).copy()
    return Tensor._from_op(out, (a,), lambda g: (g.sum(axis=axes, keepdims=True),), "broadcast")


def nearest_upsample_3d(a: Tensor, factor: int = 2) -> Tensor:
    if a.ndim < 4:
        raise ShapeError(f"nearest_upsample_3d: needs (..., X, Y, Z, C), got {a.shape}")
    f = int(factor)
    out = a.data
    for ax in (-4, -3, -2):
        out = np.repeat(out, f, axis=ax)

    def backward(g):
        lead = g.shape[:-4]
        x, y, z, c = a.shape[-4:]
        blocks = g.reshape(lead + (x, f, y, f, z, f, c))
        n = len(lead)
        return (blocks.sum(axis=(n + 1, n + 3, n + 5)),)

    return Tensor._from_op(out, (a,), backward, "nearest_upsample_3d")


def conv3d_pointwise(a: Tensor, w: Tensor) -> Tensor:
    """1x1x1 convolution over a channel-last volume."""
    if a.ndim < 4 or w.ndim != 2 or a.shape[-1] != w.shape[0]:
        raise ShapeError(f"conv3d_pointwise: volume {a.shape} incompatible with kernel {w.shape}")
    cin = w.shape[0]
    flat = a.data.reshape(-1, cin)
    out = (flat @ w.data).reshape(a.shape[:-1] + (w.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        return (g2 @ w.data.T).reshape(a.shape), flat.T @ g2

    return Tensor._from_op(out, (a, w), backward, "conv3d_pointwise")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ ({a.shape} @ {b.shape})")
    if b.ndim == 2:
        k = a.shape[-1]
        flat = a.data.reshape(-1, k)
        out = (flat @ b.data).reshape(a.shape[:-1] + (b.shape[1],))

        def backward(g):
            g2 = g.reshape(-1, b.shape[1])
            return (g2 @ b.data.T).reshape(a.shape), flat.T @ g2

        return Tensor._from_op(out, (a, b), backward, "matmul")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading dims differ ({a.shape} @ {b.shape})")
    out = np.matmul(a.data, b.data)

    def backward(g):
        return np.matmul(g, np.swapaxes(b.data, -1, -2)), np.matmul(np.swapaxes(a.data, -1, -2), g)

    return Tensor._from_op(out, (a, b), backward, "matmul")


OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scalar_mul": scalar_mul,
    "div": div,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "gelu": gelu,
    "softmax": softmax,
    "layernorm": layernorm,
    "reduce_sum": reduce_sum,
    "reduce_mean": reduce_mean,
    "reduce_max": reduce_max,
    "reshape": reshape,
    "transpose": transpose,
    "concat": concat,
    "gather": gather,
    "broadcast": broadcast,
    "nearest_upsample_3d": nearest_upsample_3d,
    "conv3d_pointwise": conv3d_pointwise,
}


def forward_op(op_kind: str, *inputs, **attrs) -> Tensor:
    """Dispatch by name, e.g. ``forward_op("softmax", x, axis=0)``."""
    try:
        fn = OPS[op_kind.replace("-", "_")]
    except KeyError:
        raise ContractError(f"unknown op {op_kind!r}; valid ops: {', '.join(OPS)}") from None
    return fn(*inputs, **attrs)


# helpers composed from the ops above


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a vector along the last axis of ``x``."""
    shaped = reshape(bias, (1,) * (x.ndim - 1) + (bias.shape[-1],))
    return add(x, broadcast(shaped, x.shape))


def sigmoid(x: Tensor) -> Tensor:
    """Logistic squash written as ``0.5 * (1 + tanh(x / 2))``."""
    t = tanh(scalar_mul(x, 0.5))
    half = Tensor(np.full(x.shape, 0.5, dtype=x.dtype))
    return add(scalar_mul(t, 0.5), half)


def constant_like(x: Tensor, value: float) -> Tensor:
    return Tensor(np.full(x.shape, value, dtype=x.dtype))
