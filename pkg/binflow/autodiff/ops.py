"""
Differentiable primitives.

Each primitive is registered once with a shape rule and a forward function that
returns ``(output, vjp)``; ``apply_primitive`` validates shapes, runs the
forward pass, checks finiteness and records the application on the tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from binflow.autodiff.tensor import (
    NonFiniteError,
    ShapeError,
    TapeRecord,
    Tensor,
    TensorLike,
    as_tensor,
    get_tape,
    is_grad_enabled,
)

ForwardFn = Callable[..., Tuple[np.ndarray, Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]]]
ShapeRule = Callable[..., None]


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: ForwardFn
    shape_rule: Optional[ShapeRule] = None
    arity: int = 1  # -1 means variadic


PRIMITIVES: Dict[str, Primitive] = {}


def primitive(name: str, arity: int = 1, shape_rule: Optional[ShapeRule] = None):
    def decorator(fn: ForwardFn) -> ForwardFn:
        if name in PRIMITIVES:
            raise ValueError(f"Primitive '{name}' is already registered")
        PRIMITIVES[name] = Primitive(name=name, forward=fn, shape_rule=shape_rule, arity=arity)
        return fn

    return decorator


def apply_primitive(op: str, *inputs: TensorLike, **attrs) -> Tensor:
    """
    Apply a registered primitive.

    :param op: primitive name
    :param inputs: tensor operands (python scalars and arrays are lifted to constants)
    :param attrs: non-differentiable attributes (axes, masks, ids, targets)
    :return: output tensor, recorded on the tape when any input requires grad
    """
    prim = PRIMITIVES.get(op)
    if prim is None:
        raise ValueError(f"Unknown primitive '{op}'")
    if prim.arity >= 0 and len(inputs) != prim.arity:
        raise ValueError(f"Primitive '{op}' takes {prim.arity} inputs, got {len(inputs)}")
    tensors = tuple(as_tensor(x) for x in inputs)
    arrays = tuple(t.data for t in tensors)
    if prim.shape_rule is not None:
        prim.shape_rule(*(a.shape for a in arrays), **attrs)

    with np.errstate(all="ignore"):
        out, vjp = prim.forward(*arrays, **attrs)
    dtype = np.result_type(*arrays)
    out = np.asarray(out, dtype=dtype)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"Primitive '{op}' produced non-finite values")

    track = is_grad_enabled() and any(t.requires_grad for t in tensors)
    result = Tensor(out, requires_grad=track, dtype=dtype)
    if track:
        record = TapeRecord(op=op, inputs=tensors, output=result, vjp=vjp)
        result._record = record
        get_tape().record(record)
    return result


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    return grad.reshape(shape)


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


# shape rules

def _elementwise_rule(a, b, **_):
    if a == b or a == () or b == ():
        return
    if len(a) > len(b) and a[len(a) - len(b):] == b:
        return
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return
    raise ShapeError(f"shapes {a} and {b} do not broadcast (only scalar or trailing-suffix expansion)")


def _matmul_rule(a, b, **_):
    if len(a) < 2 or len(b) < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a} and {b}")
    if a[-1] != b[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a} and {b}")
    if len(b) > 2 and a[:-2] != b[:-2]:
        raise ShapeError(f"batched matmul needs equal leading dimensions: {a} and {b}")


def _reshape_rule(x, shape=(), **_):
    shape = tuple(shape)
    count = int(np.prod(x, dtype=np.int64))
    known = [d for d in shape if d != -1]
    if shape.count(-1) > 1 or any(d <= 0 for d in known):
        raise ShapeError(f"cannot reshape {x} into {shape}")
    known_count = int(np.prod(known, dtype=np.int64))
    if -1 in shape:
        if count % known_count:
            raise ShapeError(f"cannot reshape {x} into {shape}")
    elif known_count != count:
        raise ShapeError(f"cannot reshape {x} into {shape}")


def _transpose_rule(x, axes=None, **_):
    if axes is not None and sorted(a % len(x) for a in axes) != list(range(len(x))):
        raise ShapeError(f"axes {axes} are not a permutation for shape {x}")


def _concat_rule(*shapes, axis=0, **_):
    if not shapes:
        raise ShapeError("concat needs at least one input")
    first = shapes[0]
    ax = _norm_axis(axis, len(first))
    for shape in shapes[1:]:
        if len(shape) != len(first) or any(
            d1 != d2 for i, (d1, d2) in enumerate(zip(first, shape)) if i != ax
        ):
            raise ShapeError(f"concat along axis {axis} needs matching shapes, got {first} and {shape}")


def _slice_rule(x, axis=0, start=0, stop=None, **_):
    ax = _norm_axis(axis, len(x))
    stop = x[ax] if stop is None else stop
    if not 0 <= start < stop <= x[ax]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis {axis} of shape {x}")


def _expand_rule(x, axis=0, size=1, **_):
    _norm_axis(axis, len(x) + 1)
    if size <= 0:
        raise ShapeError(f"expand size must be positive, got {size}")


def _reduce_rule(x, axis=None, **_):
    if axis is None:
        return
    for ax in (axis if isinstance(axis, (tuple, list)) else (axis,)):
        _norm_axis(ax, len(x))


def _pool_rule(x, mask=None, **_):
    if len(x) < 2:
        raise ShapeError(f"pooling needs (..., S, D) input, got {x}")
    if mask is not None and tuple(np.shape(mask)) != tuple(x[:-1]):
        raise ShapeError(f"pool mask shape {np.shape(mask)} does not match {x[:-1]}")


def _axis_rule(x, axis=-1, **_):
    _norm_axis(axis, len(x))


def _layer_norm_rule(x, gamma, beta, **_):
    if not x or gamma != (x[-1],) or beta != (x[-1],):
        raise ShapeError(f"layer_norm needs gamma/beta of shape ({x[-1] if x else '?'},), got {gamma} and {beta}")


def _embedding_rule(table, ids=None, **_):
    if len(table) != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table}")


def _cross_entropy_rule(logits, targets=None, weights=None, **_):
    if len(logits) < 1 or tuple(np.shape(targets)) != tuple(logits[:-1]):
        raise ShapeError(f"cross_entropy targets {np.shape(targets)} do not match logits {logits}")
    if weights is not None and tuple(np.shape(weights)) != tuple(logits[:-1]):
        raise ShapeError(f"cross_entropy weights {np.shape(weights)} do not match logits {logits}")


def _bce_rule(logits, targets=None, **_):
    if tuple(np.shape(targets)) != tuple(logits):
        raise ShapeError(f"bce targets {np.shape(targets)} do not match logits {logits}")


def _masked_fill_rule(x, mask=None, **_):
    try:
        np.broadcast_shapes(np.shape(mask), x)
    except ValueError as e:
        raise ShapeError(f"mask {np.shape(mask)} does not broadcast to {x}") from e
    if np.broadcast_shapes(np.shape(mask), x) != tuple(x):
        raise ShapeError(f"mask {np.shape(mask)} would enlarge {x}")


def _same_shape_rule(x, keep=None, **_):
    if tuple(np.shape(keep)) != tuple(x):
        raise ShapeError(f"dropout mask {np.shape(keep)} does not match {x}")


def _square_rule(a, **_):
    if len(a) != 2 or a[0] != a[1]:
        raise ShapeError(f"inverse needs a square matrix, got {a}")


# arithmetic

@primitive("add", arity=2, shape_rule=_elementwise_rule)
def _add(a, b):
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


@primitive("sub", arity=2, shape_rule=_elementwise_rule)
def _sub(a, b):
    return a - b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


@primitive("mul", arity=2, shape_rule=_elementwise_rule)
def _mul(a, b):
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


@primitive("div", arity=2, shape_rule=_elementwise_rule)
def _div(a, b):
    out = a / b
    return out, lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape))


@primitive("neg")
def _neg(x):
    return -x, lambda g: (-g,)


@primitive("matmul", arity=2, shape_rule=_matmul_rule)
def _matmul(a, b):
    out = a @ b

    def vjp(g):
        if b.ndim == 2:
            ga = g @ b.T
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            ga = g @ np.swapaxes(b, -1, -2)
            gb = np.swapaxes(a, -1, -2) @ g
        return ga, gb

    return out, vjp


# structure

@primitive("transpose", shape_rule=_transpose_rule)
def _transpose(x, axes=None):
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(a % x.ndim for a in axes)
    inverse = tuple(np.argsort(axes))
    return np.transpose(x, axes), lambda g: (np.transpose(g, inverse),)


@primitive("reshape", shape_rule=_reshape_rule)
def _reshape(x, shape=()):
    return x.reshape(tuple(shape)), lambda g: (g.reshape(x.shape),)


@primitive("concat", arity=-1, shape_rule=_concat_rule)
def _concat(*xs, axis=0):
    ax = axis % xs[0].ndim
    bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return np.concatenate(xs, axis=ax), lambda g: tuple(np.split(g, bounds, axis=ax))


@primitive("slice", shape_rule=_slice_rule)
def _slice(x, axis=0, start=0, stop=None):
    ax = axis % x.ndim
    index = [slice(None)] * x.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)

    def vjp(g):
        grad = np.zeros_like(x)
        grad[index] = g
        return (grad,)

    return x[index], vjp


@primitive("expand", shape_rule=_expand_rule)
def _expand(x, axis=0, size=1):
    ax = axis % (x.ndim + 1)
    return np.repeat(np.expand_dims(x, ax), size, axis=ax), lambda g: (g.sum(axis=ax),)


# reductions

def _restore_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        axes = axis if isinstance(axis, (tuple, list)) else (axis,)
        g = np.expand_dims(g, tuple(a % len(shape) for a in axes))
    return np.broadcast_to(g, shape).copy()


@primitive("sum", shape_rule=_reduce_rule)
def _sum(x, axis=None, keepdims=False):
    out = x.sum(axis=None if axis is None else tuple(np.atleast_1d(axis)), keepdims=keepdims)
    return out, lambda g: (_restore_reduced(g, x.shape, axis, keepdims),)


@primitive("mean", shape_rule=_reduce_rule)
def _mean(x, axis=None, keepdims=False):
    out = x.mean(axis=None if axis is None else tuple(np.atleast_1d(axis)), keepdims=keepdims)
    count = x.size / max(np.size(out), 1)
    return out, lambda g: (_restore_reduced(g / count, x.shape, axis, keepdims),)


def _valid_mask(x, mask):
    if mask is None:
        return np.ones(x.shape[:-1], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ValueError("pooling mask leaves a sequence with no valid position")
    return mask


@primitive("max_pool", shape_rule=_pool_rule)
def _max_pool(x, mask=None):
    """Maximum over the sequence axis (-2) of valid positions."""
    valid = _valid_mask(x, mask)
    filled = np.where(valid[..., None], x, -np.inf)
    idx = np.argmax(filled, axis=-2)[..., None, :]
    out = np.take_along_axis(x, idx, axis=-2)[..., 0, :]

    def vjp(g):
        grad = np.zeros_like(x)
        np.put_along_axis(grad, idx, g[..., None, :], axis=-2)
        return (grad,)

    return out, vjp


@primitive("mean_pool", shape_rule=_pool_rule)
def _mean_pool(x, mask=None):
    """Average over the sequence axis (-2) of valid positions."""
    weights = _valid_mask(x, mask).astype(x.dtype)
    count = weights.sum(axis=-1, keepdims=True)
    out = (x * weights[..., None]).sum(axis=-2) / count
    return out, lambda g: ((g / count)[..., None, :] * weights[..., None],)


# nonlinearities

@primitive("softmax", shape_rule=_axis_rule)
def _softmax(x, axis=-1):
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    return y, lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


@primitive("log_softmax", shape_rule=_axis_rule)
def _log_softmax(x, axis=-1):
    shifted = x - x.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    return out, lambda g: (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)


@primitive("sigmoid")
def _sigmoid(x):
    y = 0.5 * (1.0 + np.tanh(0.5 * x))
    return y, lambda g: (g * y * (1.0 - y),)


@primitive("tanh")
def _tanh(x):
    y = np.tanh(x)
    return y, lambda g: (g * (1.0 - y * y),)


@primitive("exp")
def _exp(x):
    y = np.exp(x)
    return y, lambda g: (g * y,)


@primitive("log")
def _log(x):
    return np.log(x), lambda g: (g / x,)


@primitive("relu")
def _relu(x):
    return np.maximum(x, 0), lambda g: (g * (x > 0),)


@primitive("layer_norm", arity=3, shape_rule=_layer_norm_rule)
def _layer_norm(x, gamma, beta, eps=1e-5):
    dim = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(x.var(axis=-1, keepdims=True) + eps)
    xhat = (x - mu) * rstd

    def vjp(g):
        gh = g * gamma
        gx = rstd / dim * (
            dim * gh - gh.sum(axis=-1, keepdims=True) - xhat * (gh * xhat).sum(axis=-1, keepdims=True)
        )
        return gx, (g * xhat).reshape(-1, dim).sum(axis=0), g.reshape(-1, dim).sum(axis=0)

    return xhat * gamma + beta, vjp


# lookups and losses

@primitive("embedding", shape_rule=_embedding_rule)
def _embedding(table, ids=None):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"embedding ids out of range [0, {table.shape[0]})")

    def vjp(g):
        grad = np.zeros_like(table)
        np.add.at(grad, ids, g)
        return (grad,)

    return table[ids], vjp


@primitive("cross_entropy", shape_rule=_cross_entropy_rule)
def _cross_entropy(logits, targets=None, weights=None):
    """Weighted mean token negative log-likelihood; zero-weight positions are ignored."""
    targets = np.asarray(targets, dtype=np.int64)
    vocab = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise ValueError(f"cross_entropy targets out of range [0, {vocab})")
    w = np.ones(targets.shape, dtype=logits.dtype) if weights is None else np.asarray(weights, dtype=logits.dtype)
    denom = max(float(w.sum()), 1.0)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    out = (nll * w).sum() / denom

    def vjp(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, targets[..., None], np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (grad * (w / denom)[..., None] * g,)

    return out, vjp


@primitive("bce_with_logits", shape_rule=_bce_rule)
def _bce_with_logits(logits, targets=None):
    t = np.asarray(targets, dtype=logits.dtype)
    loss = np.maximum(logits, 0) - logits * t + np.log1p(np.exp(-np.abs(logits)))
    n = logits.size

    def vjp(g):
        p = 0.5 * (1.0 + np.tanh(0.5 * logits))
        return ((p - t) / n * g,)

    return loss.mean(), vjp


@primitive("masked_fill", shape_rule=_masked_fill_rule)
def _masked_fill(x, mask=None, value=0.0):
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    return np.where(mask, value, x), lambda g: (np.where(mask, 0.0, g).astype(g.dtype),)


@primitive("dropout", shape_rule=_same_shape_rule)
def _dropout(x, keep=None):
    keep = np.asarray(keep, dtype=x.dtype)
    return x * keep, lambda g: (g * keep,)


@primitive("inverse", shape_rule=_square_rule)
def _inverse(a):
    try:
        inv = np.linalg.inv(a)
    except np.linalg.LinAlgError as e:
        raise ValueError(f"matrix is singular: {e}") from e
    return inv, lambda g: (-inv.T @ g @ inv.T,)


# functional surface

def add(a: TensorLike, b: TensorLike) -> Tensor:
    return apply_primitive("add", a, b)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    return apply_primitive("sub", a, b)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    return apply_primitive("mul", a, b)


def div(a: TensorLike, b: TensorLike) -> Tensor:
    return apply_primitive("div", a, b)


def neg(x: TensorLike) -> Tensor:
    return apply_primitive("neg", x)


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    return apply_primitive("matmul", a, b)


def transpose(x: TensorLike, axes=None) -> Tensor:
    return apply_primitive("transpose", x, axes=axes)


def swap_last(x: TensorLike) -> Tensor:
    nd = as_tensor(x).ndim
    axes = list(range(nd))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes=tuple(axes))


def reshape(x: TensorLike, shape) -> Tensor:
    return apply_primitive("reshape", x, shape=tuple(shape))


def concat(xs: Sequence[TensorLike], axis: int = 0) -> Tensor:
    return apply_primitive("concat", *xs, axis=axis)


def slice_axis(x: TensorLike, axis: int, start: int, stop: Optional[int] = None) -> Tensor:
    return apply_primitive("slice", x, axis=axis, start=start, stop=stop)


def split(x: TensorLike, sections: int, axis: int = -1) -> Tuple[Tensor, ...]:
    """Split into equal parts along ``axis`` (composed from slices)."""
    x = as_tensor(x)
    size = x.shape[axis]
    if sections <= 0 or size % sections:
        raise ShapeError(f"cannot split axis of size {size} into {sections} parts")
    step = size // sections
    return tuple(slice_axis(x, axis, i * step, (i + 1) * step) for i in range(sections))


def expand(x: TensorLike, axis: int, size: int) -> Tensor:
    return apply_primitive("expand", x, axis=axis, size=size)


def sum(x: TensorLike, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return apply_primitive("sum", x, axis=axis, keepdims=keepdims)


def mean(x: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    return apply_primitive("mean", x, axis=axis, keepdims=keepdims)


def max_pool(x: TensorLike, mask=None) -> Tensor:
    return apply_primitive("max_pool", x, mask=mask)


def mean_pool(x: TensorLike, mask=None) -> Tensor:
    return apply_primitive("mean_pool", x, mask=mask)


def softmax(x: TensorLike, axis: int = -1) -> Tensor:
    return apply_primitive("softmax", x, axis=axis)


def log_softmax(x: TensorLike, axis: int = -1) -> Tensor:
    return apply_primitive("log_softmax", x, axis=axis)


def sigmoid(x: TensorLike) -> Tensor:
    return apply_primitive("sigmoid", x)


def tanh(x: TensorLike) -> Tensor:
    return apply_primitive("tanh", x)


def exp(x: TensorLike) -> Tensor:
    return apply_primitive("exp", x)


def log(x: TensorLike) -> Tensor:
    return apply_primitive("log", x)


def relu(x: TensorLike) -> Tensor:
    return apply_primitive("relu", x)


def layer_norm(x: TensorLike, gamma: TensorLike, beta: TensorLike, eps: float = 1e-5) -> Tensor:
    return apply_primitive("layer_norm", x, gamma, beta, eps=eps)


def embedding(table: TensorLike, ids) -> Tensor:
    return apply_primitive("embedding", table, ids=ids)


def cross_entropy(logits: TensorLike, targets, weights=None) -> Tensor:
    return apply_primitive("cross_entropy", logits, targets=targets, weights=weights)


def bce_with_logits(logits: TensorLike, targets) -> Tensor:
    return apply_primitive("bce_with_logits", logits, targets=targets)


def masked_fill(x: TensorLike, mask, value: float) -> Tensor:
    return apply_primitive("masked_fill", x, mask=mask, value=value)


def dropout(x: TensorLike, rate: float, rng: Optional[np.random.Generator], training: bool = True) -> Tensor:
    """Inverted dropout; identity when not training or rate is zero."""
    if not training or rate <= 0.0 or rng is None:
        return as_tensor(x)
    x = as_tensor(x)
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return apply_primitive("dropout", x, keep=keep)


def inverse(a: TensorLike) -> Tensor:
    return apply_primitive("inverse", a)


def square_norm(x: TensorLike) -> Tensor:
    return sum(mul(x, x))


def log_standard_normal(x: TensorLike) -> Tensor:
    """Per-row log density of a standard normal over the last axis."""
    x = as_tensor(x)
    dim = x.shape[-1]
    return add(mul(sum(mul(x, x), axis=-1), -0.5), -0.5 * dim * math.log(2.0 * math.pi))
