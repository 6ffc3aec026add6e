from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

_DTYPES = {"float32": np.float32, "float64": np.float64}


class ShapeError(ValueError):
    """Raised when input shapes do not conform to a primitive's shape rule."""


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or Inf."""


class _State(threading.local):
    # grad mode and tape are per thread so evaluation workers never share a tape
    def __init__(self):
        self.grad_enabled = True
        self.tape = ComputationTape()


class _Precision:
    dtype = np.float32


_state = _Precision()


def default_dtype():
    return _state.dtype


def set_default_dtype(name: str) -> None:
    if name not in _DTYPES:
        raise ValueError(f"Unsupported precision '{name}', expected one of {sorted(_DTYPES)}")
    _state.dtype = _DTYPES[name]


@contextmanager
def precision(name: str):
    """Temporarily switch the dtype new tensors are created with."""
    previous = _state.dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        _state.dtype = previous


def is_grad_enabled() -> bool:
    return _thread.grad_enabled


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference passes)."""
    previous = _thread.grad_enabled
    _thread.grad_enabled = False
    try:
        yield
    finally:
        _thread.grad_enabled = previous


class Tensor:
    """
    Dense real array with optional gradient buffer.

    :param data: array-like values, converted to the active precision
    :param requires_grad: whether this tensor is a leaf whose gradient is wanted
    :param name: optional parameter name (used by checkpoints and the optimizer)
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        array = np.asarray(data, dtype=dtype or _state.dtype)
        if any(dim <= 0 for dim in array.shape):
            raise ShapeError(f"Tensor dimensions must be positive, got {array.shape}")
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._record: Optional["TapeRecord"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._record is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; every operator goes through a registered primitive
    def __add__(self, other):
        from binflow.autodiff import ops

        return ops.add(self, other)

    def __radd__(self, other):
        from binflow.autodiff import ops

        return ops.add(self, other)

    def __sub__(self, other):
        from binflow.autodiff import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from binflow.autodiff import ops

        return ops.add(ops.neg(self), other)

    def __mul__(self, other):
        from binflow.autodiff import ops

        return ops.mul(self, other)

    def __rmul__(self, other):
        from binflow.autodiff import ops

        return ops.mul(self, other)

    def __truediv__(self, other):
        from binflow.autodiff import ops

        return ops.div(self, other)

    def __neg__(self):
        from binflow.autodiff import ops

        return ops.neg(self)

    def __matmul__(self, other):
        from binflow.autodiff import ops

        return ops.matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        from binflow.autodiff import ops

        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from binflow.autodiff import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from binflow.autodiff import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape=shape)

    def transpose(self, *axes):
        from binflow.autodiff import ops

        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes=axes or None)


TensorLike = Union[Tensor, float, int, np.ndarray]


@dataclass
class TapeRecord:
    """One primitive application: which op, which inputs, which output."""

    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class ComputationTape:
    """Ordered record of primitive applications; inputs always precede outputs."""

    records: List[TapeRecord] = field(default_factory=list)

    def record(self, record: TapeRecord) -> None:
        self.records.append(record)

    def reset(self) -> None:
        for record in self.records:
            record.output._record = None
        self.records.clear()

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[TapeRecord]:
        return iter(self.records)


_thread = _State()


def get_tape() -> ComputationTape:
    return _thread.tape


@contextmanager
def fresh_tape():
    """Run a block against an empty tape and discard it afterwards."""
    tape = get_tape()
    tape.reset()
    try:
        yield tape
    finally:
        tape.reset()


def backward(loss: Tensor, tape: Optional[ComputationTape] = None) -> Dict[int, np.ndarray]:
    """
    Reverse-mode sweep over the tape.

    Every leaf tensor with ``requires_grad`` that the loss depends on receives
    ``grad`` (accumulated onto any existing buffer). The tape is consumed.

    :param loss: scalar tensor
    :return: map ``id(leaf) -> gradient`` for the leaves reached
    """
    if tape is None:
        tape = get_tape()
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")

    adjoints: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}
    if loss.is_leaf and loss.requires_grad:
        leaves[id(loss)] = loss

    for record in reversed(tape.records):
        out_grad = adjoints.pop(id(record.output), None)
        if out_grad is None:
            continue
        in_grads = record.vjp(out_grad)
        for tensor, grad in zip(record.inputs, in_grads):
            if grad is None or not tensor.requires_grad:
                continue
            if grad.shape != tensor.shape:
                raise ShapeError(
                    f"gradient of '{record.op}' has shape {grad.shape}, input has {tensor.shape}"
                )
            key = id(tensor)
            if key in adjoints:
                adjoints[key] = adjoints[key] + grad
            else:
                adjoints[key] = grad
            if tensor.is_leaf:
                leaves[key] = tensor

    result: Dict[int, np.ndarray] = {}
    for key, leaf in leaves.items():
        grad = adjoints.get(key)
        if grad is None:
            continue
        grad = grad.astype(leaf.data.dtype, copy=False)
        leaf.grad = grad if leaf.grad is None else leaf.grad + grad
        result[key] = leaf.grad
    tape.reset()
    return result


def tensor(data, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(value: TensorLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    """Glorot-uniform initial values in the active precision."""
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    shape = shape or (fan_in, fan_out)
    return rng.uniform(-bound, bound, size=shape).astype(_state.dtype)
