"""Tensor, tape and the reverse-mode sweep.

Every differentiable op builds its output through :func:`make_result`, which
records a node on the active :class:`Tape` whenever gradient tracking is on
and at least one input requires a gradient.  Nodes are appended in execution
order, so replaying them backwards is already a reverse topological order.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import ShapeError, TapeError

_DTYPES = {"float32": np.float32, "float64": np.float64, "fp32": np.float32, "fp64": np.float64}


class _State(threading.local):
    def __init__(self):
        self.dtype = np.float32
        self.grad_enabled = True
        self.tapes: list[Tape] = []
        self.default_tape: Optional[Tape] = None


_state = _State()


def get_default_dtype():
    return _state.dtype


def set_default_dtype(dtype) -> None:
    if isinstance(dtype, str):
        dtype = _DTYPES[dtype]
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _state.dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default float type (``"fp32"`` or ``"fp64"``)."""
    prev = _state.dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def is_grad_enabled() -> bool:
    return _state.grad_enabled


class Tensor:
    """Dense array with an optional gradient accumulator.

    ``data`` is never mutated by ops that record on a tape; optimizers write
    parameter values between steps, outside any recorded computation.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _state.dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(_state.dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[_Node] = None

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        t._node = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # Operator sugar; implementations live in ops.py.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.scalar_mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    @property
    def T(self):
        return self.transpose()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "backward_fn", "tape")

    def __init__(self, out, inputs, backward_fn, tape):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.tape = tape


class Tape:
    """Ordered record of differentiable ops; consumed by one backward pass.

    Use as a context manager to scope a training step::

        with Tape() as tape:
            loss = model_loss(...)
        tape.backward(loss)

    Ops executed outside any ``with Tape()`` block go to a lazily created
    default tape, which is replaced once it has been consumed.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise TapeError("tape already consumed by a backward pass")
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _state.tapes.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, node: _Node) -> None:
        if self.consumed:
            raise TapeError("cannot record on a consumed tape")
        self._nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise TapeError("tape already consumed by a backward pass")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._node is None or loss._node.tape is not self:
            raise TapeError("loss was not recorded on this tape")
        if not self._nodes:
            raise TapeError("tape is empty")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            node.out.grad = g
            in_grads = node.backward_fn(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if ig.shape != inp.data.shape:
                    raise ShapeError(
                        f"adjoint produced shape {ig.shape} for input of shape {inp.data.shape}"
                    )
                if inp._node is not None and inp._node.tape is self:
                    prev = grads.get(id(inp))
                    grads[id(inp)] = ig if prev is None else prev + ig
                else:
                    inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
        self._nodes.clear()
        self.consumed = True
        if _state.default_tape is self:
            _state.default_tape = None


def current_tape() -> Tape:
    if _state.tapes:
        return _state.tapes[-1]
    if _state.default_tape is None:
        _state.default_tape = Tape()
    return _state.default_tape


def make_result(
    data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
) -> Tensor:
    """Wrap an op's output and record its adjoint if any input needs one."""
    track = _state.grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, track)
    if track:
        tape = current_tape()
        node = _Node(out, tuple(inputs), backward_fn, tape)
        out._node = node
        tape._record(node)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on everything reachable from a scalar ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        raise TapeError("loss does not depend on any tensor requiring grad")
    loss._node.tape.backward(loss)
