"""Reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable op produces its output through :func:`record`, which
stamps the result with a monotonically increasing sequence number.  The
backward sweep gathers all nodes reachable from the loss and visits them in
strictly decreasing sequence order, i.e. the exact reverse of execution.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .errors import UsageError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_state = threading.local()
_seq = itertools.count()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Set the dtype used when tensors are built from non-float data."""
    prev = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


class Node:
    __slots__ = ("seq", "inputs", "backward")

    def __init__(self, inputs: Sequence["Tensor"], backward: BackwardFn):
        self.seq = next(_seq)
        self.inputs = tuple(inputs)
        self.backward = backward


class Tensor:
    """Dense array with optional participation in the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(default_dtype())
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._node: Optional[Node] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # Operator sugar; the implementations live in ops.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __sub__(self, other):
        from . import ops
        return ops.add(self, -as_tensor(other, like=self))

    def __rsub__(self, other):
        from . import ops
        return ops.add(as_tensor(other, like=self), -self)

    def sum(self):
        from . import ops
        return ops.sum_all(self)

    def mean(self):
        from . import ops
        return ops.mean_all(self)


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def record(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap an op result, attaching a tape node when any input needs grads.

    ``backward_fn`` receives the output gradient and returns one gradient
    (or None) per input, in input order.
    """
    out = Tensor(data)
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(inputs, backward_fn)
    return out


class Tape:
    """Ordered record of the ops that produced a tensor.

    ``entries`` is sorted newest first, which is the order the reverse sweep
    must visit them in.
    """

    def __init__(self, entries: list[tuple[int, Tensor]]):
        self.entries = entries

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        seen: set[int] = set()
        entries = []
        stack = [root]
        while stack:
            t = stack.pop()
            if t._node is None or id(t) in seen:
                continue
            seen.add(id(t))
            entries.append((t._node.seq, t))
            stack.extend(t._node.inputs)
        entries.sort(key=lambda e: e[0], reverse=True)
        return cls(entries)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def order(self) -> list[int]:
        return [seq for seq, _ in self.entries]


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf tensor that requires gradients.

    Leaf gradients accumulate across calls; intermediate gradients are freed
    as soon as their node has been processed.
    """
    if loss.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    seed = np.ones_like(loss.data)
    if loss._node is None:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return

    tape = Tape.trace(loss)
    pending: dict[int, np.ndarray] = {id(loss): seed}
    for _, out in tape.entries:
        g = pending.pop(id(out), None)
        if g is None:
            continue
        node = out._node
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = gi.astype(inp.dtype, copy=True) if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                prev = pending.get(key)
                pending[key] = gi if prev is None else prev + gi
