"""Dense tensors with a dynamic reverse-mode tape.

Every differentiable primitive in :mod:`algnet.ops` records one :class:`Node`
on the active :class:`Tape`.  :func:`backward` replays the tape in reverse
execution order and accumulates gradients into leaf tensors (parameters and
any leaf created with ``requires_grad=True``).
"""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

_default_dtype = np.dtype(np.float32)
_grad_enabled = True
_check_finite = True


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default floating dtype (e.g. float64 for gradient checks)."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def finite_checks(enabled: bool) -> Iterator[None]:
    global _check_finite
    previous = _check_finite
    _check_finite = enabled
    try:
        yield
    finally:
        _check_finite = previous


class Tensor:
    """An n-dimensional float array plus the bookkeeping autodiff needs.

    Values are treated as immutable once an op has produced them.
    """

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            keep = isinstance(data, np.ndarray) and arr.dtype in (np.float32, np.float64)
            dtype = arr.dtype if keep else _default_dtype
        self.data: np.ndarray = np.asarray(arr, dtype=dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None

    # -- metadata -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar (implemented in ops) -----------------------------
    def __add__(self, other):
        from algnet import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from algnet import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from algnet import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from algnet import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from algnet import ops
        return ops.div(self, other)

    def __neg__(self):
        from algnet import ops
        return ops.neg(self)

    def __getitem__(self, index):
        from algnet import ops
        return ops.getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        from algnet import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from algnet import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from algnet import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def permute(self, *axes):
        from algnet import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.permute(self, axes)


class Parameter(Tensor):
    """A learnable tensor; ``grad`` always mirrors ``value``'s shape."""

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def assign(self, data) -> None:
        """Replace the stored value in place of an optimizer update."""
        data = np.asarray(data, dtype=self.data.dtype)
        if data.shape != self.data.shape:
            raise ValueError(f"parameter {self.name!r}: shape {data.shape} != {self.data.shape}")
        self.data = np.asarray(data, order="C")
        if self.grad is None or self.grad.shape != self.data.shape or self.grad.dtype != self.data.dtype:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


GradFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    grad_fn: GradFn


@dataclass
class Tape:
    """Ordered record of executed primitives for one forward pass."""

    nodes: list[Node] = field(default_factory=list)
    last_replay: list[str] = field(default_factory=list)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def reset(self) -> None:
        for node in self.nodes:
            node.output._node = None
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            # no parameter dependence: every grad stays as it is
            self.reset()
            return
        if loss.is_leaf:
            _accumulate_leaf(loss, np.ones_like(loss.data))
            self.reset()
            return
        if loss._node not in self.nodes:
            raise RuntimeError("loss was not produced on the current tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        self.last_replay = []
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            self.last_replay.append(node.op)
            in_grads = node.grad_fn(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if gi.shape != inp.shape:
                    raise RuntimeError(f"{node.op}: gradient shape {gi.shape} != input shape {inp.shape}")
                if inp.is_leaf:
                    _accumulate_leaf(inp, gi)
                else:
                    key = id(inp)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
        self.reset()


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = g.astype(t.data.dtype, copy=False)
    if t.grad is None or t.grad.shape != t.shape:
        t.grad = np.array(g, copy=True)
    else:
        t.grad = t.grad + g


_tape = Tape()


def get_tape() -> Tape:
    return _tape


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from ``loss`` (accumulating)."""
    _tape.backward(loss)


def make_result(op: str, data: np.ndarray, inputs: Sequence[Tensor], grad_fn: GradFn) -> Tensor:
    """Wrap ``data`` as an op output and record it when any input needs grad."""
    if _check_finite and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op}: produced non-finite values")
    needs_grad = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs_grad, dtype=data.dtype)
    if needs_grad:
        node = Node(op, tuple(inputs), out, grad_fn)
        out._node = node
        _tape.record(node)
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)
