"""Dense N x C x H x W tensors with reverse-mode automatic differentiation.

The graph is recorded eagerly: every differentiable operation returns a new
Tensor holding references to its parent tensors and a closure computing the
parent gradients from the output gradient.  ``Tensor.backward()`` walks the
graph once in reverse topological order and accumulates gradients into the
``grad`` buffers, so calling it twice without a reset doubles every gradient.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import UsageError

_DEFAULT_DTYPE = np.float32
_DETERMINISTIC = False


class _ThreadState(threading.local):
    # per-thread so concurrent no-grad inference cannot race the flag
    def __init__(self):
        self.grad_enabled = True


_STATE = _ThreadState()


def set_default_dtype(dtype) -> None:
    """Set the element type used when tensors are created without an explicit dtype."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise UsageError(f"unsupported default dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default element type (used by 64-bit verification suites)."""
    global _DEFAULT_DTYPE
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = old


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in this thread (evaluation / finite differences)."""
    old = _STATE.grad_enabled
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = old


def grad_enabled() -> bool:
    return _STATE.grad_enabled


def set_deterministic(flag: bool) -> None:
    """Pin any data-parallel execution so repeated runs are bitwise identical.

    The engine itself runs serial numpy kernels, so this only pins the BLAS
    thread pool (reassociation-free reductions) when threadpoolctl is present.
    """
    global _DETERMINISTIC
    _DETERMINISTIC = bool(flag)
    if flag:
        try:
            import threadpoolctl

            threadpoolctl.threadpool_limits(limits=1)
        except ImportError:
            pass


def deterministic() -> bool:
    return _DETERMINISTIC


class Tensor:
    """A numpy array plus a gradient accumulator and its position in the graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = np.ascontiguousarray(arr, dtype=dtype)
        elif not (isinstance(data, (np.ndarray, np.generic)) and arr.dtype in (np.float32, np.float64)):
            # explicit numpy float data keeps its precision; everything else
            # (lists, Python scalars, integer arrays) takes the session default
            arr = np.ascontiguousarray(arr, dtype=_DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    # -- shape helpers -------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- graph construction --------------------------------------------------

    @staticmethod
    def _lift(value, like: "Tensor") -> "Tensor":
        if isinstance(value, Tensor):
            return value
        return Tensor(np.asarray(value, dtype=like.data.dtype))

    def backward(self) -> None:
        """Reverse-mode pass from a scalar; accumulates into ``grad`` buffers."""
        if self.data.size != 1:
            raise UsageError(
                f"backward requires a scalar tensor, got shape {self.shape}"
            )
        order = _toposort(self)
        flowing: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in order:
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf: accumulate into the persistent buffer
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                seen = flowing.get(id(parent))
                flowing[id(parent)] = pg if seen is None else seen + pg

    # -- minimal arithmetic (element-wise, same shape or scalar) -------------

    def __add__(self, other) -> "Tensor":
        other = Tensor._lift(other, self)
        out_data = self.data + other.data
        return _node(out_data, (self, other), lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape)))

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = Tensor._lift(other, self)
        out_data = self.data - other.data
        return _node(out_data, (self, other), lambda g: (_unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)))

    def __mul__(self, other) -> "Tensor":
        other = Tensor._lift(other, self)
        out_data = self.data * other.data
        return _node(
            out_data,
            (self, other),
            lambda g: (_unbroadcast(g * other.data, self.shape), _unbroadcast(g * self.data, other.shape)),
        )

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return _node(-self.data, (self,), lambda g: (-g,))

    def sum(self) -> "Tensor":
        out_data = np.asarray(self.data.sum(), dtype=self.data.dtype)
        return _node(out_data, (self,), lambda g: (np.broadcast_to(g, self.shape).astype(self.data.dtype),))

    def mean(self) -> "Tensor":
        n = self.data.size
        out_data = np.asarray(self.data.mean(), dtype=self.data.dtype)
        return _node(
            out_data,
            (self,),
            lambda g: ((np.broadcast_to(g, self.shape) / n).astype(self.data.dtype),),
        )


class Parameter(Tensor):
    """A trainable leaf tensor with a hierarchical name and a live grad buffer."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)


def _toposort(root: Tensor) -> list[Tensor]:
    """Nodes in reverse topological order (root first), iteratively."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    order.reverse()
    return order


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to ``shape`` after numpy broadcasting in the forward."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (s, g) in enumerate(zip(shape, grad.shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _node(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    """Wrap an op result, recording the graph only when a parent needs gradients."""
    out = Tensor(data)
    if _STATE.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def zero_grads(params: Iterable[Parameter]) -> None:
    """Reset gradient accumulators; required between optimizer steps."""
    for p in params:
        p.zero_grad()
