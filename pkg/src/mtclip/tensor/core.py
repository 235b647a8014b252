"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every differentiable operation records a node on a per-thread tape. A node
stores its parents and a closure mapping the output gradient to one gradient
per parent. ``Tensor.backward`` replays the tape in strictly decreasing tape
position, which is a reverse topological order because a node is always
recorded after its inputs. Gradients reaching the same tensor are summed in
that fixed order so repeated runs are bit-identical.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Optional, Sequence

import numpy as np

from mtclip.errors import ArgumentError

DTYPE = np.float64

_state = threading.local()


def _tape_counter():
    counter = getattr(_state, "counter", None)
    if counter is None:
        counter = _state.counter = itertools.count()
    return counter


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, frozen features)."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """An n-dimensional float64 array that can take part in a gradient graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_tape")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[BackwardFn] = None
        self._tape = -1

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> "Tensor":
        """Gradient-free copy, safe to hand to another worker."""
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # --------------------------------------------------------------- autograd
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires it.

        ``self`` must hold a single element. Calling twice without clearing the
        leaves' ``grad`` adds the second result onto the first.
        """
        if self.data.size != 1:
            raise ArgumentError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ArgumentError("backward() called on a tensor that does not require grad")
        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=DTYPE)

        if self.is_leaf:
            self._accumulate(seed)
            return

        nodes = _collect_nodes(self)
        pending = {id(self): seed}
        for node in nodes:
            g = pending.pop(id(node), None)
            if g is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.is_leaf:
                    parent._accumulate(pg)
                else:
                    key = id(parent)
                    if key in pending:
                        pending[key] = pending[key] + pg
                    else:
                        pending[key] = pg

    def _accumulate(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=DTYPE).reshape(self.data.shape)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    # -------------------------------------------------------------- operators
    def __add__(self, other):
        from mtclip.tensor import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from mtclip.tensor import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from mtclip.tensor import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from mtclip.tensor import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from mtclip.tensor import ops

        return ops.div(self, other)

    def __rtruediv__(self, other):
        from mtclip.tensor import ops

        return ops.div(other, self)

    def __neg__(self):
        from mtclip.tensor import ops

        return ops.neg(self)

    def __pow__(self, exponent):
        from mtclip.tensor import ops

        return ops.power(self, exponent)

    def __matmul__(self, other):
        from mtclip.tensor import ops

        return ops.matmul(self, other)

    def __getitem__(self, index):
        from mtclip.tensor import ops

        return ops.index(self, index)

    # ---------------------------------------------------------- method sugar
    def sum(self, axis=None, keepdims=False):
        from mtclip.tensor import ops

        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from mtclip.tensor import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from mtclip.tensor import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from mtclip.tensor import ops

        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def exp(self):
        from mtclip.tensor import ops

        return ops.exp(self)

    def log(self):
        from mtclip.tensor import ops

        return ops.log(self)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap ``data`` as the output of an op and record it on the tape if needed."""
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._tape = next(_tape_counter())
    return out


def _collect_nodes(root: Tensor) -> list:
    seen = set()
    nodes = []
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen or node.is_leaf:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(p for p in node._parents if p.requires_grad)
    nodes.sort(key=lambda n: n._tape, reverse=True)
    return nodes
