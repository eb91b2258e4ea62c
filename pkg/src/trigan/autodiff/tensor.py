"""Tensor type, graph recording and the reverse pass.

Every differentiable primitive produces a :class:`Node` stamped with a
monotonically increasing sequence number. A node's inputs always carry smaller
numbers than the node itself, so sorting the reachable nodes by descending
sequence number is a valid reverse topological order.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Optional, Sequence

import numpy as np

_seq = itertools.count()
_grad_enabled = True
_graph_stack: list["Graph"] = []


class Node:
    """One recorded primitive application."""

    __slots__ = ("kind", "inputs", "backward_fn", "seq", "shape")

    def __init__(self, kind: str, inputs: tuple, backward_fn: Callable, shape):
        self.kind = kind
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.seq = next(_seq)
        self.shape = shape

    def __repr__(self):
        return f"Node({self.kind}, seq={self.seq}, shape={self.shape})"


class Graph:
    """Append-only record of the nodes created while it is active.

    Recording is optional; the reverse pass does not need it. It exists so a
    training step can inspect (and discard) everything it built::

        with Graph() as g:
            loss = model(x).mean()
        len(g.nodes)
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _graph_stack.append(self)
        return self

    def __exit__(self, *exc):
        _graph_stack.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation.

    Leaf tensors created with ``requires_grad=True`` own a ``grad`` buffer of
    the same shape, initialised to zero and accumulated into by
    :func:`backward`. Tensors that do not require grad have ``grad = None``.
    """

    __slots__ = ("data", "grad", "_requires_grad", "_node", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=np.float64)
        self._node: Optional[Node] = None
        self.name = name
        self.grad = None
        self._requires_grad = False
        self.requires_grad = requires_grad

    @property
    def requires_grad(self) -> bool:
        return self._requires_grad

    @requires_grad.setter
    def requires_grad(self, flag: bool):
        flag = bool(flag)
        if flag and self._node is None and self.grad is None:
            self.grad = np.zeros_like(self.data)
        self._requires_grad = flag

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
        return self._node is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """Same values, no graph history, no gradient."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out._node = None
        out.name = None
        out.grad = None
        out._requires_grad = False
        return out

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag}{rg})"

    # operator sugar; the primitives live in ops.py
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

    def __neg__(self):
        from . import ops

        return ops.neg(self)

    def __getitem__(self, index):
        from . import ops

        return ops.getitem(self, index)

    def sum(self, axis=None):
        from . import ops

        return ops.sum(self, axis)

    def mean(self, axis=None):
        from . import ops

        return ops.mean(self, axis)

    def reshape(self, *shape):
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(kind: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap a primitive's output, recording a node if any input needs grad.

    ``backward_fn(grad_out)`` must return one gradient (or ``None``) per input.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.grad = None
    out._node = None
    out._requires_grad = False
    if _grad_enabled and any(t.requires_grad for t in inputs):
        node = Node(kind, tuple(inputs), backward_fn, data.shape)
        out._node = node
        out._requires_grad = True
        for g in _graph_stack:
            g.nodes.append(node)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Gradients add onto whatever the leaves already hold; clear them with
    ``zero_grad`` between steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    if loss._node is None:
        if loss.requires_grad:
            loss.grad += seed
        return

    nodes: dict[int, Node] = {}
    stack = [loss._node]
    while stack:
        node = stack.pop()
        if id(node) in nodes:
            continue
        nodes[id(node)] = node
        for t in node.inputs:
            if t._node is not None:
                stack.append(t._node)

    pending: dict[int, np.ndarray] = {id(loss._node): seed}
    # per-pass leaf totals, added once at the end so a repeated pass doubles exactly
    leaf_totals: dict[int, list] = {}
    for node in sorted(nodes.values(), key=lambda n: n.seq, reverse=True):
        g_out = pending.pop(id(node), None)
        if g_out is None:
            continue
        grads = node.backward_fn(g_out)
        for t, g in zip(node.inputs, grads):
            if g is None or not t.requires_grad:
                continue
            if g.shape != t.data.shape:
                raise RuntimeError(
                    f"backward: {node.kind} produced grad of shape {g.shape} "
                    f"for input of shape {t.data.shape}"
                )
            if t._node is not None:
                key = id(t._node)
                if key in pending:
                    pending[key] = pending[key] + g
                else:
                    pending[key] = g
            else:
                entry = leaf_totals.get(id(t))
                if entry is None:
                    leaf_totals[id(t)] = [t, g]
                else:
                    entry[1] = entry[1] + g
    for t, g in leaf_totals.values():
        t.grad += g
