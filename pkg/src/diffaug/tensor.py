"""Dense float32 tensors with reverse-mode automatic differentiation.

The graph is built dynamically: every operation in :mod:`diffaug.ops` records
a node holding its parents and a backward closure. Backward closures are
themselves written in terms of tensor ops, so gradients can optionally stay in
the graph (``grad(..., create_graph=True)``) — that is what powers the
double-backward needed by the gradient penalty on the discriminator.

Everything is float32. A backward pass frees the traversed graph by default;
calling backward twice on the same loss raises :class:`GraphFreedError`.
"""

from __future__ import annotations

import threading
from typing import Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        detail = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {detail}")


class GraphFreedError(RuntimeError):
    """Raised when backward touches a graph that has already been freed."""


class NonFiniteError(FloatingPointError):
    """Raised by debug checks when an op receives non-finite values."""


_tls = threading.local()

_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    """Enable/disable per-op finiteness checks (off by default, they cost time)."""
    global _debug_checks
    _debug_checks = bool(enabled)


def debug_checks_enabled() -> bool:
    return _debug_checks


def grad_enabled() -> bool:
    return getattr(_tls, "grad_enabled", True)


class no_grad:
    """Context manager: ops executed inside record no graph nodes."""

    def __enter__(self):
        self._prev = grad_enabled()
        _tls.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _tls.grad_enabled = self._prev
        return False


class enable_grad:
    def __enter__(self):
        self._prev = grad_enabled()
        _tls.grad_enabled = True
        return self

    def __exit__(self, *exc):
        _tls.grad_enabled = self._prev
        return False


class Node:
    """Graph record: the producing op, parent tensors, and the backward closure.

    ``backward_fn(grad_out) -> tuple`` returns one gradient tensor (or None)
    per parent, built out of tensor ops so it can itself be differentiated.
    """

    __slots__ = ("op", "parents", "backward_fn")

    def __init__(self, op: str, parents: tuple, backward_fn):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "_freed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self._freed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape)
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def is_leaf(self) -> bool:
        return self.node is None

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.node.op if self.node else None})"

    # Arithmetic sugar is attached by diffaug.ops at import time.


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _toposort(root: Tensor) -> list:
    """Tensors reachable from root that matter for gradients, children last."""
    order: list = []
    visited: set = set()
    stack = [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if (p.node is not None or p.requires_grad) and id(p) not in visited:
                    stack.append((p, False))
    return order


def _accumulate(grads: dict, t: Tensor, g: Tensor) -> None:
    prev = grads.get(id(t))
    if prev is None:
        grads[id(t)] = g
    else:
        from . import ops

        grads[id(t)] = ops.add(prev, g)


def _run_backward(
    root: Tensor,
    create_graph: bool,
    wrt: Optional[Sequence[Tensor]] = None,
    accumulate: bool = False,
    free: bool = False,
):
    if root.size != 1:
        raise ShapeError("backward", root.shape)
    if root._freed:
        raise GraphFreedError("backward called on a freed graph")

    order = _toposort(root)
    keep_ids = {id(t) for t in (wrt or [])}
    grads: dict = {id(root): Tensor(np.ones(root.shape, dtype=np.float32))}

    ctx = enable_grad() if create_graph else no_grad()
    with ctx:
        for t in reversed(order):
            if t.node is None:
                continue
            g = grads.get(id(t))
            if g is None:
                continue
            parent_grads = t.node.backward_fn(g)
            for p, pg in zip(t.node.parents, parent_grads):
                if pg is None:
                    continue
                if p.node is None and not p.requires_grad:
                    continue
                if pg.shape != p.shape:
                    raise ShapeError(f"backward({t.node.op})", pg.shape, p.shape)
                _accumulate(grads, p, pg)
            if id(t) not in keep_ids and not accumulate:
                grads.pop(id(t), None)

    if accumulate:
        for t in order:
            if t.requires_grad and t.node is None:
                g = grads.get(id(t))
                if g is None:
                    continue
                if t.grad is None:
                    t.grad = g.data.copy()
                else:
                    t.grad = t.grad + g.data

    if free and not create_graph:
        for t in order:
            if t.node is not None:
                t.node = None
                t._freed = True

    if wrt is not None:
        return [grads.get(id(t)) for t in wrt]
    return None


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    The traversed graph is freed afterwards; repeated calls on independent
    graphs sharing leaves accumulate, a second call on the same loss raises.
    """
    _run_backward(loss, create_graph=False, accumulate=True, free=True)


def grad(output: Tensor, wrt: Sequence[Tensor], create_graph: bool = False):
    """Gradients of a scalar output w.r.t. the given tensors.

    Does not touch ``.grad`` buffers and leaves the graph intact. With
    ``create_graph=True`` the returned tensors participate in the graph, so a
    later backward differentiates through this gradient computation.
    Returns None for tensors the output does not depend on.
    """
    return _run_backward(output, create_graph=create_graph, wrt=list(wrt), free=False)


def graph_ops(root: Tensor) -> set:
    """Set of op names reachable from root (diagnostic / structural checks)."""
    return {t.node.op for t in _toposort(root) if t.node is not None}


def relabel(t: Tensor, name: str) -> Tensor:
    """Rename the producing op of a tensor (metadata only, e.g. "aug.cutout")."""
    if t.node is not None:
        t.node.op = name
    return t
