"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Operations in :mod:`dualinc.engine.ops`
create new tensors that remember their inputs and a closure computing the
vector-Jacobian product. :func:`backward` walks that record in reverse
topological order.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import GraphConsumedError, NumericError, ShapeError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode autodiff.

    Args:
        data: Array-like payload. Integer input is promoted to float32.
        requires_grad: Whether gradients should be accumulated into ``grad``.
    """

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple = (),
        _backward: Optional[BackwardFn] = None,
        _op: str = "",
    ):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        op = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{op})"

    # Small operator surface used by losses and tests.
    def __add__(self, other):
        from .ops import add

        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from .ops import scale

        if isinstance(other, Tensor):
            raise TypeError("only scalar multiplication is supported")
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        from .ops import scale

        return scale(self, -1.0)

    def __sub__(self, other):
        from .ops import add, scale

        return add(self, scale(other, -1.0))

    def sum(self) -> "Tensor":
        from .ops import sum_all

        return sum_all(self)

    def mean(self) -> "Tensor":
        from .ops import mean_all

        return mean_all(self)


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference only)."""
    global _GRAD_ENABLED
    previous, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    """Wrap an op result, recording the backward closure if any input needs it."""
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite values produced by {op}")
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, _op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn, _op=op)


class Graph:
    """Topologically ordered record of the operations leading to ``output``.

    Every node appears after all of its inputs.
    """

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            if node._consumed:
                raise GraphConsumedError(f"graph through {node._op or 'tensor'} was already consumed by backward")
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))

    def __len__(self) -> int:
        return len(self.nodes)


def _accumulate(node: Tensor, grad: np.ndarray) -> None:
    if grad.shape != node.shape:
        raise ShapeError(f"gradient shape {grad.shape} does not match tensor shape {node.shape}")
    if node.grad is None:
        node.grad = np.array(grad, dtype=node.dtype, copy=True)
    else:
        node.grad += grad


def backward(loss: Tensor, graph: Optional[Graph] = None) -> None:
    """Populate ``grad`` on every tensor reachable from the scalar ``loss``.

    Gradients accumulate into existing ``grad`` arrays until zeroed. The graph
    is consumed: saved intermediates are released and a second backward
    through the same nodes raises :class:`GraphConsumedError`.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    if graph is None:
        graph = Graph(loss)
    if not graph.nodes:
        raise ValueError("empty graph")
    _accumulate(loss, np.ones_like(loss.data))
    for node in reversed(graph.nodes):
        if node._backward is None:
            continue
        if node.grad is None:
            grads = [None] * len(node._parents)
        else:
            grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient flowing out of {node._op}")
            _accumulate(parent, g)
        node._backward = None
        node._consumed = True
