"""Graph nodes and the reverse sweep."""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from spacepose.errors import ConfigError, NumericError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {what}")


class Node:
    """A value in the computation record.

    Leaves are created directly; interior nodes are produced by the functions
    in :mod:`spacepose.diff.ops`, which attach ``parents`` and a closure
    mapping the output adjoint to one adjoint per parent.
    """

    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "op", "name", "__weakref__")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(value)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.value: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.parents: tuple[Node, ...] = ()
        self.backward_fn: BackwardFn | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.name = name

    @classmethod
    def from_op(cls, value: np.ndarray, parents: Iterable[Node], backward_fn: BackwardFn, op: str) -> Node:
        check_finite(value, op)
        node = cls.__new__(cls)
        node.value = value
        node.grad = None
        node.parents = tuple(parents)
        node.requires_grad = any(p.requires_grad for p in node.parents)
        node.backward_fn = backward_fn if node.requires_grad else None
        node.op = op
        node.name = None
        return node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.value

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = self.name or self.op
        return f"Node({tag}, shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar; implementations live in ops to avoid a circular import.
    def __add__(self, other):
        from spacepose.diff import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from spacepose.diff import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from spacepose.diff import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from spacepose.diff import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from spacepose.diff import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from spacepose.diff import ops
        return ops.div(other, self)

    def __neg__(self):
        from spacepose.diff import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from spacepose.diff import ops
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from spacepose.diff import ops
        return ops.slice(self, idx)


def topological_order(root: Node) -> list[Node]:
    """Nodes reachable from ``root`` through grad-requiring edges, parents first."""
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> None:
    """Populate ``grad`` on every grad-requiring node reachable from ``root``.

    Gradients accumulate into existing ``grad`` arrays, so parameters must be
    zeroed between optimisation steps (see :func:`zero_grads`).
    """
    if root.value.size != 1:
        raise ConfigError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = topological_order(root)
    # Adjoints of interior nodes for this sweep only; leaves accumulate.
    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node.backward_fn is None:
            continue
        parent_grads = node.backward_fn(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.value.shape:
                raise ConfigError(f"adjoint shape {pg.shape} != value shape {p.value.shape} in {node.op}")
            check_finite(pg, f"adjoint of {node.op}")
            key = id(p)
            pending[key] = pg if key not in pending else pending[key] + pg


def zero_grads(nodes: Iterable[Node]) -> None:
    for n in nodes:
        n.grad = None


def detach(node: Node) -> Node:
    """Same value, no history."""
    return Node(node.value, requires_grad=False)


def as_node(x, dtype=None) -> Node:
    if isinstance(x, Node):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else None)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(dtype or np.float64)
    return Node(arr)
