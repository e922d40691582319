"""Tensor values and the reverse-mode gradient pass."""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when an operation's shape precondition is violated."""


VJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A float64 array plus the bookkeeping needed to differentiate through it.

    Leaf tensors carry an optional ``name``; named leaves are the ones
    :func:`backward` reports gradients for.
    """

    __slots__ = ("data", "parents", "vjp", "name", "requires_grad", "op")

    def __init__(
        self,
        data,
        parents: tuple["Tensor", ...] = (),
        vjp: VJP | None = None,
        name: str | None = None,
        requires_grad: bool | None = None,
        op: str = "leaf",
    ):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.parents = parents
        self.vjp = vjp
        self.name = name
        self.op = op
        if requires_grad is None:
            requires_grad = name is not None or any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(op={self.op}{label}, shape={self.shape})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops

        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops

        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops

        return ops.div(self, other)

    def __neg__(self):
        from . import ops

        return ops.scalar_mul(self, -1.0)


def _not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False, op="const")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


class Graph:
    """Topologically ordered record of the nodes that feed an output tensor.

    Only nodes that require a gradient are kept; every node's parents precede it.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, output: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node.parents):
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def leaves(self) -> dict[str, Tensor]:
        return {n.name: n for n in self.nodes if n.name is not None and not n.parents}

    def __len__(self) -> int:
        return len(self.nodes)


def backward(
    loss: Tensor,
    params: Iterable[str] | Mapping[str, object] | None = None,
    graph: Graph | None = None,
) -> dict[str, np.ndarray]:
    """Gradient of a scalar ``loss`` with respect to every named leaf.

    ``params`` lists names that must appear in the result; names the loss does
    not depend on get zero arrays (shapes taken from a mapping's values when
    available, else omitted if never seen).
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = graph or Graph.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    out: dict[str, np.ndarray] = {}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            if node.name is not None:
                if node.name in out:
                    out[node.name] = out[node.name] + g
                else:
                    out[node.name] = g
            continue
        parent_grads = node.vjp(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if params is not None:
        shapes = params if isinstance(params, Mapping) else {}
        for name in params:
            if name not in out:
                ref = shapes.get(name) if shapes else None
                if ref is not None:
                    out[name] = np.zeros(np.shape(getattr(ref, "data", ref)))
    return out
