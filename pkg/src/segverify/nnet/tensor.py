"""A minimal tape-free reverse-mode autodiff tensor.

Each :class:`Tensor` remembers the tensors it was computed from and a closure
that pushes its gradient back to them.  ``backward`` walks the graph in
reverse topological order.  All arithmetic is float64.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("values", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, values, parents=(), backward_fn=None, requires_grad=False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf that requires grad."""
        if grad is None:
            if self.values.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar tensor")
            grad = np.ones_like(self.values)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            stack.extend((p, False) for p in node.parents)
        self.accumulate(grad)
        for node in reversed(order):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)
                if node.parents:
                    # interior gradients are no longer needed once pushed down
                    node.grad = None


def leaf(values, requires_grad=True) -> Tensor:
    return Tensor(values, requires_grad=requires_grad)
