"""
Reverse-mode differentiation on a linear tape.

Nodes are recorded in creation order, so the tape itself is a topological
order and backward() walks it once in reverse. Complex nodes carry the
adjoint g = dL/dRe(z) + i dL/dIm(z).
"""

import logging
from typing import Callable, Optional, Sequence

import numpy as np

from rtfgraph.errors import ShapeError, TapeError

logger = logging.getLogger(__name__)


class Node:
    """Value recorded on a Tape, with its accumulated adjoint."""

    __slots__ = ("tape", "index", "value", "requires_grad", "parents", "backward_fn", "_grad")

    def __init__(self, tape, index, value, requires_grad, parents=(), backward_fn=None):
        self.tape = tape
        self.index = index
        self.value = value
        self.requires_grad = requires_grad
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self._grad = None

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    def __repr__(self):
        return f"Node(index={self.index}, shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Records primitive operations for a single backward pass."""

    def __init__(self):
        self.nodes = []
        self._backward_done = False

    def _new(self, value, requires_grad, parents=(), backward_fn=None) -> Node:
        if self._backward_done:
            raise TapeError("Cannot record on a tape after backward()")
        node = Node(self, len(self.nodes), value, requires_grad, parents, backward_fn)
        self.nodes.append(node)
        return node

    def variable(self, value) -> Node:
        return self._new(np.array(value, dtype=np.result_type(value, np.float64)), True)

    def constant(self, value) -> Node:
        return self._new(np.asarray(value), False)

    def record(self, value, parents: Sequence[Node], backward_fn: Callable) -> Node:
        """Add an operation node.

        backward_fn receives the output adjoint and returns one adjoint (or
        None) per parent.
        """
        for parent in parents:
            if parent.tape is not self:
                raise TapeError(f"{parent!r} belongs to another tape")
        requires_grad = any(parent.requires_grad for parent in parents)
        return self._new(value, requires_grad, parents, backward_fn if requires_grad else None)

    def backward(self, output: Node, seed=None):
        """Accumulate adjoints of output into every node that requires them.

        Raises:
            TapeError: On a second call or a foreign / non-scalar output without seed
        """
        if self._backward_done:
            raise TapeError("backward() was already called on this tape")
        if output.tape is not self:
            raise TapeError(f"{output!r} belongs to another tape")
        if seed is None:
            if np.size(output.value) != 1:
                raise TapeError(f"Output of shape {output.shape} needs an explicit seed")
            seed = np.ones_like(output.value)
        self._backward_done = True
        output._grad = np.asarray(seed, dtype=np.result_type(output.value, np.float64))

        for node in reversed(self.nodes[:output.index + 1]):
            if node._grad is None or node.backward_fn is None:
                continue
            parent_grads = node.backward_fn(node._grad)
            for parent, grad in zip(node.parents, parent_grads):
                if grad is None or not parent.requires_grad:
                    continue
                grad = np.asarray(grad)
                if grad.shape != np.shape(parent.value):
                    raise ShapeError(f"Adjoint shape {grad.shape} does not match value shape {parent.shape}")
                parent._grad = grad if parent._grad is None else parent._grad + grad


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Node, b: Node) -> Node:
    return a.tape.record(a.value + b.value, (a, b),
                         lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Node, b: Node) -> Node:
    return a.tape.record(a.value - b.value, (a, b),
                         lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def scale(x: Node, factor: float) -> Node:
    return x.tape.record(x.value * factor, (x,), lambda g: (g * factor,))


def total(x: Node) -> Node:
    return x.tape.record(np.sum(x.value), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def sum_squares(x: Node) -> Node:
    return x.tape.record(np.sum(x.value ** 2), (x,), lambda g: (2.0 * g * x.value,))


def linear(x: Node, weight: Node, bias: Node) -> Node:
    """y = x @ W + b over the last axis of x (any leading batch shape)."""
    if x.shape[-1] != weight.shape[0] or weight.shape[1] != bias.shape[0]:
        raise ShapeError(f"linear: x {x.shape}, W {weight.shape}, b {bias.shape}")
    value = x.value @ weight.value + bias.value

    def backward(g):
        flat_x = x.value.reshape(-1, x.shape[-1])
        flat_g = g.reshape(-1, g.shape[-1])
        return g @ weight.value.T, flat_x.T @ flat_g, flat_g.sum(axis=0)

    return x.tape.record(value, (x, weight, bias), backward)


def concat(nodes: Sequence[Node], axis: int = -1) -> Node:
    tape = nodes[0].tape
    sizes = [node.shape[axis] for node in nodes]
    splits = np.cumsum(sizes)[:-1]
    value = np.concatenate([node.value for node in nodes], axis=axis)
    return tape.record(value, tuple(nodes), lambda g: tuple(np.split(g, splits, axis=axis)))


def relu(x: Node) -> Node:
    active = x.value > 0
    return x.tape.record(np.where(active, x.value, 0.0), (x,), lambda g: (np.where(active, g, 0.0),))


def mean(x: Node, axis: int) -> Node:
    count = x.shape[axis]

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / count, x.shape).copy(),)

    return x.tape.record(np.mean(x.value, axis=axis), (x,), backward)


def dropout(x: Node, p: float, rng: Optional[np.random.Generator], training: bool) -> Node:
    """Inverted dropout; the identity in evaluation mode or with p == 0."""
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"Dropout probability must lie in [0, 1), got {p}")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return x.tape.record(x.value * keep, (x,), lambda g: (g * keep,))


def broadcast_to(x: Node, shape) -> Node:
    return x.tape.record(np.broadcast_to(x.value, shape).copy(), (x,), lambda g: (_unbroadcast(g, x.shape),))
