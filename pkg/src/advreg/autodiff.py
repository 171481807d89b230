"""Tape-based reverse-mode automatic differentiation over float64 arrays.

Every op appends one node to the tape that owns its inputs. ``Tape.backward``
walks the nodes in reverse and accumulates gradients into the leaves.
Leaf gradients persist on the tape until ``zero_grad`` is called, so two
backward passes over the same graph add up unless the caller resets in between.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ParameterError(ValueError):
    """A scalar hyperparameter is out of its valid range."""


class NonFiniteError(FloatingPointError):
    """A forward value became NaN or infinite."""


class ContractError(ValueError):
    """An op was called outside its documented preconditions."""


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class _Node:
    op: str
    inputs: tuple[int, ...]
    backward: BackwardFn | None


class Tensor:
    """A value recorded on a tape.

    ``data`` is a float64 ndarray; ``node_id`` indexes the tape's node list.
    """

    __slots__ = ("data", "tape", "node_id", "name")

    def __init__(self, data: np.ndarray, tape: "Tape", node_id: int, name: str | None = None):
        self.data = data
        self.tape = tape
        self.node_id = node_id
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def grad(self) -> np.ndarray:
        return self.tape.grad_of(self)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, node={self.node_id})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)


@dataclass
class Tape:
    nodes: list[_Node] = field(default_factory=list)
    grads: dict[int, np.ndarray] = field(default_factory=dict)

    def leaf(self, values, name: str | None = None) -> Tensor:
        """Record a leaf (parameter or constant input)."""
        data = np.array(values, dtype=np.float64)
        if data.ndim == 0:
            data = data.reshape(1)
        _check_finite(data, "leaf")
        return self._record("leaf", (), data, None, name)

    def _record(self, op, inputs, data, backward, name=None) -> Tensor:
        node_id = len(self.nodes)
        self.nodes.append(_Node(op, tuple(t.node_id for t in inputs), backward))
        return Tensor(data, self, node_id, name)

    def zero_grad(self) -> None:
        self.grads.clear()

    def grad_of(self, t: Tensor) -> np.ndarray:
        g = self.grads.get(t.node_id)
        return np.zeros_like(t.data) if g is None else g

    def backward(self, root: Tensor) -> dict[int, np.ndarray]:
        """Backpropagate from a scalar root.

        Intermediate gradients live only for the duration of this call; leaf
        gradients are added into ``self.grads`` (keyed by node id), which is
        also returned.
        """
        if root.tape is not self:
            raise ContractError("root was recorded on a different tape")
        if root.data.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
        pending: dict[int, np.ndarray] = {root.node_id: np.ones_like(root.data)}
        for node_id in range(root.node_id, -1, -1):
            upstream = pending.pop(node_id, None)
            if upstream is None:
                continue
            node = self.nodes[node_id]
            if node.backward is None:
                if node_id in self.grads:
                    self.grads[node_id] = self.grads[node_id] + upstream
                else:
                    self.grads[node_id] = upstream
                continue
            for src, g in zip(node.inputs, node.backward(upstream)):
                if g is None:
                    continue
                if src in pending:
                    pending[src] = pending[src] + g
                else:
                    pending[src] = g
        return self.grads


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {op}")


def _same_tape(*ts: Tensor) -> Tape:
    tape = ts[0].tape
    for t in ts[1:]:
        if t.tape is not tape:
            raise ContractError("operands live on different tapes")
    return tape


def _require_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_shape(a, b, "add")
    tape = _same_tape(a, b)
    out = a.data + b.data
    _check_finite(out, "add")
    return tape._record("add", (a, b), out, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_shape(a, b, "sub")
    tape = _same_tape(a, b)
    out = a.data - b.data
    _check_finite(out, "sub")
    return tape._record("sub", (a, b), out, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product."""
    _require_shape(a, b, "mul")
    tape = _same_tape(a, b)
    x, y = a.data, b.data
    out = x * y
    _check_finite(out, "mul")
    return tape._record("mul", (a, b), out, lambda g: (g * y, g * x))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = a.data * c
    _check_finite(out, "scale")
    return a.tape._record("scale", (a,), out, lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    tape = _same_tape(a, b)
    x, w = a.data, b.data
    out = x @ w
    _check_finite(out, "matmul")
    return tape._record("matmul", (a, b), out, lambda g: (g @ w.T, x.T @ g))


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``x @ W + b`` for a B x I batch, I x O weight and length-O bias."""
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {W.shape}")
    if b.shape != (W.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} does not match weight {W.shape}")
    tape = _same_tape(x, W, b)
    xd, wd = x.data, W.data
    out = xd @ wd + b.data
    _check_finite(out, "linear")

    def backward(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return tape._record("linear", (x, W, b), out, backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)
    return x.tape._record("relu", (x,), out, lambda g: (g * mask,))


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax of a B x C tensor."""
    if x.data.ndim != 2 or x.shape[1] < 1:
        raise DimensionError(f"log_softmax expects B x C with C >= 1, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    _check_finite(out, "log_softmax")
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return x.tape._record("log_softmax", (x,), out, backward)


def grl(x: Tensor, lambda_grl: float) -> Tensor:
    """Gradient reversal: identity forward, ``-lambda_grl * upstream`` backward."""
    lam = float(lambda_grl)
    if not lam >= 0.0:
        raise ParameterError(f"lambda_grl must be >= 0, got {lambda_grl}")
    return x.tape._record("grl", (x,), x.data, lambda g: (g * -lam,))


def total(x: Tensor) -> Tensor:
    """Sum of all entries, as a shape-(1,) tensor."""
    out = np.array([x.data.sum()])
    _check_finite(out, "sum")
    shape = x.shape
    return x.tape._record("sum", (x,), out, lambda g: (np.full(shape, g[0]),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.array([x.data.sum() / n])
    _check_finite(out, "mean")
    shape = x.shape
    return x.tape._record("mean", (x,), out, lambda g: (np.full(shape, g[0] / n),))


def grad_norm(params: Iterable[Tensor], gradients: Mapping[int, np.ndarray]) -> float:
    """Euclidean norm of the concatenated gradients of ``params``.

    Parameters absent from ``gradients`` count as zero.
    """
    sq = 0.0
    for p in params:
        g = gradients.get(p.node_id)
        if g is not None:
            sq += float(np.dot(g.ravel(), g.ravel()))
    return float(np.sqrt(sq))
