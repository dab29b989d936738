"""
Minimal reverse-mode automatic differentiation over dense float64 matrices.

Every value is a 2-D ``numpy.ndarray`` (scalars are 1x1). Operations append a
``Node`` to the ``Tape`` their operands live on; creation order on the tape is
a valid topological order, so ``backward`` is a single reversed sweep that
visits every node exactly once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

# Probabilities entering ln() inside cross-entropy terms are clamped to this band.
PROB_EPS = 1e-12

Matrix = np.ndarray
BackwardRule = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class SimGraphError(Exception):
    """Base class for library errors."""


class DimensionError(SimGraphError, ValueError):
    pass


class DomainError(SimGraphError, ValueError):
    pass


class ParameterError(SimGraphError, ValueError):
    pass


class ContractError(SimGraphError, RuntimeError):
    pass


class NonFiniteError(SimGraphError, FloatingPointError):
    """Raised when an operation produces NaN or Inf.

    ``term`` is filled in by callers that know which loss term was being built.
    """

    def __init__(self, message: str, op: str = "", term: Optional[str] = None):
        super().__init__(message)
        self.op = op
        self.term = term


def as_matrix(value: Union[float, Sequence, np.ndarray]) -> Matrix:
    """Coerce to a 2-D float64 array (vectors become one row)."""
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    if arr.ndim != 2:
        raise DimensionError(f"expected at most 2 dimensions, got shape {arr.shape}")
    return arr


class Node:
    __slots__ = ("value", "grad", "parents", "backward_rule", "requires_grad", "tape", "name", "op")

    def __init__(
        self,
        value: Matrix,
        tape: "Tape",
        parents: Tuple["Node", ...] = (),
        backward_rule: Optional[BackwardRule] = None,
        requires_grad: bool = False,
        name: Optional[str] = None,
        op: str = "leaf",
    ):
        self.value = value
        self.grad: Optional[np.ndarray] = None
        self.parents = parents
        self.backward_rule = backward_rule
        self.requires_grad = requires_grad
        self.tape = tape
        self.name = name
        self.op = op

    @property
    def shape(self) -> Tuple[int, int]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 node, got {self.value.shape}")
        return float(self.value[0, 0])

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Node({label}, shape={self.value.shape}, requires_grad={self.requires_grad})"


@dataclass
class Tape:
    """Ordered record of nodes. Not shareable while it is being built."""

    nodes: List[Node] = field(default_factory=list)
    _bound: Dict[Tuple[str, str], Node] = field(default_factory=dict, repr=False)

    def _record(self, node: Node) -> Node:
        self.nodes.append(node)
        return node

    def leaf(self, value, requires_grad: bool = False, name: Optional[str] = None) -> Node:
        arr = as_matrix(value)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite leaf value for {name or 'leaf'}", op="leaf")
        return self._record(Node(arr, self, requires_grad=requires_grad, name=name))

    def constant(self, value, name: Optional[str] = None) -> Node:
        return self.leaf(value, requires_grad=False, name=name)

    def bind(self, group: str, params: Dict[str, np.ndarray], trainable: bool = True) -> Dict[str, Node]:
        """Expose a parameter dict as leaves, reusing the same leaf on repeated binds.

        The leaves wrap the arrays themselves (no copy); trainable leaves are
        named ``"<group>/<name>"`` in the gradient map.
        """
        bound = {}
        for key, arr in params.items():
            slot = (group, key)
            node = self._bound.get(slot)
            if node is None:
                node = self._record(
                    Node(arr, self, requires_grad=trainable, name=f"{group}/{key}")
                )
                self._bound[slot] = node
            bound[key] = node
        return bound

    def zero_grad(self) -> None:
        for node in self.nodes:
            node.grad = None


def _new(
    tape: Tape, value: Matrix, parents: Tuple[Node, ...], rule: BackwardRule, op: str, check: bool = False
) -> Node:
    # only ops that can overflow from finite input check here; loss terms and gradients are checked by callers
    if check and not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op} produced a non-finite value", op=op)
    requires_grad = any(p.requires_grad for p in parents)
    return tape._record(
        Node(value, tape, parents=parents, backward_rule=rule if requires_grad else None,
             requires_grad=requires_grad, op=op)
    )


def shared_tape(*operands) -> Tape:
    tape = None
    for operand in operands:
        if isinstance(operand, Node):
            if tape is None:
                tape = operand.tape
            elif operand.tape is not tape:
                raise ContractError("operands live on different tapes")
    return tape if tape is not None else Tape()


def lift(x, tape: Optional[Tape] = None) -> Node:
    """Return ``x`` as a node; raw arrays become constants on ``tape``."""
    if isinstance(x, Node):
        if tape is not None and x.tape is not tape:
            raise ContractError("node belongs to another tape")
        return x
    return (tape or Tape()).constant(x)


def lift_pair(a, b) -> Tuple[Node, Node]:
    tape = shared_tape(a, b)
    return lift(a, tape), lift(b, tape)


def _same_shape(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --- linear algebra ---


def matmul(a, b) -> Node:
    a, b = lift_pair(a, b)
    if a.cols != b.rows:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def rule(g):
        return g @ bv.T, av.T @ g

    return _new(a.tape, av @ bv, (a, b), rule, "matmul")


def add(a, b) -> Node:
    a, b = lift_pair(a, b)
    _same_shape("add", a, b)
    return _new(a.tape, a.value + b.value, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Node:
    a, b = lift_pair(a, b)
    _same_shape("sub", a, b)
    return _new(a.tape, a.value - b.value, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Node:
    a, b = lift_pair(a, b)
    _same_shape("mul", a, b)
    av, bv = a.value, b.value
    return _new(a.tape, av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def add_row(a, row) -> Node:
    """Add a 1xC row (a bias) to every row of an RxC node."""
    a, row = lift_pair(a, row)
    if row.rows != 1 or row.cols != a.cols:
        raise DimensionError(f"add_row: {a.shape} + {row.shape}")
    return _new(
        a.tape, a.value + row.value, (a, row),
        lambda g: (g, g.sum(axis=0, keepdims=True)), "add_row",
    )


def affine(a, scale: float = 1.0, shift: float = 0.0) -> Node:
    """scale * a + shift with python-float coefficients."""
    a = lift(a)
    return _new(a.tape, scale * a.value + shift, (a,), lambda g: (scale * g,), "affine")


def concat_cols(a, b) -> Node:
    a, b = lift_pair(a, b)
    if a.rows != b.rows:
        raise DimensionError(f"concat_cols: {a.shape} | {b.shape}")
    split = a.cols
    return _new(
        a.tape, np.concatenate([a.value, b.value], axis=1), (a, b),
        lambda g: (g[:, :split], g[:, split:]), "concat_cols",
    )


def concat_rows(nodes: Sequence[Node]) -> Node:
    tape = shared_tape(*nodes)
    nodes = [lift(n, tape) for n in nodes]
    widths = {n.cols for n in nodes}
    if len(widths) != 1:
        raise DimensionError(f"concat_rows: column counts differ {sorted(widths)}")
    bounds = np.cumsum([0] + [n.rows for n in nodes])

    def rule(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(nodes)))

    return _new(tape, np.concatenate([n.value for n in nodes], axis=0), tuple(nodes), rule, "concat_rows")


def take_rows(a, index) -> Node:
    a = lift(a)
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError("take_rows: index must be one-dimensional")
    if idx.size and (idx.min() < 0 or idx.max() >= a.rows):
        raise DimensionError(f"take_rows: index out of range for {a.rows} rows")
    repeated = np.unique(idx).size != idx.size

    def rule(g):
        out = np.zeros_like(a.value)
        if repeated:
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)

    return _new(a.tape, a.value[idx], (a,), rule, "take_rows")


def column(a, j: int) -> Node:
    """Column j of a as an Rx1 node."""
    a = lift(a)
    if not 0 <= j < a.cols:
        raise DimensionError(f"column {j} out of range for {a.shape}")

    def rule(g):
        out = np.zeros_like(a.value)
        out[:, j:j + 1] = g
        return (out,)

    return _new(a.tape, a.value[:, j:j + 1].copy(), (a,), rule, "column")


# --- elementwise ---


def leaky_relu(a, slope: float = 0.1) -> Node:
    a = lift(a)
    mask = a.value > 0
    factor = np.where(mask, 1.0, slope)
    return _new(a.tape, a.value * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def exp(a) -> Node:
    a = lift(a)
    out = np.exp(a.value)
    return _new(a.tape, out, (a,), lambda g: (g * out,), "exp", check=True)


def ln(a) -> Node:
    a = lift(a)
    if np.any(a.value <= 0):
        raise DomainError("ln: input must be strictly positive")
    av = a.value
    return _new(a.tape, np.log(av), (a,), lambda g: (g / av,), "ln")


def square(a) -> Node:
    a = lift(a)
    av = a.value
    return _new(a.tape, av * av, (a,), lambda g: (2.0 * av * g,), "square")


def clamp(a, lo: float, hi: float) -> Node:
    """Clip to [lo, hi]; gradient passes only where the input was inside the band."""
    a = lift(a)
    inside = (a.value >= lo) & (a.value <= hi)
    return _new(a.tape, np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,), "clamp")


_UNARY = {"leaky_relu": leaky_relu, "exp": exp, "ln": ln, "square": square}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, *operands, **kwargs) -> Node:
    """Dispatch ``op`` in {add, sub, mul, leaky_relu, exp, ln, square}."""
    if op in _BINARY:
        if len(operands) != 2:
            raise ParameterError(f"{op} takes two operands")
        return _BINARY[op](*operands)
    if op in _UNARY:
        if len(operands) != 1:
            raise ParameterError(f"{op} takes one operand")
        return _UNARY[op](operands[0], **kwargs)
    raise ParameterError(f"unknown elementwise op: {op}")


# --- reductions ---


def sum_all(a) -> Node:
    a = lift(a)
    shape = a.shape
    return _new(
        a.tape, np.array([[a.value.sum()]]), (a,),
        lambda g: (np.full(shape, g[0, 0]),), "sum_all",
    )


def mean_all(a) -> Node:
    a = lift(a)
    shape = a.shape
    count = a.value.size
    return _new(
        a.tape, np.array([[a.value.mean()]]), (a,),
        lambda g: (np.full(shape, g[0, 0] / count),), "mean_all",
    )


def row_sum(a) -> Node:
    """Sum across columns: RxC -> Rx1."""
    a = lift(a)
    cols = a.cols
    return _new(
        a.tape, a.value.sum(axis=1, keepdims=True), (a,),
        lambda g: (np.repeat(g, cols, axis=1),), "row_sum",
    )


# --- network pieces ---


def softmax_rows(a) -> Node:
    a = lift(a)
    if a.cols < 1:
        raise DimensionError("softmax_rows needs at least one column")
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def rule(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _new(a.tape, s, (a,), rule, "softmax_rows")


def log_softmax_rows(a) -> Node:
    """Row-wise log of softmax, computed from the logits so saturated rows keep their gradient."""
    a = lift(a)
    if a.cols < 1:
        raise DimensionError("log_softmax_rows needs at least one column")
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    s = np.exp(out)

    def rule(g):
        return (g - s * g.sum(axis=1, keepdims=True),)

    return _new(a.tape, out, (a,), rule, "log_softmax_rows")


def dropout(a, rate: float, rng: Optional[np.random.Generator], training: bool) -> Node:
    """Inverted dropout: survivors scaled by 1/(1-rate) in training, identity otherwise."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    a = lift(a)
    if not training or rate == 0.0:
        return a
    if rng is None:
        raise ContractError("dropout in training mode needs an rng")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _new(a.tape, a.value * keep, (a,), lambda g: (g * keep,), "dropout")


# --- backward ---


def backward(loss: Node) -> Dict[str, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf.

    Intermediate gradients are recomputed on each call, leaf gradients add up
    until ``Tape.zero_grad``. Returns the accumulated gradients of named
    trainable leaves.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
    tape = loss.tape
    try:
        stop = tape.nodes.index(loss)
    except ValueError:
        raise ContractError("loss node is not recorded on its tape") from None

    pending: Dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    for node in reversed(tape.nodes[: stop + 1]):
        g = pending.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        if node.backward_rule is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node.parents, node.backward_rule(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg

    return {
        n.name: n.grad if n.grad is not None else np.zeros_like(n.value)
        for n in tape.nodes
        if n.backward_rule is None and n.requires_grad and n.name is not None
    }


def central_difference(fn: Callable[[], float], target: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of ``fn`` w.r.t. ``target``, perturbed in place."""
    grad = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    for _ in it:
        ix = it.multi_index
        original = target[ix]
        target[ix] = original + h
        up = fn()
        target[ix] = original - h
        down = fn()
        target[ix] = original
        grad[ix] = (up - down) / (2.0 * h)
    return grad
