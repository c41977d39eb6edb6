"""Reverse-mode automatic differentiation over dense float64 matrices.

Everything is a 2-D numpy array wrapped in a :class:`ValueNode`.  Operations
executed inside a ``with Tape():`` block record their inputs and a
vector-Jacobian closure; outside a tape they compute values only, which is
what the replay-based trainer uses for its gradient-free forward pass.

Design points that the rest of the package relies on:

* Backward walks nodes in reverse creation order, which is a valid reverse
  topological order because parents always exist before children.  The
  accumulation order is therefore fixed, so repeated backward passes over
  identical graphs produce bitwise-identical gradients.
* Leaf gradients (``ValueNode.grad``) persist and accumulate additively
  across backward calls on the same tape.  Intermediate gradients are
  transient per call, so seeding a second backward from a different output
  does not double-count the first objective's contributions.
* A tape is consumed by ``backward(..., retain=False)``; any further
  backward on it raises :class:`TapeConsumedError`.
* ``Tape.stored_floats`` counts the float64 entries of recorded
  intermediate values.  Leaves are excluded: they are the model, not
  activations.  The trainer uses this counter for its memory accounting.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import (
    DomainError,
    InvalidArgumentError,
    ShapeError,
    TapeConsumedError,
)

# Floor used when inverting attention normalizers; reciprocal clamps its
# argument to this value instead of dividing by something arbitrarily tiny.
RECIPROCAL_FLOOR = 1e-6

_tape_stack: list["Tape"] = []


def active_tape() -> "Tape | None":
    """The innermost tape currently recording, or None."""
    return _tape_stack[-1] if _tape_stack else None


class Tape:
    """Records one forward pass for a reverse sweep.

    Use as a context manager::

        with Tape() as tape:
            out = matmul(x, w)
        backward(out)

    The same tape supports several backward calls as long as every call but
    the last passes ``retain=True``.
    """

    def __init__(self) -> None:
        self._ops: list[ValueNode] = []
        self._leaves: list[ValueNode] = []
        self.consumed = False
        self.stored_floats = 0

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        popped = _tape_stack.pop()
        if popped is not self:
            raise RuntimeError("tape stack corrupted")
        return False

    def _record_op(self, node: "ValueNode") -> None:
        self._ops.append(node)
        self.stored_floats += node.value.size

    def _record_leaf(self, node: "ValueNode") -> None:
        self._leaves.append(node)

    @property
    def leaves(self) -> tuple["ValueNode", ...]:
        return tuple(self._leaves)

    def _release(self) -> None:
        for node in self._ops:
            node._parents = ()
            node._vjp = None


class ValueNode:
    """A float64 matrix plus the bookkeeping needed for reverse mode.

    ``grad`` is a zero-initialized accumulator of the same shape.  It is
    only ever populated for leaves; read it after backward.
    """

    __slots__ = ("value", "requires_grad", "_grad", "_parents", "_vjp", "_tape")

    def __init__(self, value, requires_grad: bool = False):
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"ValueNode requires a 2-D matrix, got shape {arr.shape}")
        self.value = arr
        self.requires_grad = requires_grad
        self._grad: np.ndarray | None = None
        self._parents: tuple[ValueNode, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray]] | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    def _accumulate(self, g: np.ndarray) -> None:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        self._grad += g

    def zero_grad(self) -> None:
        self._grad = None

    # Small amount of operator sugar so model code stays readable.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return subtract(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return hadamard(self, other)

    def __repr__(self) -> str:
        flags = "leaf" if self.is_leaf else "op"
        return f"ValueNode(shape={self.value.shape}, {flags}, requires_grad={self.requires_grad})"


def leaf(value, requires_grad: bool = True) -> ValueNode:
    """Create a differentiation endpoint (parameter or input).

    Registered on the active tape, if any, so it shows up in gradient maps;
    its floats are not counted as activation storage.
    """
    node = ValueNode(value, requires_grad=requires_grad)
    tape = active_tape()
    if tape is not None and requires_grad:
        node._tape = tape
        tape._record_leaf(node)
    return node


def constant(value) -> ValueNode:
    """A matrix that never receives gradients (masks, geometry, pooled weights)."""
    return ValueNode(value, requires_grad=False)


def _as_node(x) -> ValueNode:
    if isinstance(x, ValueNode):
        return x
    return ValueNode(np.asarray(x, dtype=np.float64))


def _emit(value: np.ndarray, parents: tuple[ValueNode, ...], vjp) -> ValueNode:
    tape = active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    node = ValueNode(value, requires_grad=needs)
    if needs:
        node._parents = parents
        node._vjp = vjp
        node._tape = tape
        tape._record_op(node)
    return node


def _require_same_shape(a: ValueNode, b: ValueNode, op: str) -> None:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"{op}: shapes {a.value.shape} and {b.value.shape} differ")


# ---------------------------------------------------------------------------
# arithmetic primitives


def add(a, b) -> ValueNode:
    a, b = _as_node(a), _as_node(b)
    _require_same_shape(a, b, "add")
    return _emit(a.value + b.value, (a, b), lambda g: (g, g))


def subtract(a, b) -> ValueNode:
    a, b = _as_node(a), _as_node(b)
    _require_same_shape(a, b, "subtract")
    return _emit(a.value - b.value, (a, b), lambda g: (g, -g))


def hadamard(a, b) -> ValueNode:
    a, b = _as_node(a), _as_node(b)
    _require_same_shape(a, b, "hadamard")
    av, bv = a.value, b.value
    return _emit(av * bv, (a, b), lambda g: (g * bv, g * av))


def scalar_mul(a, c: float) -> ValueNode:
    a = _as_node(a)
    c = float(c)
    return _emit(a.value * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> ValueNode:
    a, b = _as_node(a), _as_node(b)
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(
            f"matmul: inner dimensions {a.value.shape} x {b.value.shape} do not align"
        )
    av, bv = a.value, b.value
    return _emit(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a) -> ValueNode:
    a = _as_node(a)
    return _emit(a.value.T.copy(), (a,), lambda g: (g.T,))


def row_sum(a) -> ValueNode:
    """Sum each row: (r, c) -> (r, 1)."""
    a = _as_node(a)
    r, c = a.value.shape
    return _emit(
        a.value.sum(axis=1, keepdims=True),
        (a,),
        lambda g: (np.repeat(g, c, axis=1),),
    )


def col_sum(a) -> ValueNode:
    """Sum each column: (r, c) -> (1, c)."""
    a = _as_node(a)
    r, c = a.value.shape
    return _emit(
        a.value.sum(axis=0, keepdims=True),
        (a,),
        lambda g: (np.repeat(g, r, axis=0),),
    )


def broadcast_col(a, n_cols: int) -> ValueNode:
    """Tile a column vector (r, 1) across n_cols columns."""
    a = _as_node(a)
    if a.value.shape[1] != 1:
        raise ShapeError(f"broadcast_col expects a column vector, got {a.value.shape}")
    if n_cols < 1:
        raise InvalidArgumentError("broadcast_col: n_cols must be positive")
    return _emit(
        np.repeat(a.value, n_cols, axis=1),
        (a,),
        lambda g: (g.sum(axis=1, keepdims=True),),
    )


def broadcast_row(a, n_rows: int) -> ValueNode:
    """Tile a row vector (1, c) across n_rows rows (bias addition helper)."""
    a = _as_node(a)
    if a.value.shape[0] != 1:
        raise ShapeError(f"broadcast_row expects a row vector, got {a.value.shape}")
    if n_rows < 1:
        raise InvalidArgumentError("broadcast_row: n_rows must be positive")
    return _emit(
        np.repeat(a.value, n_rows, axis=0),
        (a,),
        lambda g: (g.sum(axis=0, keepdims=True),),
    )


def add_bias(x, bias) -> ValueNode:
    """Add a (1, c) bias row to every row of x."""
    x = _as_node(x)
    return add(x, broadcast_row(bias, x.value.shape[0]))


# ---------------------------------------------------------------------------
# nonlinear primitives


def elu_plus_one(a) -> ValueNode:
    """The strictly positive feature map x >= 0 -> x + 1, x < 0 -> exp(x)."""
    a = _as_node(a)
    x = a.value
    pos = x >= 0
    out = np.where(pos, x + 1.0, np.exp(np.minimum(x, 0.0)))
    # For x < 0 the output equals the derivative, so reuse it.
    return _emit(out, (a,), lambda g: (g * np.where(pos, 1.0, out),))


def relu(a) -> ValueNode:
    a = _as_node(a)
    x = a.value
    mask = (x > 0).astype(np.float64)
    return _emit(x * mask, (a,), lambda g: (g * mask,))


def power(a, exponent: float) -> ValueNode:
    """Elementwise x ** exponent for strictly positive x."""
    a = _as_node(a)
    exponent = float(exponent)
    x = a.value
    if np.any(x <= 0.0):
        raise DomainError("power: inputs must be strictly positive")
    out = x**exponent
    return _emit(out, (a,), lambda g: (g * exponent * x ** (exponent - 1.0),))


def reciprocal(a) -> ValueNode:
    """Elementwise 1 / max(x, floor) for positive x.

    Inputs at or below zero indicate a corrupted normalizer and raise
    :class:`DomainError`; inputs inside (0, floor) are clamped, and the
    gradient there is zero because the output is locally constant.
    """
    a = _as_node(a)
    x = a.value
    if np.any(x <= 0.0):
        raise DomainError("reciprocal: inputs must be strictly positive")
    clamped = np.maximum(x, RECIPROCAL_FLOOR)
    out = 1.0 / clamped
    live = (x >= RECIPROCAL_FLOOR).astype(np.float64)
    return _emit(out, (a,), lambda g: (-g * out * out * live,))


def layer_norm(x, gain, bias, eps: float = 1e-5) -> ValueNode:
    """Row-wise layer normalization with learnable (1, c) gain and bias."""
    x, gain, bias = _as_node(x), _as_node(gain), _as_node(bias)
    n, c = x.value.shape
    if gain.value.shape != (1, c) or bias.value.shape != (1, c):
        raise ShapeError(
            f"layer_norm: gain/bias must be (1, {c}), got {gain.value.shape} and {bias.value.shape}"
        )
    mu = x.value.mean(axis=1, keepdims=True)
    centered = x.value - mu
    var = (centered**2).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gain.value + bias.value

    def vjp(g):
        d_gain = (g * xhat).sum(axis=0, keepdims=True)
        d_bias = g.sum(axis=0, keepdims=True)
        d_xhat = g * gain.value
        mean_d = d_xhat.mean(axis=1, keepdims=True)
        mean_dx = (d_xhat * xhat).mean(axis=1, keepdims=True)
        d_x = inv_std * (d_xhat - mean_d - xhat * mean_dx)
        return (d_x, d_gain, d_bias)

    return _emit(out, (x, gain, bias), vjp)


def softmax_rows(a) -> ValueNode:
    a = _as_node(a)
    x = a.value
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        inner = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - inner),)

    return _emit(y, (a,), vjp)


# ---------------------------------------------------------------------------
# structural primitives


def concat_rows(a, b) -> ValueNode:
    a, b = _as_node(a), _as_node(b)
    if a.value.shape[1] != b.value.shape[1]:
        raise ShapeError(
            f"concat_rows: column counts {a.value.shape} vs {b.value.shape} differ"
        )
    ra = a.value.shape[0]
    return _emit(
        np.concatenate([a.value, b.value], axis=0),
        (a, b),
        lambda g: (g[:ra], g[ra:]),
    )


def concat_cols(a, b) -> ValueNode:
    a, b = _as_node(a), _as_node(b)
    if a.value.shape[0] != b.value.shape[0]:
        raise ShapeError(
            f"concat_cols: row counts {a.value.shape} vs {b.value.shape} differ"
        )
    ca = a.value.shape[1]
    return _emit(
        np.concatenate([a.value, b.value], axis=1),
        (a, b),
        lambda g: (g[:, :ca], g[:, ca:]),
    )


def slice_rows(a, start: int, stop: int) -> ValueNode:
    a = _as_node(a)
    r = a.value.shape[0]
    # start == stop yields an empty slice; callers use it for optional blocks.
    if not (0 <= start <= stop <= r):
        raise InvalidArgumentError(f"slice_rows: bad range [{start}, {stop}) for {r} rows")

    def vjp(g):
        full = np.zeros_like(a.value)
        full[start:stop] = g
        return (full,)

    return _emit(a.value[start:stop].copy(), (a,), vjp)


def slice_cols(a, start: int, stop: int) -> ValueNode:
    a = _as_node(a)
    c = a.value.shape[1]
    if not (0 <= start <= stop <= c):
        raise InvalidArgumentError(f"slice_cols: bad range [{start}, {stop}) for {c} columns")

    def vjp(g):
        full = np.zeros_like(a.value)
        full[:, start:stop] = g
        return (full,)

    return _emit(a.value[:, start:stop].copy(), (a,), vjp)


def embedding_rows(table, ids) -> ValueNode:
    """Gather rows of a (vocab, d) table by integer id; backward scatter-adds."""
    table = _as_node(table)
    ids = np.asarray(ids, dtype=np.int64).ravel()
    vocab = table.value.shape[0]
    if ids.size == 0:
        raise InvalidArgumentError("embedding_rows: empty id list")
    if ids.min() < 0 or ids.max() >= vocab:
        raise InvalidArgumentError(
            f"embedding_rows: ids outside [0, {vocab}) (got {ids.min()}..{ids.max()})"
        )

    def vjp(g):
        full = np.zeros_like(table.value)
        np.add.at(full, ids, g)
        return (full,)

    return _emit(table.value[ids].copy(), (table,), vjp)


# ---------------------------------------------------------------------------
# losses


def mse(pred, target) -> ValueNode:
    """Mean squared error against a constant target, as a (1, 1) node."""
    pred = _as_node(pred)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.value.shape:
        raise ShapeError(f"mse: target shape {target.shape} vs pred {pred.value.shape}")
    diff = pred.value - target
    size = diff.size
    out = np.array([[float((diff**2).mean())]])
    return _emit(out, (pred,), lambda g: (g[0, 0] * 2.0 * diff / size,))


def cross_entropy(logits, labels) -> ValueNode:
    """Mean cross-entropy of (n, c) logits against integer labels, as (1, 1)."""
    logits = _as_node(logits)
    labels = np.asarray(labels, dtype=np.int64).ravel()
    n, c = logits.value.shape
    if labels.shape[0] != n:
        raise ShapeError(f"cross_entropy: {labels.shape[0]} labels for {n} rows")
    if labels.min() < 0 or labels.max() >= c:
        raise InvalidArgumentError(f"cross_entropy: labels outside [0, {c})")
    x = logits.value
    shifted = x - x.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    picked = log_probs[np.arange(n), labels]
    out = np.array([[float(-picked.mean())]])
    probs = np.exp(log_probs)

    def vjp(g):
        grad = probs.copy()
        grad[np.arange(n), labels] -= 1.0
        return (g[0, 0] * grad / n,)

    return _emit(out, (logits,), vjp)


# ---------------------------------------------------------------------------
# reverse sweep


def backward(
    node: ValueNode, seed=None, retain: bool = False, stats: dict | None = None
) -> dict[ValueNode, np.ndarray]:
    """Accumulate d(seed . node)/d(leaf) into every reachable leaf's grad.

    ``seed`` defaults to all-ones (the usual choice for a (1, 1) loss).
    Returns a map from reached leaves to their gradient accumulators; with
    ``retain=True`` the tape stays usable for further backward calls, and
    leaf gradients from successive calls sum.  If ``stats`` is a dict, it
    receives ``pending_peak_floats``: the largest total size of transient
    (non-leaf) gradient matrices alive at any point of the sweep.
    """
    tape = node._tape
    if tape is None:
        raise InvalidArgumentError(
            "backward target was not recorded on a tape (no grad history)"
        )
    if tape.consumed:
        raise TapeConsumedError(
            "tape already consumed by a backward call without retain=True"
        )
    if seed is None:
        seed = np.ones_like(node.value)
    else:
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != node.value.shape:
            raise ShapeError(
                f"backward: seed shape {seed.shape} does not match output {node.value.shape}"
            )

    reachable: set[int] = set()
    stack = [node]
    while stack:
        n = stack.pop()
        if id(n) in reachable:
            continue
        reachable.add(id(n))
        for p in n._parents:
            if p.requires_grad and id(p) not in reachable:
                stack.append(p)

    pending: dict[int, np.ndarray] = {id(node): seed.astype(np.float64, copy=True)}
    live_floats = seed.size
    peak_floats = live_floats
    touched: dict[int, ValueNode] = {}
    if node.is_leaf:
        node._accumulate(pending[id(node)])
        touched[id(node)] = node
    for n in reversed(tape._ops):
        if id(n) not in reachable:
            continue
        g = pending.pop(id(n), None)
        if g is None:
            continue
        live_floats -= g.size
        for parent, pg in zip(n._parents, n._vjp(g)):
            if not parent.requires_grad:
                continue
            if parent.is_leaf:
                parent._accumulate(pg)
                touched[id(parent)] = parent
            else:
                prev = pending.get(id(parent))
                if prev is None:
                    pending[id(parent)] = pg
                    live_floats += pg.size
                else:
                    pending[id(parent)] = prev + pg
        peak_floats = max(peak_floats, live_floats)

    if stats is not None:
        stats["pending_peak_floats"] = peak_floats
    if not retain:
        tape.consumed = True
        tape._release()

    return {lf: lf.grad for lf in touched.values()}
