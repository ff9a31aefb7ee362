"""Dense-matrix reverse-mode differentiation on an explicit tape.

Everything downstream (walk losses, networks, the gradient penalty) is built
from the primitives here.  All values are 2-D float64 matrices; scalars are
1x1.  Operations execute eagerly, record themselves on the innermost active
``Tape``, and carry vector-Jacobian closures that are themselves expressed in
these primitives, so gradients of gradients (needed for the Lipschitz penalty)
come for free via ``Tape.gradient(..., create_graph=True)``.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Mat",
    "Parameter",
    "Tape",
    "DimensionError",
    "DegenerateInputError",
    "NonFiniteError",
    "TapeError",
    "ContractError",
    "add",
    "sub",
    "neg",
    "mul",
    "div",
    "smul",
    "sadd",
    "matmul",
    "transpose",
    "sum_all",
    "sum_rows",
    "sum_cols",
    "mean_all",
    "exp",
    "log",
    "sqrt",
    "square",
    "leaky_relu",
    "clip_min",
    "concat_cols",
    "slice_cols",
    "row_softmax",
    "pairwise_neg_sqdist",
    "scaled_l2_normalize",
    "cross_entropy_rows",
    "backward",
    "finite_diff_check",
    "finite_diff_check_param",
]

LOG_FLOOR = 1e-30  # clamp inside cross-entropy so underflowed probabilities stay finite


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DegenerateInputError(ValueError):
    """Input is structurally valid but numerically degenerate (e.g. zero-norm row)."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class TapeError(RuntimeError):
    """Tape misuse: no active tape, or reuse of a consumed tape."""


class ContractError(ValueError):
    """An input violated a documented numeric contract (e.g. non-stochastic rows)."""


_ACTIVE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_ACTIVE, "stack", None)
    if stack is None:
        stack = []
        _ACTIVE.stack = stack
    return stack


def _active_tape() -> "Tape":
    stack = _tape_stack()
    if not stack:
        raise TapeError(
            "no active Tape: wrap differentiable computations in `with Tape() as tape:`"
        )
    return stack[-1]


def _as_value(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim == 0:
        v = v.reshape(1, 1)
    elif v.ndim == 1:
        v = v.reshape(1, -1)
    if v.ndim != 2:
        raise DimensionError(f"matrices are 2-D, got array of shape {v.shape}")
    if v.shape[0] < 1 or v.shape[1] < 1:
        raise DimensionError(f"matrices need at least one row and column, got {v.shape}")
    return v


class Mat:
    """A matrix node in the differentiation graph.

    Leaves are built directly (``Mat(values)``); interior nodes are created by
    the operations in this module.  ``watch=True`` marks a leaf whose gradient
    ``backward`` should populate.
    """

    __slots__ = ("value", "parents", "vjps", "watched", "name", "grad")

    def __init__(self, value, *, watch: bool = False, name: str | None = None):
        v = _as_value(value)
        if not np.isfinite(v).all():
            raise NonFiniteError(f"leaf '{name or '?'}' contains NaN/Inf")
        self.value = v
        self.parents: tuple[Mat, ...] = ()
        self.vjps: tuple[Callable[[Mat], Mat], ...] = ()
        self.watched = watch
        self.name = name
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    @property
    def T(self) -> "Mat":
        return transpose(self)

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise DimensionError(f"item() needs a 1x1 matrix, got {self.value.shape}")
        return float(self.value[0, 0])

    def __repr__(self) -> str:
        tag = self.name or ("leaf" if not self.parents else "op")
        return f"Mat({tag}, shape={self.value.shape})"

    # operator sugar; floats are folded in as constant scalings/shifts
    def __add__(self, other):
        if isinstance(other, (int, float)):
            return sadd(self, float(other))
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return sadd(self, -float(other))
        return sub(self, other)

    def __rsub__(self, other):
        if isinstance(other, (int, float)):
            return sadd(neg(self), float(other))
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return smul(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return smul(self, 1.0 / float(other))
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


class Parameter(Mat):
    """A trainable leaf with a persistent gradient accumulator."""

    __slots__ = ()

    def __init__(self, value, name: str):
        super().__init__(value, watch=True, name=name)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad.fill(0.0)


class Tape:
    """Ordered record of the primitive operations of one forward pass.

    Creation order is a topological order, so replaying the record backward
    visits every node exactly once.  A tape is consumed by ``backward``; a
    second backward without recording new operations is rejected.
    """

    def __init__(self):
        self._nodes: list[Mat] = []
        self._watermark = 0  # record length at the last gradient/backward call

    @staticmethod
    def current() -> "Tape":
        """The innermost active tape; raises if none is active."""
        return _active_tape()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape stack corrupted: exiting a tape that is not innermost")
        stack.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, node: Mat) -> None:
        self._nodes.append(node)

    def gradient(
        self,
        loss: Mat,
        sources: Sequence[Mat],
        *,
        create_graph: bool = False,
        _accumulate: bool = False,
    ) -> list[Mat]:
        """Gradients of a scalar ``loss`` with respect to ``sources``.

        With ``create_graph=True`` the returned gradients are recorded on this
        tape and are themselves differentiable (double backward).  Sources with
        no path to the loss get exact zeros.  Leaf ``.grad`` accumulators are
        only touched by ``backward``, never by explicit gradient queries.
        """
        if loss.value.shape != (1, 1):
            raise TapeError(f"backward root must be scalar (1x1), got {loss.value.shape}")
        if len(self._nodes) <= self._watermark:
            raise TapeError(
                "tape already consumed: run a new forward pass before calling backward again"
            )
        if loss.parents and not any(loss is node for node in reversed(self._nodes)):
            raise TapeError("loss node was not recorded on this tape")
        self._watermark = len(self._nodes)

        wanted = {id(s): i for i, s in enumerate(sources)}
        out: list[Mat | None] = [None] * len(sources)

        ctx = self if create_graph else Tape()
        _tape_stack().append(ctx)
        try:
            seed = Mat(np.ones((1, 1)))
            pending: dict[int, Mat] = {id(loss): seed}
            leaves: dict[int, Mat] = {}
            if not loss.parents:
                leaves[id(loss)] = loss
            # reversed() iterates from the record length at call time, so vjp
            # nodes appended under create_graph are not revisited here
            for node in reversed(self._nodes):
                g = pending.pop(id(node), None)
                if g is None:
                    continue  # no path to the loss: gradient is exactly zero
                if id(node) in wanted:
                    out[wanted[id(node)]] = g
                for parent, vjp in zip(node.parents, node.vjps):
                    contrib = vjp(g)
                    prev = pending.get(id(parent))
                    pending[id(parent)] = contrib if prev is None else add(prev, contrib)
                    if not parent.parents:
                        leaves[id(parent)] = parent
            for key, leaf in leaves.items():
                g = pending.get(key)
                if g is None:
                    continue
                if key in wanted and out[wanted[key]] is None:
                    out[wanted[key]] = g
                if _accumulate and leaf.watched:
                    if leaf.grad is None:
                        leaf.grad = np.zeros_like(leaf.value)
                    leaf.grad += g.value
        finally:
            popped = _tape_stack().pop()
            assert popped is ctx
        return [
            g if g is not None else Mat(np.zeros_like(src.value))
            for g, src in zip(out, sources)
        ]

    def backward(self, loss: Mat) -> None:
        """Populate ``.grad`` on every Parameter and watched leaf reachable from ``loss``."""
        self.gradient(loss, [], _accumulate=True)


def backward(loss: Mat, tape: Tape) -> None:
    """Reverse-mode sweep over ``tape`` from the scalar node ``loss``."""
    tape.backward(loss)


def _make(value: np.ndarray, parents: tuple[Mat, ...], vjps: tuple) -> Mat:
    if not np.isfinite(value).all():
        names = ", ".join(p.name or "?" for p in parents)
        raise NonFiniteError(f"operation on ({names}) produced NaN/Inf")
    node = Mat.__new__(Mat)
    node.value = value
    node.parents = parents
    node.vjps = vjps
    node.watched = False
    node.name = None
    node.grad = None
    _active_tape()._record(node)
    return node


def _broadcast_shape(a: Mat, b: Mat, opname: str) -> tuple[int, int]:
    (ar, ac), (br, bc) = a.value.shape, b.value.shape
    if (ar != br and 1 not in (ar, br)) or (ac != bc and 1 not in (ac, bc)):
        raise DimensionError(f"{opname}: shapes {a.value.shape} and {b.value.shape} do not broadcast")
    return (max(ar, br), max(ac, bc))


def _reduce_to(g: Mat, shape: tuple[int, int]) -> Mat:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.value.shape == shape:
        return g
    if g.value.shape[0] != shape[0]:
        g = sum_cols(g)
    if g.value.shape[1] != shape[1]:
        g = sum_rows(g)
    return g


def add(a: Mat, b: Mat) -> Mat:
    _broadcast_shape(a, b, "add")
    return _make(
        a.value + b.value,
        (a, b),
        (lambda g: _reduce_to(g, a.value.shape), lambda g: _reduce_to(g, b.value.shape)),
    )


def sub(a: Mat, b: Mat) -> Mat:
    return add(a, neg(b))


def neg(a: Mat) -> Mat:
    return _make(-a.value, (a,), (lambda g: neg(g),))


def mul(a: Mat, b: Mat) -> Mat:
    _broadcast_shape(a, b, "mul")
    return _make(
        a.value * b.value,
        (a, b),
        (
            lambda g: _reduce_to(mul(g, b), a.value.shape),
            lambda g: _reduce_to(mul(g, a), b.value.shape),
        ),
    )


def div(a: Mat, b: Mat) -> Mat:
    _broadcast_shape(a, b, "div")
    out = _make(
        a.value / b.value,
        (a, b),
        (
            lambda g: _reduce_to(div(g, b), a.value.shape),
            lambda g: _reduce_to(neg(mul(g, div(out, b))), b.value.shape),
        ),
    )
    return out


def smul(a: Mat, c: float) -> Mat:
    return _make(a.value * c, (a,), (lambda g: smul(g, c),))


def sadd(a: Mat, c: float) -> Mat:
    return _make(a.value + c, (a,), (lambda g: g,))


def matmul(a: Mat, b: Mat) -> Mat:
    if a.value.shape[1] != b.value.shape[0]:
        raise DimensionError(
            f"matmul: inner dimensions differ, {a.value.shape} @ {b.value.shape}"
        )
    return _make(
        a.value @ b.value,
        (a, b),
        (lambda g: matmul(g, transpose(b)), lambda g: matmul(transpose(a), g)),
    )


def transpose(a: Mat) -> Mat:
    return _make(a.value.T.copy(), (a,), (lambda g: transpose(g),))


def sum_all(a: Mat) -> Mat:
    ones = np.ones_like(a.value)
    return _make(
        np.array([[a.value.sum()]]),
        (a,),
        (lambda g: mul(Mat(ones), g),),
    )


def sum_rows(a: Mat) -> Mat:
    """Row sums, shape (rows, 1)."""
    ones = np.ones_like(a.value)
    return _make(
        a.value.sum(axis=1, keepdims=True),
        (a,),
        (lambda g: mul(Mat(ones), g),),
    )


def sum_cols(a: Mat) -> Mat:
    """Column sums, shape (1, cols)."""
    ones = np.ones_like(a.value)
    return _make(
        a.value.sum(axis=0, keepdims=True),
        (a,),
        (lambda g: mul(Mat(ones), g),),
    )


def mean_all(a: Mat) -> Mat:
    return smul(sum_all(a), 1.0 / a.value.size)


def exp(a: Mat) -> Mat:
    out = _make(np.exp(a.value), (a,), ())
    out.vjps = (lambda g: mul(g, out),)
    return out


def log(a: Mat) -> Mat:
    return _make(np.log(a.value), (a,), (lambda g: div(g, a),))


def sqrt(a: Mat) -> Mat:
    out = _make(np.sqrt(a.value), (a,), ())
    out.vjps = (lambda g: div(smul(g, 0.5), out),)
    return out


def square(a: Mat) -> Mat:
    return mul(a, a)


def leaky_relu(a: Mat, slope: float = 0.2) -> Mat:
    mask = np.where(a.value > 0.0, 1.0, slope)
    return _make(a.value * mask, (a,), (lambda g: mul(g, Mat(mask)),))


def clip_min(a: Mat, floor: float) -> Mat:
    mask = (a.value > floor).astype(np.float64)
    return _make(np.maximum(a.value, floor), (a,), (lambda g: mul(g, Mat(mask)),))


def concat_cols(a: Mat, b: Mat) -> Mat:
    if a.value.shape[0] != b.value.shape[0]:
        raise DimensionError(
            f"concat_cols: row counts differ, {a.value.shape} vs {b.value.shape}"
        )
    na = a.value.shape[1]
    return _make(
        np.hstack([a.value, b.value]),
        (a, b),
        (
            lambda g: slice_cols(g, 0, na),
            lambda g: slice_cols(g, na, na + b.value.shape[1]),
        ),
    )


def slice_cols(a: Mat, start: int, stop: int) -> Mat:
    rows, cols = a.value.shape
    if not (0 <= start < stop <= cols):
        raise DimensionError(f"slice_cols: [{start}:{stop}] out of range for {a.value.shape}")

    def vjp(g: Mat) -> Mat:
        left = g
        if start > 0:
            left = concat_cols(Mat(np.zeros((rows, start))), g)
        if stop < cols:
            left = concat_cols(left, Mat(np.zeros((rows, cols - stop))))
        return left

    return _make(a.value[:, start:stop].copy(), (a,), (vjp,))


def row_softmax(m: Mat) -> Mat:
    """Softmax over each row, computed with max subtraction for stability."""
    shifted = m.value - m.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    out = _make(p, (m,), ())
    # d softmax: p * (g - rowsum(g * p)), expressed in primitives so that the
    # walk losses stay twice differentiable
    out.vjps = (lambda g: mul(out, sub(g, sum_rows(mul(g, out)))),)
    return out


def pairwise_neg_sqdist(x: Mat, y: Mat) -> Mat:
    """Entry (i, j) is the negated squared Euclidean distance between row i of x and row j of y."""
    if x.value.shape[1] != y.value.shape[1]:
        raise DimensionError(
            f"pairwise_neg_sqdist: feature dims differ, {x.value.shape} vs {y.value.shape}"
        )
    diff = x.value[:, None, :] - y.value[None, :, :]
    value = -np.einsum("ijk,ijk->ij", diff, diff)
    out = _make(value, (x, y), ())
    out.vjps = (
        lambda g: smul(sub(mul(x, sum_rows(g)), matmul(g, y)), -2.0),
        lambda g: smul(sub(matmul(transpose(g), x), mul(y, transpose(sum_cols(g)))), 2.0),
    )
    return out


def scaled_l2_normalize(v: Mat, beta: float) -> Mat:
    """Rescale every row to Euclidean norm ``beta``."""
    sq = sum_rows(mul(v, v))
    if (sq.value <= 0.0).any():
        bad = int(np.argmax(sq.value.ravel() <= 0.0))
        raise DegenerateInputError(f"scaled_l2_normalize: row {bad} has zero norm")
    norms = sqrt(sq)
    return smul(div(v, norms), beta)


def cross_entropy_rows(p: Mat, target, *, tol: float = 1e-6) -> Mat:
    """Cross entropy between each row of ``p`` and ``target``, summed over rows.

    ``target`` may be a single probability row (applied to every row of ``p``)
    or a matrix of per-row targets; it is treated as a constant.  Probabilities
    are clamped at 1e-30 before the log so underflow cannot produce -inf.
    """
    t = _as_value(target.value if isinstance(target, Mat) else target)
    row_sums = p.value.sum(axis=1)
    if np.abs(row_sums - 1.0).max() > tol:
        raise ContractError(
            f"cross_entropy_rows: rows of p must sum to 1 within {tol}, "
            f"worst deviation {np.abs(row_sums - 1.0).max():.3e}"
        )
    if np.abs(t.sum(axis=1) - 1.0).max() > tol:
        raise ContractError(f"cross_entropy_rows: target rows must sum to 1 within {tol}")
    if t.shape[1] != p.value.shape[1] or t.shape[0] not in (1, p.value.shape[0]):
        raise DimensionError(
            f"cross_entropy_rows: target shape {t.shape} does not match p {p.value.shape}"
        )
    weighted = mul(log(clip_min(p, LOG_FLOOR)), Mat(t))
    return neg(sum_all(weighted))


def finite_diff_check(
    f: Callable[[Mat], Mat],
    x,
    h: float = 1e-5,
) -> float:
    """Max relative disagreement between the analytic gradient of ``f`` and central differences.

    ``f`` maps a matrix node to a scalar node.  The numeric side re-evaluates
    ``f`` on plain perturbed values, so it is independent of the vjp path it
    checks.  Relative error per entry is |analytic - numeric| / max(1, |analytic|).
    """
    x0 = _as_value(x).copy()
    with Tape() as tape:
        leaf = Mat(x0.copy(), watch=True)
        loss = f(leaf)
        tape.backward(loss)
    analytic = leaf.grad

    def value_at(arr: np.ndarray) -> float:
        with Tape():
            return f(Mat(arr)).item()

    return _central_difference_scan(value_at, x0, analytic, h)


def finite_diff_check_param(
    f: Callable[[], Mat],
    param: Parameter,
    h: float = 1e-5,
) -> float:
    """Like ``finite_diff_check`` but for a Parameter a closed-over model reads.

    ``f`` is a thunk evaluating the scalar loss from the current parameter
    values.  The parameter's value and gradient are restored on exit.
    """
    x0 = param.value.copy()
    grad0 = param.grad.copy()
    try:
        param.zero_grad()
        with Tape() as tape:
            tape.backward(f())
        analytic = param.grad.copy()

        def value_at(arr: np.ndarray) -> float:
            param.value[...] = arr
            with Tape():
                return f().item()

        return _central_difference_scan(value_at, x0, analytic, h)
    finally:
        param.value[...] = x0
        param.grad[...] = grad0


def _central_difference_scan(value_at, x0: np.ndarray, analytic: np.ndarray, h: float) -> float:
    worst = 0.0
    it = np.nditer(x0, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        hi = x0.copy()
        hi[idx] += h
        lo = x0.copy()
        lo[idx] -= h
        numeric = (value_at(hi) - value_at(lo)) / (2.0 * h)
        a = analytic[idx]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
