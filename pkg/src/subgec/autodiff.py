"""Define-by-run reverse-mode differentiation over dense float64 arrays.

A :class:`Tape` records every operation whose inputs include a tracked
tensor. ``backward(tape, loss)`` walks the records in reverse and returns a
gradient for every tracked tensor, keyed by node id.

    tape = Tape()
    w = tape.watch(np.ones((3, 2)))
    loss = reduce_sum(matmul(x, w))
    grads = backward(tape, loss)
    grads[w.node]
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "DimensionError",
    "DomainError",
    "NonFiniteError",
    "Tape",
    "Tensor",
    "add",
    "backward",
    "clamp",
    "concat_cols",
    "custom",
    "edge_spmm",
    "exp",
    "forward",
    "gather_rows",
    "l2_normalize_rows",
    "leaky_relu",
    "log",
    "logsumexp_rows",
    "matmul",
    "mul",
    "neg",
    "prelu",
    "reduce_mean",
    "reduce_sum",
    "row_softmax",
    "scale",
    "segment_softmax",
    "spmm",
    "sub",
]


class DimensionError(ValueError):
    """Operand shapes do not conform to the operation."""


class DomainError(ValueError):
    """Operation evaluated outside its domain (log of x <= 0, zero-norm row)."""


class NonFiniteError(FloatingPointError):
    """A forward operation produced NaN or Inf."""


class Tensor:
    """Dense float64 value, optionally tracked on a tape.

    Untracked tensors are plain immutable values. ``node`` is the handle
    into the owning tape; gradients come back keyed by it.
    """

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: Tape | None = None, node: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Record:
    inputs: tuple[int | None, ...]
    output: int
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered log of operations; rebuilt for every training iteration."""

    records: list[_Record] = field(default_factory=list)
    _next: int = 0
    _shapes: dict[int, tuple[int, ...]] = field(default_factory=dict)

    def _new_node(self, shape) -> int:
        node = self._next
        self._next += 1
        self._shapes[node] = tuple(shape)
        return node

    def watch(self, data) -> Tensor:
        """Register a leaf (usually a parameter) and return its tracked tensor."""
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "watch")
        return Tensor(arr, self, self._new_node(arr.shape))

    def __len__(self) -> int:
        return len(self.records)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op}: non-finite values in output")


def _record(op: str, out: np.ndarray, inputs: Sequence[Tensor], rule) -> Tensor:
    """Wrap ``out``; record ``rule`` on the tape shared by tracked inputs."""
    _check_finite(out, op)
    tapes = {id(t.tape): t.tape for t in inputs if t.tape is not None}
    if not tapes:
        return Tensor(out)
    if len(tapes) > 1:
        raise ValueError(f"{op}: inputs live on different tapes")
    tape = next(iter(tapes.values()))
    node = tape._new_node(out.shape)
    tape.records.append(_Record(tuple(t.node for t in inputs), node, rule))
    return Tensor(out, tape, node)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _record(
        "add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record(
        "sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb))
    )


def mul(a, b) -> Tensor:
    """Elementwise product."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record(
        "mul",
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record("negate", -a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _record("scalar-scale", c * a.data, (a,), lambda g: (c * g,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log: non-positive input")
    ad = a.data
    return _record("log", np.log(ad), (a,), lambda g: (g / ad,))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = _as_tensor(a)
    pos = a.data > 0
    factor = np.where(pos, 1.0, slope)
    return _record("leaky-relu", a.data * factor, (a,), lambda g: (g * factor,))


def prelu(a, slope) -> Tensor:
    """PReLU with a learned scalar slope (a 1-element tensor)."""
    a, slope = _as_tensor(a), _as_tensor(slope)
    if slope.data.size != 1:
        raise DimensionError(f"prelu: slope must hold one value, got shape {slope.shape}")
    s = float(slope.data.reshape(-1)[0])
    neg_part = np.minimum(a.data, 0.0)
    out = np.maximum(a.data, 0.0) + s * neg_part
    factor = np.where(a.data > 0, 1.0, s)
    sshape = slope.shape

    def rule(g):
        return g * factor, np.full(sshape, np.sum(g * neg_part))

    return _record("prelu", out, (a, slope), rule)


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to ``[lo, hi]``; gradient is zero where the bound is active."""
    a = _as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return _record("clamp", out, (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data
    # skip gradients nobody needs: X @ Theta with constant X is the hot path
    need_a, need_b = a.tracked, b.tracked
    return _record(
        "matmul",
        ad @ bd,
        (a, b),
        lambda g: (g @ bd.T if need_a else None, ad.T @ g if need_b else None),
    )


def spmm(s, a) -> Tensor:
    """Constant sparse matrix times dense tensor."""
    a = _as_tensor(a)
    if s.shape[1] != a.shape[0]:
        raise DimensionError(f"sparse-dense-matmul: shapes {s.shape} and {a.shape} do not conform")
    s = sp.csr_matrix(s)
    st = s.T.tocsr()
    return _record("sparse-dense-matmul", np.asarray(s @ a.data), (a,), lambda g: (st @ g,))


def edge_spmm(values, rows, cols, a, n_rows: int) -> Tensor:
    """``out[r] = sum_e values[e] * a[cols[e]]`` over edges with ``rows[e] == r``.

    Both the edge weights ``values`` (E x 1) and ``a`` may be tracked; this is
    the aggregation step of attention layers.
    """
    values, a = _as_tensor(values), _as_tensor(a)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if values.shape != (rows.size, 1) or rows.size != cols.size:
        raise DimensionError("edge_spmm: values must be (E, 1) matching the edge lists")
    w = values.data[:, 0]
    mat = sp.csr_matrix((w, (rows, cols)), shape=(n_rows, a.shape[0]))
    ad = a.data

    def rule(g):
        gv = np.einsum("ef,ef->e", g[rows], ad[cols])[:, None]
        return gv, np.asarray(mat.T @ g)

    return _record("edge-spmm", np.asarray(mat @ ad), (values, a), rule)


def concat_cols(*parts) -> Tensor:
    parts = tuple(_as_tensor(p) for p in parts)
    if len({p.shape[0] for p in parts}) != 1 or any(p.data.ndim != 2 for p in parts):
        raise DimensionError("concat-columns: row counts differ")
    widths = np.cumsum([0] + [p.shape[1] for p in parts])
    out = np.concatenate([p.data for p in parts], axis=1)
    return _record(
        "concat-columns",
        out,
        parts,
        lambda g: tuple(g[:, widths[i] : widths[i + 1]] for i in range(len(parts))),
    )


def gather_rows(a, index) -> Tensor:
    a = _as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise DimensionError(f"row-gather: index out of range for {a.shape[0]} rows")
    shape = a.shape

    def rule(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _record("row-gather", a.data[index], (a,), rule)


# ---------------------------------------------------------------- reductions


def reduce_sum(a) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    return _record(
        "reduce-sum", np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),)
    )


def reduce_mean(a) -> Tensor:
    a = _as_tensor(a)
    shape, n = a.shape, a.data.size
    return _record(
        "reduce-mean", np.array(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),)
    )


def row_softmax(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError("row-softmax: expects a matrix")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def rule(g):
        return (p * (g - np.sum(g * p, axis=1, keepdims=True)),)

    return _record("row-softmax", p, (a,), rule)


def logsumexp_rows(a, mask=None) -> Tensor:
    """Stable ``log(sum(exp(a), axis=1))`` as an (n, 1) column.

    ``mask`` (bool, same shape) selects the entries that take part; each row
    needs at least one.
    """
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError("logsumexp-rows: expects a matrix")
    keep = np.ones(a.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if keep.shape != a.shape:
        raise DimensionError("logsumexp-rows: mask shape differs from input")
    if not keep.any(axis=1).all():
        raise DomainError("logsumexp-rows: a row has no selected entries")
    x = np.where(keep, a.data, -np.inf)
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=1, keepdims=True)
    p = e / s
    return _record("logsumexp-rows", m + np.log(s), (a,), lambda g: (p * g,))


def segment_softmax(scores, segments, n_segments: int) -> Tensor:
    """Softmax of an (E, 1) score column within groups given by ``segments``.

    Used for neighbourhood attention: ``segments[e]`` is the target node of
    edge ``e``.
    """
    scores = _as_tensor(scores)
    seg = np.asarray(segments, dtype=np.int64)
    if scores.shape != (seg.size, 1):
        raise DimensionError("segment-softmax: scores must be (E, 1)")
    s = scores.data[:, 0]
    smax = np.full(n_segments, -np.inf)
    np.maximum.at(smax, seg, s)
    e = np.exp(s - smax[seg])
    denom = np.zeros(n_segments)
    np.add.at(denom, seg, e)
    p = e / denom[seg]

    def rule(g):
        g = g[:, 0]
        dot = np.zeros(n_segments)
        np.add.at(dot, seg, g * p)
        return ((p * (g - dot[seg]))[:, None],)

    return _record("segment-softmax", p[:, None], (scores,), rule)


def l2_normalize_rows(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError("l2-row-normalize: expects a matrix")
    norms = np.linalg.norm(a.data, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DomainError("l2-row-normalize: zero-norm row")
    u = a.data / norms

    def rule(g):
        return ((g - u * np.sum(g * u, axis=1, keepdims=True)) / norms,)

    return _record("l2-row-normalize", u, (a,), rule)


def custom(name: str, out: np.ndarray, inputs: Sequence, rule) -> Tensor:
    """Record an operation with a hand-written backward rule.

    ``rule(grad_out)`` must return one gradient (or None) per input.
    """
    return _record(name, np.asarray(out, dtype=np.float64), tuple(map(_as_tensor, inputs)), rule)


_OPS = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "elementwise-mul": mul,
    "exp": exp,
    "log": log,
    "negate": neg,
    "scalar-scale": scale,
    "row-softmax": row_softmax,
    "leaky-relu": leaky_relu,
    "prelu": prelu,
    "sparse-dense-matmul": spmm,
    "concat-columns": concat_cols,
    "row-gather": gather_rows,
    "reduce-sum": reduce_sum,
    "reduce-mean": reduce_mean,
    "l2-row-normalize": l2_normalize_rows,
    "clamp": clamp,
    "logsumexp-rows": logsumexp_rows,
    "segment-softmax": segment_softmax,
    "edge-spmm": edge_spmm,
}


def forward(op_kind: str, *inputs, **params) -> Tensor:
    """Dispatch by operation name, e.g. ``forward("leaky-relu", x, slope=0.2)``."""
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op kind {op_kind!r}") from None
    return fn(*inputs, **params)


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``loss`` w.r.t. every node on ``tape``."""
    if loss.tape is not tape:
        raise ValueError("loss is not recorded on this tape")
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.node: np.ones(loss.shape)}
    for rec in reversed(tape.records):
        g = grads.get(rec.output)
        if g is None:
            continue
        for node, gi in zip(rec.inputs, rec.backward(g)):
            if node is None or gi is None:
                continue
            gi = np.asarray(gi, dtype=np.float64).reshape(tape._shapes[node])
            prev = grads.get(node)
            grads[node] = gi if prev is None else prev + gi
    for node, shape in tape._shapes.items():
        if node not in grads:
            grads[node] = np.zeros(shape)
    return grads
