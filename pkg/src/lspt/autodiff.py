"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every forward pass records into an explicit :class:`Graph`::

    with Graph() as g:
        y = cross_entropy(matmul(x, w), labels)
    g.backward(y)
    dw = g.grad(w)

Leaves are tensors created with ``requires_grad=True``; tensors without the
flag are constants and never receive gradients. Outside a ``with Graph()``
block operations evaluate eagerly without recording, which is what the
finite-difference checker and evaluation loops rely on.

Arrays may carry leading batch axes. Broadcasting is limited to scalars and
to repeats along axes before the feature (last) axis, e.g. a ``(D,)`` bias
over ``(B, T, D)`` or a ``(B, 1, D)`` row over ``(B, T, D)``; the feature axis
itself must always match.

A graph may be backpropagated exactly once; a second call raises
:class:`GraphError` instead of silently double counting.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import (
    ContractError,
    DimensionError,
    EmptyInputError,
    GraphError,
    LabelError,
    NumericError,
)

__all__ = [
    "Tensor",
    "Graph",
    "GradCheckReport",
    "matmul",
    "transpose",
    "reshape",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "sigmoid",
    "tanh",
    "gelu",
    "elementwise",
    "softmax_rows",
    "layernorm",
    "mean_over_rows",
    "concat_tokens",
    "split_tokens",
    "tensor_sum",
    "cross_entropy",
    "linear",
    "backward",
    "grad_check",
    "active_graph",
]

LN_EPS = 1e-5
# tanh-approximation constants for gelu
GELU_C = 0.7978845608
GELU_A = 0.044715

_ACTIVE: contextvars.ContextVar["Graph | None"] = contextvars.ContextVar(
    "lspt_active_graph", default=None
)


def active_graph() -> "Graph | None":
    return _ACTIVE.get()


class Tensor:
    """A float64 array that may take part in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "node_id", "graph")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node_id: int | None = None
        self.graph: Graph | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op: str, inputs: tuple, backward):
        self.op = op
        self.inputs = inputs
        self.backward = backward


class Graph:
    """Append-only tape of operation records.

    Node ids are positions in :attr:`nodes`, so append order is a valid
    topological order. After :meth:`backward`, :attr:`gradients` maps each
    leaf node id to its gradient array.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.gradients: dict[int, np.ndarray] = {}
        self._leaf_ids: dict[int, int] = {}
        self._leaves: list[Tensor] = []
        self._token = None
        self._done = False

    def __enter__(self) -> "Graph":
        if self._token is not None:
            raise GraphError("graph is already active")
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.reset(self._token)
        self._token = None

    @property
    def consumed(self) -> bool:
        return self._done

    def _leaf_id(self, t: Tensor) -> int:
        key = id(t)
        nid = self._leaf_ids.get(key)
        if nid is None:
            nid = len(self.nodes)
            self.nodes.append(_Node("leaf", (), None))
            self._leaf_ids[key] = nid
            # keeps id(t) from being recycled while the graph lives
            self._leaves.append(t)
        return nid

    def _input_id(self, t: Tensor) -> int | None:
        if t.graph is self:
            return t.node_id
        if t.graph is not None:
            raise GraphError("tensor belongs to a different graph")
        if t.requires_grad:
            return self._leaf_id(t)
        return None

    def backward(self, loss: Tensor, wrt: Sequence[Tensor] | None = None):
        """Propagate d(loss) back through the tape.

        Returns the gradients of ``wrt`` (zeros for leaves the loss does
        not reach) when given, else ``None``.
        """
        if self._done:
            raise GraphError("backward already ran on this graph; run a fresh forward")
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.graph is not self:
            raise ContractError("loss was not recorded in this graph")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for nid in range(len(self.nodes) - 1, -1, -1):
            node = self.nodes[nid]
            if node.backward is None:
                continue
            g = grads.pop(nid, None)
            if g is None:
                continue
            needs = tuple(i is not None for i in node.inputs)
            in_grads = node.backward(g, needs)
            for i, gi in zip(node.inputs, in_grads):
                if i is None or gi is None:
                    continue
                prev = grads.get(i)
                grads[i] = gi if prev is None else prev + gi
        self.gradients = grads
        self._done = True
        if wrt is not None:
            return [self.grad(t) for t in wrt]
        return None

    def grad(self, t: Tensor) -> np.ndarray:
        if not self._done:
            raise GraphError("backward has not run on this graph")
        nid = self._leaf_ids.get(id(t))
        if nid is None or nid not in self.gradients:
            return np.zeros_like(t.data)
        g = self.gradients[nid]
        if g.shape != t.shape:
            g = np.broadcast_to(g, t.shape).copy()
        return g


def backward(graph: Graph, loss: Tensor, wrt: Sequence[Tensor] | None = None):
    return graph.backward(loss, wrt)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, inputs: Sequence[Tensor], out: np.ndarray, bwd) -> Tensor:
    result = Tensor(out)
    g = _ACTIVE.get()
    if g is None:
        return result
    ids = tuple(g._input_id(t) for t in inputs)
    if all(i is None for i in ids):
        return result
    if g._done:
        raise GraphError("cannot record into a graph that already ran backward")
    result.node_id = len(g.nodes)
    result.graph = g
    g.nodes.append(_Node(op, ids, bwd))
    return result


# --- broadcasting ---------------------------------------------------------


def _check_broadcast(sa: tuple, sb: tuple, op: str) -> tuple:
    if sa == sb:
        return sa
    if len(sa) == 0 or len(sb) == 0:
        return sa or sb
    if sa[-1] != sb[-1]:
        raise DimensionError(f"{op}: incompatible shapes {sa} and {sb}")
    try:
        return np.broadcast_shapes(sa, sb)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {sa} and {sb}") from None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, (n, m) in enumerate(zip(shape, g.shape)) if n == 1 and m != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --- linear algebra -------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes.

    ``b`` is either a 2-D matrix shared across ``a``'s leading axes or has
    exactly ``a``'s leading axes.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    if a.ndim < 2 or b.ndim < 2 or sa[-1] != sb[-2]:
        raise DimensionError(f"matmul: cannot multiply {sa} by {sb}")
    if b.ndim > 2 and sb[:-2] != sa[:-2]:
        raise DimensionError(f"matmul: batch axes differ between {sa} and {sb}")
    A, B = a.data, b.data
    out = np.matmul(A, B)

    def bwd(g, needs):
        da = db = None
        if needs[0]:
            da = np.matmul(g, np.swapaxes(B, -1, -2))
        if needs[1]:
            if B.ndim == 2 and A.ndim > 2:
                k, n = sa[-1], sb[-1]
                db = A.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                db = np.matmul(np.swapaxes(A, -1, -2), g)
        return da, db

    return _record("matmul", (a, b), out, bwd)


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(
        "transpose", (x,), np.transpose(x.data, axes), lambda g, n: (np.transpose(g, inv),)
    )


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _record("reshape", (x,), out, lambda g, n: (g.reshape(src),))


def linear(x, w, b=None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# --- elementwise ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _record(
        "add",
        (a, b),
        a.data + b.data,
        lambda g, n: (
            _unbroadcast(g, sa) if n[0] else None,
            _unbroadcast(g, sb) if n[1] else None,
        ),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _record(
        "sub",
        (a, b),
        a.data - b.data,
        lambda g, n: (
            _unbroadcast(g, sa) if n[0] else None,
            _unbroadcast(-g, sb) if n[1] else None,
        ),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape, "mul")
    A, B = a.data, b.data
    return _record(
        "mul",
        (a, b),
        A * B,
        lambda g, n: (
            _unbroadcast(g * B, A.shape) if n[0] else None,
            _unbroadcast(g * A, B.shape) if n[1] else None,
        ),
    )


def neg(x) -> Tensor:
    x = _as_tensor(x)
    return _record("neg", (x,), -x.data, lambda g, n: (-g,))


def scale(x, c: float) -> Tensor:
    """Multiply by a plain Python constant."""
    x = _as_tensor(x)
    c = float(c)
    return _record("scale", (x,), x.data * c, lambda g, n: (g * c,))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _record("sigmoid", (x,), y, lambda g, n: (g * y * (1.0 - y),))


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)
    return _record("tanh", (x,), y, lambda g, n: (g * (1.0 - y * y),))


def gelu(x) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(0.7978845608 (x + 0.044715 x^3)))."""
    x = _as_tensor(x)
    X = x.data
    t = np.tanh(GELU_C * (X + GELU_A * X * X * X))
    y = 0.5 * X * (1.0 + t)

    def bwd(g, n):
        dt = GELU_C * (1.0 + 3.0 * GELU_A * X * X)
        return (g * (0.5 * (1.0 + t) + 0.5 * X * (1.0 - t * t) * dt),)

    return _record("gelu", (x,), y, bwd)


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "gelu": gelu, "neg": neg}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, *args) -> Tensor:
    if kind in _UNARY:
        (x,) = args
        return _UNARY[kind](x)
    if kind in _BINARY:
        a, b = args
        return _BINARY[kind](a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# --- reductions and normalisation ----------------------------------------


def softmax_rows(x) -> Tensor:
    """Softmax along the last axis, with the row max subtracted first."""
    x = _as_tensor(x)
    X = x.data
    if np.isnan(X).any():
        raise NumericError("softmax_rows: NaN in input")
    z = X - X.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g, n):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record("softmax", (x,), y, bwd)


def layernorm(x, gamma, beta, eps: float = LN_EPS) -> Tensor:
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    D = x.shape[-1] if x.ndim else 0
    if D < 1 or gamma.shape != (D,) or beta.shape != (D,):
        raise DimensionError(
            f"layernorm: input {x.shape} needs gamma/beta of shape ({D},), "
            f"got {gamma.shape} and {beta.shape}"
        )
    X, G = x.data, gamma.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * G + beta.data

    def bwd(g, n):
        dx = dg = db = None
        if n[0]:
            gx = g * G
            dx = inv * (
                gx
                - gx.mean(axis=-1, keepdims=True)
                - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            )
        if n[1]:
            dg = (g * xhat).reshape(-1, D).sum(axis=0)
        if n[2]:
            db = g.reshape(-1, D).sum(axis=0)
        return dx, dg, db

    return _record("layernorm", (x, gamma, beta), out, bwd)


def _row_sum(X: np.ndarray) -> np.ndarray:
    # strict left-to-right accumulation over the row axis
    acc = X[..., 0, :].copy()
    for i in range(1, X.shape[-2]):
        acc += X[..., i, :]
    return acc


def mean_over_rows(x) -> Tensor:
    """Mean over the row axis (-2); output keeps that axis with size 1."""
    x = _as_tensor(x)
    if x.ndim < 2:
        raise DimensionError(f"mean_over_rows: need at least 2 axes, got {x.shape}")
    N = x.shape[-2]
    if N == 0:
        raise EmptyInputError("mean_over_rows: no rows to average")
    out = (_row_sum(x.data) / N)[..., None, :]
    shape = x.shape
    return _record(
        "mean_rows", (x,), out, lambda g, n: (np.broadcast_to(g / N, shape).copy(),)
    )


def tensor_sum(x) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    return _record(
        "sum", (x,), np.asarray(x.data.sum()), lambda g, n: (np.full(shape, float(g)),)
    )


# --- token bundles --------------------------------------------------------


def concat_tokens(parts: Sequence) -> Tensor:
    """Concatenate along the token (row, -2) axis."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat_tokens: nothing to concatenate")
    ref = parts[0].shape
    for p in parts:
        if p.ndim != len(ref) or p.ndim < 2 or p.shape[:-2] != ref[:-2] or p.shape[-1] != ref[-1]:
            raise DimensionError(
                f"concat_tokens: shapes {[q.shape for q in parts]} disagree outside the token axis"
            )
    lengths = [p.shape[-2] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=-2)
    bounds = np.cumsum([0] + lengths)

    def bwd(g, needs):
        return tuple(
            g[..., bounds[i] : bounds[i + 1], :] if needs[i] else None
            for i in range(len(parts))
        )

    return _record("concat", tuple(parts), out, bwd)


def _slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def bwd(g, n):
        full = np.zeros(shape)
        full[..., start:stop, :] = g
        return (full,)

    return _record("slice", (x,), x.data[..., start:stop, :].copy(), bwd)


def split_tokens(x, lengths: Sequence[int]) -> list[Tensor]:
    """Inverse of :func:`concat_tokens` given the segment lengths."""
    x = _as_tensor(x)
    lengths = [int(n) for n in lengths]
    if x.ndim < 2 or any(n < 0 for n in lengths) or sum(lengths) != x.shape[-2]:
        raise DimensionError(
            f"split_tokens: segment lengths {lengths} do not partition shape {x.shape}"
        )
    out, start = [], 0
    for n in lengths:
        out.append(_slice_rows(x, start, start + n))
        start += n
    return out


# --- loss -----------------------------------------------------------------


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    logits = _as_tensor(logits)
    Z = logits.data
    if Z.ndim == 1:
        Z = Z[None, :]
    if Z.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be (B, K), got {logits.shape}")
    B, K = Z.shape
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != B:
        raise DimensionError(f"cross_entropy: {y.shape[0]} labels for {B} rows")
    if ((y < 0) | (y >= K)).any():
        raise LabelError(f"cross_entropy: labels must lie in [0, {K})")
    z = Z - Z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(B)
    loss = -logp[rows, y].mean()
    shape = logits.shape

    def bwd(g, n):
        p = np.exp(logp)
        p[rows, y] -= 1.0
        return ((g * p / B).reshape(shape),)

    return _record("cross_entropy", (logits,), np.asarray(loss), bwd)


# --- finite-difference verification --------------------------------------


@dataclass
class GradCheckReport:
    max_abs_err: float
    max_rel_err: float
    worst: tuple[int, tuple[int, ...]] | None
    n_coords: int
    tol: float
    passed: bool
    analytic: list[np.ndarray]
    numeric: list[np.ndarray]

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return (
            f"grad_check {status}: coords={self.n_coords} "
            f"max_abs={self.max_abs_err:.3e} max_rel={self.max_rel_err:.3e} tol={self.tol:g}"
        )


def grad_check(
    f: Callable[..., Tensor],
    x,
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f`` against central differences.

    ``x`` is a tensor, array or sequence of them; ``f`` is called with one
    positional argument per entry. Per coordinate the relative error is
    ``|a - n| / max(|a|, |n|, floor)``. Mismatches are reported, never raised.

    The floor keeps round-off from dominating coordinates whose true gradient
    is near zero: with an O(1) loss and ``h = 1e-5`` a central difference
    carries about ``eps * |f| / h ~ 1e-11`` of noise, so a floor of ``1e-6``
    bounds that noise's share of the relative error to about ``1e-5``.
    """
    single = isinstance(x, (Tensor, np.ndarray)) or np.isscalar(x)
    xs = [x] if single else list(x)
    leaves = [
        Tensor(np.array(_as_tensor(v).data, dtype=np.float64, copy=True), requires_grad=True)
        for v in xs
    ]
    with Graph() as g:
        y = f(*leaves)
    analytic = g.backward(y, leaves)

    numeric = []
    for leaf in leaves:
        num = np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(*leaves).data)
            flat[i] = orig - h
            fm = float(f(*leaves).data)
            flat[i] = orig
            num.reshape(-1)[i] = (fp - fm) / (2.0 * h)
        numeric.append(num)

    max_abs = max_rel = 0.0
    worst = None
    n = 0
    for k, (a, m) in enumerate(zip(analytic, numeric)):
        if a.size == 0:
            continue
        n += a.size
        err = np.abs(a - m)
        rel = err / np.maximum(np.maximum(np.abs(a), np.abs(m)), floor)
        i = int(np.argmax(rel))
        if rel.reshape(-1)[i] > max_rel or worst is None:
            max_rel = float(rel.reshape(-1)[i])
            worst = (k, tuple(int(v) for v in np.unravel_index(i, a.shape)))
        max_abs = max(max_abs, float(err.max()))
    ok = bool(np.isfinite(max_rel) and max_rel <= tol)
    return GradCheckReport(max_abs, max_rel, worst, n, tol, ok, analytic, numeric)
