"""Reverse-mode automatic differentiation over dense numpy arrays.

A Tape records one node per gradient-relevant operation, in forward order.
backward() walks the node list in strict reverse order exactly once,
accumulates adjoints, and then clears the tape.

Only the ops the renderer needs are provided. Elementwise binary ops accept
full numpy broadcasting (adjoints are un-broadcast by summation); matmul is
strictly 2D. Training runs the same code in float32 that the gradient checks
run in float64.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor", "Tape", "Grads", "ShapeMismatch", "NumericsError",
    "set_nan_mode", "nan_mode", "make_op",
    "add", "sub", "mul", "div", "matmul", "power",
    "maximum_const", "minimum_const", "relu", "abs_", "exp", "log",
    "sigmoid", "softplus", "sum_", "mean_", "cumprod", "concat",
    "reshape", "gather", "scatter_add", "normalize", "dot",
    "sigmoid_np", "softplus_np",
]


class ShapeMismatch(ValueError):
    """Operand shapes cannot be combined for the requested op."""


class NumericsError(ArithmeticError):
    """NaN encountered where forbidden (strict mode, or in a loss)."""


# "propagate": NaNs flow through forward values (training default).
# "raise": any op producing a NaN aborts immediately (test / gradcheck mode).
_NAN_MODE = "propagate"


def set_nan_mode(mode: str) -> None:
    global _NAN_MODE
    if mode not in ("propagate", "raise"):
        raise ValueError(f"unknown nan mode {mode!r}")
    _NAN_MODE = mode


def nan_mode() -> str:
    return _NAN_MODE


class Tensor:
    """A dense array value, optionally tracked on a Tape.

    Leaves are created through Tape.leaf / Tape.param; everything else comes
    out of the ops below. Tensors are immutable once created.
    """

    __slots__ = ("data", "tape", "tid", "requires_grad")

    def __init__(self, data, tape=None, tid=-1, requires_grad=False):
        self.data = data
        self.tape = tape
        self.tid = tid
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean_(self, axis=axis, keepdims=keepdims)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _basic_slice(self, key)

    def __repr__(self):
        grad = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.dtype}{grad})"


class _Node:
    """One recorded op: output id plus per-input vector-Jacobian products."""

    __slots__ = ("kind", "out_tid", "vjps")

    def __init__(self, kind, out_tid, vjps):
        self.kind = kind
        self.out_tid = out_tid
        self.vjps = vjps  # list of (input tid, fn(grad_out) -> grad array)


class Grads:
    """Adjoints of one backward pass, keyed by Parameter or leaf Tensor id."""

    def __init__(self, by_param, by_tid):
        self.by_param = by_param
        self.by_tid = by_tid

    def get(self, param):
        g = self.by_param.get(param)
        if g is None:
            return np.zeros_like(param.data)
        return g

    def __contains__(self, param):
        return param in self.by_param


class Tape:
    """Append-only record of one forward pass.

    Node order equals forward (append) order; backward consumes the tape.
    A tape is never shared across worker shards: each shard records and
    differentiates its own.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._next_tid = 0
        self._leaves = {}       # tid -> Parameter or None
        self._param_leaf = {}   # id(Parameter) -> Tensor (one leaf per param)
        self._consumed = False

    def _new_tid(self) -> int:
        tid = self._next_tid
        self._next_tid += 1
        return tid

    def leaf(self, data, requires_grad=True) -> Tensor:
        data = np.asarray(data)
        if not requires_grad:
            return Tensor(data)
        t = Tensor(data, self, self._new_tid(), True)
        self._leaves[t.tid] = None
        return t

    def param(self, p) -> Tensor:
        """Leaf view of a Parameter; repeated calls return the same leaf."""
        t = self._param_leaf.get(id(p))
        if t is None:
            t = Tensor(p.data, self, self._new_tid(), True)
            self._leaves[t.tid] = p
            self._param_leaf[id(p)] = t
        return t

    def backward(self, loss: Tensor, seed: float = 1.0) -> Grads:
        """Reverse sweep from a scalar loss; returns adjoints of all leaves.

        Leaves never reached by the sweep get zero adjoints. The tape is
        cleared afterwards and cannot be reused.
        """
        if self._consumed:
            raise RuntimeError("tape already consumed by a previous backward()")
        if not isinstance(loss, Tensor) or loss.size != 1:
            raise ShapeMismatch(
                f"backward() needs a scalar loss, got shape {getattr(loss, 'shape', None)}")
        if np.isnan(loss.data).any():
            raise NumericsError("loss is NaN")
        if loss.tape is not self:
            raise RuntimeError("loss was not produced on this tape")

        adj = {loss.tid: np.full_like(loss.data, seed)}
        for node in reversed(self.nodes):
            g = adj.pop(node.out_tid, None)
            if g is None:
                continue
            for tid, vjp in node.vjps:
                c = vjp(g)
                prev = adj.get(tid)
                adj[tid] = c if prev is None else prev + c

        by_param, by_tid = {}, {}
        for tid, p in self._leaves.items():
            g = adj.get(tid)
            by_tid[tid] = g
            if p is not None and g is not None:
                by_param[p] = g
        self.nodes.clear()
        self._consumed = True
        return Grads(by_param, by_tid)


# ---------------------------------------------------------------------------
# op plumbing

def _as_array(x, dtype):
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=dtype)


def _grad_inputs(tensors):
    live = [t for t in tensors if isinstance(t, Tensor) and t.requires_grad]
    if not live:
        return None
    tape = live[0].tape
    for t in live[1:]:
        if t.tape is not tape:
            raise RuntimeError("operands live on different tapes")
    return tape


def _t(x) -> Tensor:
    """Coerce raw arrays / scalars into constant Tensors."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x))


def make_op(kind, out_data, pairs):
    """Record a custom op.

    pairs: list of (tensor_or_other, vjp_fn); entries whose tensor does not
    require grad are dropped. Returns the output Tensor (constant when no
    input requires grad).
    """
    if _NAN_MODE == "raise" and np.isnan(out_data).any():
        raise NumericsError(f"NaN produced by op '{kind}'")
    tape = _grad_inputs([t for t, _ in pairs])
    if tape is None:
        return Tensor(out_data)
    vjps = [(t.tid, fn) for t, fn in pairs
            if isinstance(t, Tensor) and t.requires_grad]
    out = Tensor(out_data, tape, tape._new_tid(), True)
    tape.nodes.append(_Node(kind, out.tid, vjps))
    return out


def _unbroadcast(g, shape):
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binop_args(a, b, kind):
    dtype = getattr(a, "dtype", None)
    if dtype is None or dtype.kind != "f":
        dtype = getattr(b, "dtype", None)
    if dtype is None or dtype.kind != "f":
        dtype = np.dtype(np.float64)
    ad, bd = _as_array(a, dtype), _as_array(b, dtype)
    try:
        np.broadcast_shapes(ad.shape, bd.shape)
    except ValueError:
        raise ShapeMismatch(
            f"{kind}: shapes {ad.shape} and {bd.shape} do not broadcast") from None
    return ad, bd


# ---------------------------------------------------------------------------
# elementwise vjp rules (module-level so tests can stub them out)

def _sigmoid_vjp(y, g):
    return g * y * (1.0 - y)


def _softplus_vjp(x, g):
    return g * sigmoid_np(x)


def _exp_vjp(y, g):
    return g * y


def _log_vjp(x, g):
    return g / x


def _relu_vjp(x, g):
    return g * (x > 0)


def _abs_vjp(x, g):
    return g * np.sign(x)


# ---------------------------------------------------------------------------
# ops

def add(a, b):
    ad, bd = _binop_args(a, b, "add")
    return make_op("add", ad + bd, [
        (a, lambda g: _unbroadcast(g, ad.shape)),
        (b, lambda g: _unbroadcast(g, bd.shape)),
    ])


def sub(a, b):
    ad, bd = _binop_args(a, b, "sub")
    return make_op("sub", ad - bd, [
        (a, lambda g: _unbroadcast(g, ad.shape)),
        (b, lambda g: _unbroadcast(-g, bd.shape)),
    ])


def mul(a, b):
    ad, bd = _binop_args(a, b, "mul")
    return make_op("mul", ad * bd, [
        (a, lambda g: _unbroadcast(g * bd, ad.shape)),
        (b, lambda g: _unbroadcast(g * ad, bd.shape)),
    ])


def div(a, b):
    ad, bd = _binop_args(a, b, "div")
    return make_op("div", ad / bd, [
        (a, lambda g: _unbroadcast(g / bd, ad.shape)),
        (b, lambda g: _unbroadcast(-g * ad / (bd * bd), bd.shape)),
    ])


def matmul(a, b):
    ad = a.data if isinstance(a, Tensor) else np.asarray(a)
    bd = b.data if isinstance(b, Tensor) else np.asarray(b)
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ShapeMismatch(f"matmul: shapes {ad.shape} and {bd.shape}")
    return make_op("matmul", ad @ bd, [
        (a, lambda g: g @ bd.T),
        (b, lambda g: ad.T @ g),
    ])


def power(x, p):
    """x**p for a constant scalar exponent p."""
    x = _t(x)
    xd = x.data
    with np.errstate(invalid="ignore"):
        out = xd ** p
    return make_op("power", out, [
        (x, lambda g: g * p * xd ** (p - 1.0)),
    ])


def maximum_const(x, c):
    """max(x, c); subgradient 0 at the kink (grad passes only where x > c)."""
    x = _t(x)
    xd = x.data
    return make_op("max_const", np.maximum(xd, c), [
        (x, lambda g: g * (xd > c)),
    ])


def minimum_const(x, c):
    x = _t(x)
    xd = x.data
    return make_op("min_const", np.minimum(xd, c), [
        (x, lambda g: g * (xd < c)),
    ])


def relu(x):
    x = _t(x)
    xd = x.data
    return make_op("relu", np.maximum(xd, 0.0), [
        (x, lambda g: _relu_vjp(xd, g)),
    ])


def abs_(x):
    x = _t(x)
    xd = x.data
    return make_op("abs", np.abs(xd), [
        (x, lambda g: _abs_vjp(xd, g)),
    ])


def exp(x):
    x = _t(x)
    y = np.exp(x.data)
    return make_op("exp", y, [
        (x, lambda g: _exp_vjp(y, g)),
    ])


def log(x):
    x = _t(x)
    xd = x.data
    with np.errstate(invalid="ignore", divide="ignore"):
        y = np.log(xd)
    return make_op("log", y, [
        (x, lambda g: _log_vjp(xd, g)),
    ])


def sigmoid_np(x):
    """Numerically stable logistic on raw arrays."""
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def softplus_np(x):
    return np.logaddexp(np.zeros((), dtype=x.dtype), x)


def sigmoid(x):
    x = _t(x)
    y = sigmoid_np(x.data)
    return make_op("sigmoid", y, [
        (x, lambda g: _sigmoid_vjp(y, g)),
    ])


def softplus(x):
    x = _t(x)
    xd = x.data
    return make_op("softplus", softplus_np(xd), [
        (x, lambda g: _softplus_vjp(xd, g)),
    ])


def sum_(x, axis=None, keepdims=False):
    x = _t(x)
    xd = x.data
    out = xd.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, xd.shape).astype(xd.dtype, copy=True)
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, xd.shape).astype(xd.dtype, copy=True)

    return make_op("sum", out, [(x, vjp)])


def mean_(x, axis=None, keepdims=False):
    x = _t(x)
    xd = x.data
    out = xd.mean(axis=axis, keepdims=keepdims)
    n = xd.size if axis is None else np.prod(
        [xd.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])

    def vjp(g):
        if axis is None:
            gg = g
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, xd.shape) / n).astype(xd.dtype)

    return make_op("mean", out, [(x, vjp)])


def cumprod(x, axis):
    """Cumulative product along an axis.

    The backward rule divides by the inputs, so exact zeros in x are not
    supported (the render pipeline clamps opacities strictly below 1 to keep
    the transmittance factors positive).
    """
    x = _t(x)
    xd = x.data
    y = np.cumprod(xd, axis=axis)

    def vjp(g):
        gy = g * y
        rev = np.flip(np.cumsum(np.flip(gy, axis=axis), axis=axis), axis=axis)
        safe = np.where(xd == 0.0, np.finfo(xd.dtype).tiny, xd)
        return rev / safe

    return make_op("cumprod", y, [(x, vjp)])


def concat(tensors, axis=0):
    datas = [t.data if isinstance(t, Tensor) else np.asarray(t) for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    pairs = []
    for i, t in enumerate(tensors):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g, lo=lo, hi=hi):
            key = [slice(None)] * g.ndim
            key[axis] = slice(lo, hi)
            return g[tuple(key)]

        pairs.append((t, vjp))
    return make_op("concat", out, pairs)


def reshape(x, shape):
    x = _t(x)
    xd = x.data
    out = xd.reshape(shape)
    return make_op("reshape", out, [
        (x, lambda g: g.reshape(xd.shape)),
    ])


def _basic_slice(x, key):
    x = _t(x)
    xd = x.data
    out = xd[key]

    def vjp(g):
        full = np.zeros_like(xd)
        full[key] = g
        return full

    return make_op("slice", out, [(x, vjp)])


def gather(x, idx):
    """Rows of x selected by an integer index array (leading axis)."""
    x = _t(x)
    xd = x.data
    idx = np.asarray(idx)
    out = xd[idx]
    return make_op("gather", out, [
        (x, lambda g: _scatter_rows(g, idx, xd.shape, xd.dtype)),
    ])


def scatter_add(x, idx, size):
    """out[j] = sum over i with idx[i] == j of x[i]; dual of gather."""
    x = _t(x)
    xd = x.data
    idx = np.asarray(idx)
    out = _scatter_rows(xd, idx, (size,) + xd.shape[1:], xd.dtype)
    return make_op("scatter_add", out, [
        (x, lambda g: g[idx]),
    ])


def _scatter_rows(vals, idx, out_shape, dtype):
    """Row scatter-add. Sorted indices hit the fast reduceat path."""
    n = out_shape[0]
    out = np.zeros(out_shape, dtype=dtype)
    if vals.shape[0] == 0:
        return out
    if vals.ndim == 1:
        return np.bincount(idx, weights=vals, minlength=n).astype(dtype)
    if idx.size > 1 and np.all(idx[1:] >= idx[:-1]):
        starts = np.flatnonzero(np.concatenate(([True], idx[1:] != idx[:-1])))
        sums = np.add.reduceat(vals, starts, axis=0)
        out[idx[starts]] = sums
        return out
    flat = vals.reshape(vals.shape[0], -1)
    cols = [np.bincount(idx, weights=flat[:, c], minlength=n)
            for c in range(flat.shape[1])]
    return np.stack(cols, axis=1).reshape(out_shape).astype(dtype)


def normalize(x, axis=-1, eps=1e-12):
    """x scaled to unit length along `axis` (safe for near-zero vectors).

    Below eps the op degenerates to x/eps, which keeps the vjp finite;
    callers that need a fallback direction handle that on top.
    """
    x = _t(x)
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    safe = np.maximum(norm, eps)
    y = xd / safe

    def vjp(g):
        inner = (g * xd).sum(axis=axis, keepdims=True)
        main = g / safe - xd * inner / safe ** 3
        return np.where(norm > eps, main, g / eps)

    return make_op("normalize", y, [(x, vjp)])


def dot(a, b, axis=-1, keepdims=False):
    """Inner product along one axis (composition, not a primitive op)."""
    return sum_(mul(a, b), axis=axis, keepdims=keepdims)
