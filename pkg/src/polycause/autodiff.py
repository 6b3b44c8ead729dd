"""Dense reverse-mode automatic differentiation over float64 numpy arrays.

A `Tape` records every operation whose inputs touch it; `Tape.backward`
replays the records once in reverse and returns a `GradientMap`.  Tensors
are rank 0..2, always float64, and every public operation checks its
output for NaN/Inf so a diverging model fails loudly at the op that
produced the bad value.

The op set is intentionally small: what a conditional-prior VAE with
polynomial structural equations needs, nothing more.
"""

from __future__ import annotations

import numpy as np
from scipy import special as _sp

from .errors import NonFiniteError, ShapeError, TapeError

__all__ = [
    "Tape",
    "Tensor",
    "GradientMap",
    "add", "sub", "mul", "div", "neg", "absolute", "matmul",
    "tsum", "tmean", "texp", "tlog", "tsqrt", "square", "power",
    "softplus", "sigmoid", "leaky_relu", "tanh",
    "lgamma", "digamma",
    "concat", "take_cols", "take_rows", "gather_rows", "broadcast_to",
    "custom_elementwise",
    "AdamState", "adam_init", "adam_step",
]

_SOFTPLUS_CUTOFF = 30.0


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim > 2:
        raise ShapeError(f"tensors are rank 0..2, got rank {arr.ndim}")
    return arr


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value produced by op '{op}'")


class Tensor:
    """A float64 array plus an optional link to the tape that made it."""

    __slots__ = ("data", "tape", "node_id", "requires_grad")

    def __init__(self, data, tape=None, requires_grad=False, _node_id=None):
        self.data = _as_array(data)
        self.tape = tape
        self.requires_grad = requires_grad
        if tape is not None and _node_id is None:
            _node_id = tape._new_id()
        self.node_id = _node_id

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, tape={self.tape is not None})"

    # operator sugar; scalars and ndarrays are wrapped as constants
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class GradientMap:
    """Gradients keyed by tensor; zeros for tape tensors the loss never saw."""

    def __init__(self, grads: dict):
        self._grads = grads

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        if tensor.node_id is None:
            raise TapeError("tensor is not attached to a tape")
        g = self._grads.get(tensor.node_id)
        if g is None:
            return np.zeros_like(tensor.data)
        return g

    def get(self, tensor: Tensor):
        return self[tensor]


class Tape:
    """Ordered operation record.  One backward pass per tape."""

    def __init__(self):
        self._records = []          # (out_id, ((in_id, pull_fn), ...))
        self._next_id = 0
        self._consumed = False

    def _new_id(self) -> int:
        i = self._next_id
        self._next_id += 1
        return i

    def leaf(self, data, requires_grad: bool = True) -> Tensor:
        return Tensor(data, tape=self, requires_grad=requires_grad)

    def _record(self, out: Tensor, parents) -> None:
        entries = tuple(
            (p.node_id, fn) for p, fn in parents
            if p.tape is self and p.node_id is not None
        )
        if entries:
            self._records.append((out.node_id, entries))

    def backward(self, loss: Tensor) -> GradientMap:
        if self._consumed:
            raise TapeError("tape already consumed by a previous backward pass")
        if loss.tape is not self:
            raise TapeError("loss tensor does not belong to this tape")
        if loss.data.size != 1:
            raise ShapeError("backward needs a scalar loss, got shape "
                             f"{loss.data.shape}")
        self._consumed = True
        grads: dict = {loss.node_id: np.ones_like(loss.data)}
        for out_id, entries in reversed(self._records):
            gout = grads.get(out_id)
            if gout is None:
                continue
            for in_id, pull in entries:
                contrib = pull(gout)
                acc = grads.get(in_id)
                if acc is None:
                    # copy if the pull handed back the upstream gradient
                    # itself (identity pulls) or a view; accumulation below
                    # mutates in place
                    if contrib is gout or contrib.base is not None:
                        contrib = contrib.copy()
                    grads[in_id] = contrib
                else:
                    acc += contrib
        return GradientMap(grads)


def _wrap(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _tape_of(*tensors) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise TapeError("operands belong to different tapes")
    return tape


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    # sum leading axes added by broadcasting
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _make(out_data, tape, parents, op: str) -> Tensor:
    _check_finite(out_data, op)
    out = Tensor(out_data, tape=tape)
    if tape is not None:
        tape._record(out, parents)
    return out


# ---------------------------------------------------------------------------
# arithmetic

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    tape = _tape_of(a, b)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeError(str(e)) from None
    if out.ndim > 2:
        raise ShapeError("broadcast result exceeds rank 2")
    return _make(out, tape, (
        (a, lambda g, sa=a.data.shape: _unbroadcast(g, sa)),
        (b, lambda g, sb=b.data.shape: _unbroadcast(g, sb)),
    ), "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    tape = _tape_of(a, b)
    try:
        out = a.data - b.data
    except ValueError as e:
        raise ShapeError(str(e)) from None
    if out.ndim > 2:
        raise ShapeError("broadcast result exceeds rank 2")
    return _make(out, tape, (
        (a, lambda g, sa=a.data.shape: _unbroadcast(g, sa)),
        (b, lambda g, sb=b.data.shape: _unbroadcast(-g, sb)),
    ), "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    tape = _tape_of(a, b)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeError(str(e)) from None
    if out.ndim > 2:
        raise ShapeError("broadcast result exceeds rank 2")
    da, db = a.data, b.data
    return _make(out, tape, (
        (a, lambda g: _unbroadcast(g * db, da.shape)),
        (b, lambda g: _unbroadcast(g * da, db.shape)),
    ), "mul")


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    tape = _tape_of(a, b)
    try:
        out = a.data / b.data
    except ValueError as e:
        raise ShapeError(str(e)) from None
    if out.ndim > 2:
        raise ShapeError("broadcast result exceeds rank 2")
    da, db = a.data, b.data
    return _make(out, tape, (
        (a, lambda g: _unbroadcast(g / db, da.shape)),
        (b, lambda g: _unbroadcast(-g * da / (db * db), db.shape)),
    ), "div")


def neg(a) -> Tensor:
    a = _wrap(a)
    return _make(-a.data, a.tape, ((a, lambda g: -g),), "neg")


def absolute(a) -> Tensor:
    """|a|; subgradient 0 at exactly 0."""
    a = _wrap(a)
    s = np.sign(a.data)
    return _make(np.abs(a.data), a.tape, ((a, lambda g: g * s),), "abs")


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects two rank-2 tensors")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    tape = _tape_of(a, b)
    da, db = a.data, b.data
    return _make(da @ db, tape, (
        (a, lambda g: g @ db.T),
        (b, lambda g: da.T @ g),
    ), "matmul")


# ---------------------------------------------------------------------------
# reductions

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def pull(g):
        if axis is None:
            return np.broadcast_to(g, shape).astype(np.float64, copy=True)
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, shape).astype(np.float64, copy=True)

    return _make(out, a.tape, ((a, pull),), "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.data.shape
    count = a.data.size if axis is None else shape[axis]

    def pull(g):
        if axis is None:
            return np.broadcast_to(g, shape).astype(np.float64, copy=True) / count
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, shape).astype(np.float64, copy=True) / count

    return _make(out, a.tape, ((a, pull),), "mean")


# ---------------------------------------------------------------------------
# elementwise nonlinearities

def texp(a) -> Tensor:
    a = _wrap(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, a.tape, ((a, lambda g: g * out),), "exp")


def tlog(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.data <= 0.0):
        raise NonFiniteError("log of a non-positive value")
    d = a.data
    return _make(np.log(d), a.tape, ((a, lambda g: g / d),), "log")


def tsqrt(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.data < 0.0):
        raise NonFiniteError("sqrt of a negative value")
    out = np.sqrt(a.data)
    return _make(out, a.tape, ((a, lambda g: g * 0.5 / out),), "sqrt")


def square(a) -> Tensor:
    a = _wrap(a)
    d = a.data
    return _make(d * d, a.tape, ((a, lambda g: g * 2.0 * d),), "square")


def power(a, exponent: float) -> Tensor:
    """a**p for a fixed float exponent (a must be positive unless p is a
    non-negative integer)."""
    a = _wrap(a)
    p = float(exponent)
    if p == 0.0:
        return _make(np.ones_like(a.data), a.tape,
                     ((a, lambda g: np.zeros_like(g)),), "power")
    if p != int(p) or p < 0:
        if np.any(a.data <= 0.0):
            raise NonFiniteError("fractional/negative power of non-positive value")
    d = a.data
    out = d ** p
    return _make(out, a.tape, ((a, lambda g: g * p * d ** (p - 1.0)),), "power")


def softplus_np(x: np.ndarray) -> np.ndarray:
    """Stable softplus on raw arrays: linear tail beyond the cutoff."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > _SOFTPLUS_CUTOFF, x, np.log1p(np.exp(np.minimum(x, _SOFTPLUS_CUTOFF))))


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a) -> Tensor:
    a = _wrap(a)
    d = a.data
    out = softplus_np(d)
    sig = sigmoid_np(d)
    return _make(out, a.tape, ((a, lambda g: g * sig),), "softplus")


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    out = sigmoid_np(a.data)
    return _make(out, a.tape, ((a, lambda g: g * out * (1.0 - out)),), "sigmoid")


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = _wrap(a)
    d = a.data
    factor = np.where(d >= 0.0, 1.0, slope)
    return _make(d * factor, a.tape, ((a, lambda g: g * factor),), "leaky_relu")


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)
    return _make(out, a.tape, ((a, lambda g: g * (1.0 - out * out)),), "tanh")


def lgamma(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.data <= 0.0):
        raise NonFiniteError("lgamma restricted to positive arguments here")
    d = a.data
    return _make(_sp.gammaln(d), a.tape,
                 ((a, lambda g: g * _sp.digamma(d)),), "lgamma")


def digamma(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.data <= 0.0):
        raise NonFiniteError("digamma restricted to positive arguments here")
    d = a.data
    return _make(_sp.digamma(d), a.tape,
                 ((a, lambda g: g * _sp.polygamma(1, d)),), "digamma")


# ---------------------------------------------------------------------------
# structure ops

def concat(parts, axis: int = 1) -> Tensor:
    parts = [_wrap(p) for p in parts]
    tape = _tape_of(*parts)
    datas = [p.data for p in parts]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)
    parents = []
    for i, p in enumerate(parts):
        lo, hi = offsets[i], offsets[i + 1]

        def pull(g, lo=lo, hi=hi):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            return g[tuple(idx)].copy()

        parents.append((p, pull))
    return _make(out, tape, tuple(parents), "concat")


def take_cols(a, lo: int, hi: int) -> Tensor:
    """Columns [lo, hi) of a rank-2 tensor (a copy, never a view)."""
    a = _wrap(a)
    if a.ndim != 2:
        raise ShapeError("take_cols expects a rank-2 tensor")
    d = a.data
    out = d[:, lo:hi].copy()

    def pull(g):
        full = np.zeros_like(d)
        full[:, lo:hi] = g
        return full

    return _make(out, a.tape, ((a, pull),), "take_cols")


def take_rows(a, lo: int, hi: int) -> Tensor:
    a = _wrap(a)
    if a.ndim != 2:
        raise ShapeError("take_rows expects a rank-2 tensor")
    d = a.data
    out = d[lo:hi, :].copy()

    def pull(g):
        full = np.zeros_like(d)
        full[lo:hi, :] = g
        return full

    return _make(out, a.tape, ((a, pull),), "take_rows")


def gather_rows(a, index) -> Tensor:
    """Rows of `a` selected by an integer index array (with repetition)."""
    a = _wrap(a)
    if a.ndim != 2:
        raise ShapeError("gather_rows expects a rank-2 tensor")
    idx = np.asarray(index, dtype=np.intp)
    d = a.data
    out = d[idx, :]

    def pull(g):
        full = np.zeros_like(d)
        np.add.at(full, idx, g)
        return full

    return _make(out, a.tape, ((a, pull),), "gather_rows")


def broadcast_to(a, shape) -> Tensor:
    a = _wrap(a)
    try:
        out = np.broadcast_to(a.data, shape).astype(np.float64, copy=True)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    src = a.data.shape
    return _make(out, a.tape, ((a, lambda g: _unbroadcast(g, src)),), "broadcast")


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    try:
        out = a.data.reshape(shape).copy()
    except ValueError as e:
        raise ShapeError(str(e)) from None
    src = a.data.shape
    return _make(out, a.tape, ((a, lambda g: g.reshape(src)),), "reshape")


def custom_elementwise(value: np.ndarray, parents) -> Tensor:
    """Insert externally computed values with known local elementwise grads.

    `parents` is a sequence of (tensor, local_grad) pairs where local_grad
    has the value's shape; backward contributes g * local_grad (unbroadcast
    onto the parent).  This is how reparameterized samples enter the tape.
    """
    parents = [( _wrap(t), np.asarray(lg, dtype=np.float64)) for t, lg in parents]
    tape = _tape_of(*[t for t, _ in parents])
    recs = []
    for t, lg in parents:
        recs.append((t, lambda g, lg=lg, s=t.data.shape: _unbroadcast(g * lg, s)))
    return _make(np.asarray(value, dtype=np.float64), tape, tuple(recs),
                 "custom_elementwise")


# ---------------------------------------------------------------------------
# optimizer

class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    __slots__ = ("step", "m", "v")

    def __init__(self, params: dict):
        self.step = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}


def adam_init(params: dict) -> AdamState:
    return AdamState(params)


def adam_step(params: dict, grads: dict, state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> dict:
    """One Adam update with bias correction, in place on `params`."""
    if set(grads) - set(params):
        raise KeyError(f"gradients for unknown parameters: {set(grads) - set(params)}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k, g in grads.items():
        _check_finite(g, f"adam_step[{k}]")
        m = state.m[k]
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params
