"""Define-by-run reverse-mode automatic differentiation on float64 numpy arrays.

Operations executed while a :class:`Tape` is active (``with Tape() as tape:``)
are recorded if any input requires a gradient.  :func:`backward` then walks
the tape in reverse and returns gradients keyed by tensor ``node_id``.

Broadcasting is deliberately absent: binary ops take two tensors of equal
shape or one tensor and a python scalar.  Explicit ``expand_rows`` and
``expand_cols`` cover bias addition and per-row centering.
"""
from __future__ import annotations

import contextvars
import itertools
from dataclasses import dataclass
from numbers import Real

import numpy as np

from . import _kernels as K
from .errors import ConfigError, ContractError, DimensionError, DomainError, NumericError

_ids = itertools.count(1)
_ACTIVE_TAPE = contextvars.ContextVar("bitransfer_active_tape", default=None)
# (mode, log) while grad_check is freezing stop_gradient outputs
_STOP_MODE = contextvars.ContextVar("bitransfer_stop_mode", default=None)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id")
    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node_id = next(_ids)

    @classmethod
    def _wrap(cls, arr):
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.node_id = next(_ids)
        return t

    @property
    def shape(self):
        return list(self.data.shape)

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and not isinstance(shape[0], int):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


@dataclass
class Node:
    op: str
    inputs: tuple
    out_id: int
    backward: object


class Tape:
    """Ordered record of operations; rebuilt for every forward pass."""

    def __init__(self):
        self.nodes = []
        self.leaves = {}
        self._produced = set()
        self._token = None

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def record(self, op, inputs, out, backward):
        for t in inputs:
            if t.requires_grad and t.node_id not in self._produced:
                self.leaves.setdefault(t.node_id, t)
        self.nodes.append(Node(op, inputs, out.node_id, backward))
        self._produced.add(out.node_id)

    def __contains__(self, t):
        return t.node_id in self._produced or t.node_id in self.leaves

    def __len__(self):
        return len(self.nodes)


def active_tape():
    return _ACTIVE_TAPE.get()


def _finite(arr, op):
    if not np.isfinite(arr).all():
        raise NumericError(f"{op}: forward produced non-finite values")
    return arr


def _emit(op, arr, inputs, backward):
    out = Tensor._wrap(_finite(arr, op))
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, inputs, out, backward)
    return out


def _is_scalar(x):
    return isinstance(x, Real) and not isinstance(x, bool)


def _operands(op, a, b):
    """Validate a binary operand pair; returns (A, B, tensors) with raw values.

    Allowed: equal-shape tensors, a tensor and a python scalar, or a tensor
    and a 0-d tensor.
    """
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        sa, sb = a.data.shape, b.data.shape
        if sa != sb and sa != () and sb != ():
            raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
        return a.data, b.data, (a, b)
    if isinstance(a, Tensor) and _is_scalar(b):
        return a.data, float(b), (a,)
    if _is_scalar(a) and isinstance(b, Tensor):
        return float(a), b.data, (b,)
    raise DimensionError(f"{op}: operands must be tensors of equal shape or tensor and scalar, "
                         f"got {type(a).__name__} and {type(b).__name__}")


def _fit(g, t):
    # gradient flowing into a 0-d operand that was combined with a larger one
    if t.data.shape == () and np.shape(g) != ():
        return np.asarray(g.sum())
    return g


def _route(a, b, ga, gb):
    """Map per-operand grads to the tensor inputs actually recorded."""
    out = []
    if isinstance(a, Tensor):
        out.append(_fit(ga(), a) if a.requires_grad else None)
    if isinstance(b, Tensor):
        out.append(_fit(gb(), b) if b.requires_grad else None)
    return tuple(out)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    A, B, ins = _operands("add", a, b)
    return _emit("add", A + B, ins, lambda g: _route(a, b, lambda: g, lambda: g))


def sub(a, b):
    A, B, ins = _operands("sub", a, b)
    return _emit("sub", A - B, ins, lambda g: _route(a, b, lambda: g, lambda: -g))


def mul(a, b):
    A, B, ins = _operands("mul", a, b)
    return _emit("mul", A * B, ins, lambda g: _route(a, b, lambda: g * B, lambda: g * A))


def div(a, b):
    A, B, ins = _operands("div", a, b)
    if np.any(np.asarray(B) == 0.0):
        raise DomainError("div: zero divisor")
    return _emit("div", A / B, ins,
                 lambda g: _route(a, b, lambda: g / B, lambda: -g * A / (B * B)))


def scale(a, c):
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a):
    x = a.data
    pos = x > 0.0
    return _emit("relu", np.where(pos, x, 0.0), (a,), lambda g: (g * pos,))


def exp(a):
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a):
    x = a.data
    if np.any(x <= 0.0):
        raise DomainError("log: argument must be strictly positive")
    return _emit("log", np.log(x), (a,), lambda g: (g / x,))


def sqrt(a):
    x = a.data
    if np.any(x <= 0.0):
        raise DomainError("sqrt: argument must be strictly positive")
    out = np.sqrt(x)
    return _emit("sqrt", out, (a,), lambda g: (0.5 * g / out,))


def sigmoid(a):
    x = a.data
    with np.errstate(over="ignore"):
        e = np.exp(-np.abs(x))
    out = np.where(x >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def clip(a, lo, hi):
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _emit("clip", np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


_UNARY = {"relu": relu, "exp": exp, "log": log, "sqrt": sqrt, "sigmoid": sigmoid}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op, a, b=None):
    """Single entry point over the named pointwise ops."""
    if op in _UNARY:
        return _UNARY[op](a)
    if op in _BINARY:
        return _BINARY[op](a, b)
    if op == "scale":
        return scale(a, b)
    raise ConfigError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# structural
# ---------------------------------------------------------------------------

def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    return _emit("matmul", A @ B, (a, b), lambda g: (
        g @ B.T if a.requires_grad else None,
        A.T @ g if b.requires_grad else None,
    ))


def tsum(a, axis=None):
    shape = a.data.shape
    if axis is None:
        return _emit("sum", np.asarray(a.data.sum()), (a,),
                     lambda g: (np.full(shape, float(g)),))
    axis = axis % len(shape)
    return _emit("sum", a.data.sum(axis=axis), (a,),
                 lambda g: (np.array(np.broadcast_to(np.expand_dims(g, axis), shape)),))


def mean(a, axis=None):
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(tsum(a, axis), 1.0 / n)


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {list(shape)}") from None
    src = a.data.shape
    return _emit("reshape", out, (a,), lambda g: (g.reshape(src),))


def transpose(a, axes):
    axes = tuple(int(i) for i in axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise DimensionError(f"transpose: {list(axes)} is not a permutation for {a.shape}")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _emit("transpose", out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def expand_rows(v, n):
    """Stack a length-F vector into an n x F matrix (explicit bias broadcast)."""
    if v.data.ndim != 1:
        raise DimensionError(f"expand_rows: expected a vector, got {v.shape}")
    out = np.array(np.broadcast_to(v.data, (int(n), v.data.shape[0])))
    return _emit("expand_rows", out, (v,), lambda g: (g.sum(axis=0),))


def expand_cols(v, m):
    """Repeat a length-N vector as the columns of an N x m matrix."""
    if v.data.ndim != 1:
        raise DimensionError(f"expand_cols: expected a vector, got {v.shape}")
    out = np.array(np.broadcast_to(v.data[:, None], (v.data.shape[0], int(m))))
    return _emit("expand_cols", out, (v,), lambda g: (g.sum(axis=1),))


def take(z, idx):
    """Select z[i, idx[i]] for every row."""
    idx = np.asarray(idx, dtype=np.int64)
    if z.data.ndim != 2 or idx.shape != (z.data.shape[0],):
        raise DimensionError(f"take: index of shape {list(idx.shape)} for tensor {z.shape}")
    rows = np.arange(idx.shape[0])
    shape = z.data.shape

    def back(g):
        out = np.zeros(shape)
        out[rows, idx] = g
        return (out,)

    return _emit("take", z.data[rows, idx], (z,), back)


def _check_temperature(temperature):
    if not temperature > 0.0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    return float(temperature)


def softmax(z, temperature=1.0):
    T = _check_temperature(temperature)
    if z.data.ndim != 2:
        raise DimensionError(f"softmax expects N x C, got {z.shape}")
    s = K.softmax_rows(np.ascontiguousarray(z.data / T))
    return _emit("softmax", s, (z,),
                 lambda g: (K.softmax_grad_rows(s, np.ascontiguousarray(g)) / T,))


def log_softmax(z, temperature=1.0):
    T = _check_temperature(temperature)
    if z.data.ndim != 2:
        raise DimensionError(f"log_softmax expects N x C, got {z.shape}")
    zt = np.ascontiguousarray(z.data / T)
    out = K.log_softmax_rows(zt)
    return _emit("log_softmax", out, (z,),
                 lambda g: (K.log_softmax_grad_rows(out, np.ascontiguousarray(g)) / T,))


def stop_gradient(a):
    """Identity forward; the backward rule sends nothing to ``a``."""
    state = _STOP_MODE.get()
    if state is None:
        out = a.data.copy()
    else:
        mode, log_ = state
        if mode == "record":
            out = a.data.copy()
            log_.append(out.copy())
        else:
            if log_.cursor >= len(log_):
                raise ContractError("grad_check: function structure changed between evaluations")
            out = log_[log_.cursor].copy()
            log_.cursor += 1
    return _emit("stop_gradient", out, (a,), lambda g: (None,))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _backward(loss, tape):
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node_id not in tape._produced:
        raise ContractError("backward: loss was not produced on this tape")
    grads = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.get(node.out_id)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            prev = grads.get(t.node_id)
            grads[t.node_id] = gi if prev is None else prev + gi
    return grads


def backward(loss, tape=None):
    """Reverse pass.  Sets ``.grad`` on every leaf seen by the tape.

    Leaves that the loss never reaches (including those severed by
    :func:`stop_gradient`) get an exact zero gradient.  ``.grad`` is
    overwritten, not accumulated, so repeated calls are idempotent.
    """
    tape = tape if tape is not None else _ACTIVE_TAPE.get()
    if tape is None:
        raise ContractError("backward: no tape given and none active")
    grads = _backward(loss, tape)
    for nid, leaf in tape.leaves.items():
        g = grads.get(nid)
        if g is None:
            g = np.zeros_like(leaf.data)
            grads[nid] = g
        leaf.grad = np.array(g, dtype=np.float64).reshape(leaf.data.shape)
    return grads


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

class _StopLog(list):
    cursor = 0


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    n_checked: int
    n_severed: int
    worst_index: tuple = ()


def _rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def grad_check(f, x, step=1e-6, tol=1e-4):
    """Compare backward() against central differences.

    ``x`` is a Tensor or a sequence of Tensors; ``f`` receives leaves with the
    same structure and must return a scalar Tensor.  Outputs of
    ``stop_gradient`` are frozen at their base-point values while differencing,
    so only unsevered paths are compared.  Leaves the loss never reaches are
    skipped and counted in ``n_severed``.
    """
    single = isinstance(x, Tensor)
    xs = [x] if single else list(x)
    base = [np.array(t.data, dtype=np.float64) for t in xs]
    leaves = [Tensor(b.copy(), requires_grad=True) for b in base]

    log_ = _StopLog()
    token = _STOP_MODE.set(("record", log_))
    try:
        with Tape() as tape:
            out = f(leaves[0]) if single else f(*leaves)
    finally:
        _STOP_MODE.reset(token)
    grads = _backward(out, tape)

    def evaluate(arrays):
        log_.cursor = 0
        tok = _STOP_MODE.set(("replay", log_))
        try:
            ts = [Tensor(a) for a in arrays]
            val = f(ts[0]) if single else f(*ts)
        finally:
            _STOP_MODE.reset(tok)
        return float(val.data.reshape(-1)[0])

    worst, worst_idx, checked, severed = 0.0, (), 0, 0
    for k, leaf in enumerate(leaves):
        if leaf.node_id not in grads:
            severed += 1
            continue
        analytic = np.asarray(grads[leaf.node_id]).reshape(-1)
        for i in range(base[k].size):
            arrays = [b.copy() for b in base]
            arrays[k].reshape(-1)[i] += step
            fp = evaluate(arrays)
            arrays[k].reshape(-1)[i] -= 2.0 * step
            fm = evaluate(arrays)
            numeric = (fp - fm) / (2.0 * step)
            err = float(_rel_err(analytic[i], numeric))
            checked += 1
            if err > worst:
                worst, worst_idx = err, (k, i)
    return GradCheckReport(worst, worst <= tol, checked, severed, worst_idx)
