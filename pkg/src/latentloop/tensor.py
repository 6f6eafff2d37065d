"""Dense tensors with reverse-mode automatic differentiation on top of numpy.

Every operation records a backward closure on the output tensor; `backward()`
replays the recorded graph once in reverse topological order. Arrays are float32
by default (training) and float64 for numerical verification. Any op that
produces a NaN or Inf raises immediately; the single exception is `mask_fill`,
which writes -inf into attention logits by contract and is consumed by
`softmax`.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy import special as _special

float32 = np.float32
float64 = np.float64

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_FINITE_CHECKS = True

INV_SQRT2 = 1.0 / math.sqrt(2.0)
_ERF_DCOEF = 2.0 / math.sqrt(math.pi)


class NumericError(RuntimeError):
    """A non-finite value appeared where the contract requires finite data."""


class DegenerateMaskError(NumericError):
    """An attention row had every target masked out."""


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError("default dtype must be float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (used by tests and the CLI)."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_finite_checks(enabled: bool):
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


def _ensure_finite(arr, op_name):
    if _FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by '{op_name}'")


def check_finite(t, context):
    """Explicit finiteness gate with a caller-supplied error context."""
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite hidden state at {context}")
    return t


class Tensor:
    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if isinstance(data, np.ndarray):
            if dtype is not None:
                data = data.astype(dtype, copy=False)
            elif data.dtype not in (np.float32, np.float64):
                data = data.astype(_DEFAULT_DTYPE)
        else:
            data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._prev = ()
        self._backward = None
        self._op = "leaf"

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

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, op={self._op})"

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other, self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    # -- shape and reductions ---------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sqrt(self):
        return sqrt(self)

    def backward(self):
        if self.data.ndim != 0:
            raise ValueError("backward() requires a scalar output")
        order = tape(self)
        self.grad = np.ones((), dtype=self.data.dtype)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()


class Parameter(Tensor):
    """A named trainable leaf. `name` is filled in by Module.parameters()."""

    def __init__(self, data, init_spec="explicit"):
        super().__init__(data, requires_grad=True)
        self.init_spec = init_spec
        self.name = None


def make_param(shape, init, rng=None, dtype=None):
    dtype = dtype or _DEFAULT_DTYPE
    if init == "zeros":
        data = np.zeros(shape, dtype=dtype)
    elif init == "ones":
        data = np.ones(shape, dtype=dtype)
    elif isinstance(init, tuple) and init[0] == "normal":
        _, mean, std = init
        data = (rng.standard_normal(shape) * std + mean).astype(dtype)
    elif isinstance(init, tuple) and init[0] == "uniform":
        _, lo, hi = init
        data = rng.uniform(lo, hi, size=shape).astype(dtype)
    elif isinstance(init, tuple) and init[0] == "constant":
        data = np.full(shape, init[1], dtype=dtype)
    else:
        raise ValueError(f"unknown init spec: {init!r}")
    spec = init if isinstance(init, str) else f"{init[0]}{init[1:]}"
    return Parameter(data, init_spec=spec)


class Module:
    """Minimal container: any attribute that is a Parameter, Module, or a
    list/tuple of them is part of the model state."""

    def _walk(self, prefix=""):
        for key, val in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield path, val
            elif isinstance(val, Module):
                yield from val._walk(path + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Parameter):
                        yield f"{path}.{i}", item
                    elif isinstance(item, Module):
                        yield from item._walk(f"{path}.{i}.")

    def parameters(self):
        out = {}
        for name, p in self._walk():
            if name in out:
                raise ValueError(f"duplicate parameter name: {name}")
            p.name = name
            out[name] = p
        return out

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.parameters().items()}

    def load_state_dict(self, state, strict=True):
        params = self.parameters()
        if strict and set(state) != set(params):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise ValueError(f"state mismatch: missing={missing} extra={extra}")
        for name, arr in state.items():
            if name in params:
                params[name].data = np.asarray(arr, dtype=params[name].data.dtype).reshape(
                    params[name].data.shape
                )

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None


# -- graph plumbing ---------------------------------------------------------


def _coerce(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _check_dtypes(a, b, op_name):
    if a.data.dtype != b.data.dtype:
        raise TypeError(
            f"dtype mismatch in '{op_name}': {a.data.dtype.name} vs {b.data.dtype.name}"
        )


def _record(out_data, parents, op_name, backward_fn, finite=True):
    if finite:
        _ensure_finite(out_data, op_name)
    out = Tensor(out_data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = tuple(parents)
        out._op = op_name
        out._backward = backward_fn(out)
    return out


def _accumulate(t, g):
    g = np.asarray(g, dtype=t.data.dtype)
    if t.grad is None:
        # copy: g may be a broadcast view or alias another tensor's buffer
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad = t.grad + g


def unbroadcast(g, shape):
    """Sum `g` down to `shape` along axes introduced or stretched by broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def tape(root):
    """Reverse-topological bookkeeping: ordered list of recorded ops reachable
    from `root`, inputs before outputs. Iterative to survive deep recurrences."""
    order = []
    visited = {id(root)}
    stack = [(root, iter(root._prev))]
    while stack:
        node, children = stack[-1]
        pushed = False
        for child in children:
            if id(child) not in visited:
                visited.add(id(child))
                stack.append((child, iter(child._prev)))
                pushed = True
                break
        if not pushed:
            order.append(node)
            stack.pop()
    return order


def op_trace(root):
    """Names of recorded ops in forward order; used to compare compute paths."""
    return [t._op for t in tape(root) if t._op != "leaf"]


def gradients(loss, params):
    """Backward from `loss`; returns {name: grad array}, zeros for untouched leaves."""
    for p in params.values():
        p.grad = None
    loss.backward()
    return {
        name: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }


def grad_check(f, wrt, h=1e-5):
    """Max relative error between backward() and central finite differences.

    `f` is a nullary callable returning a scalar Tensor; `wrt` are the tensors
    to perturb (must be float64). Relative error uses the symmetric denominator
    max(|analytic|, |numeric|, 1e-8).
    """
    wrt = list(wrt)
    for t in wrt:
        if t.data.dtype != np.float64:
            raise ValueError("grad_check requires float64 tensors")
        t.grad = None
    out = f()
    if out.data.ndim != 0:
        raise ValueError("grad_check target must be scalar")
    out.backward()
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in wrt
    ]
    worst = 0.0
    for t, a in zip(wrt, analytic):
        flat = t.data.reshape(-1)
        aflat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            err = abs(aflat[i] - numeric) / max(abs(aflat[i]), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


# -- primitive ops -----------------------------------------------------------


def add(a, b):
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    _check_dtypes(a, b, "add")
    out_data = a.data + b.data

    def backward(out):
        def fn():
            g = out.grad
            if a.requires_grad:
                _accumulate(a, unbroadcast(g, a.shape))
            if b.requires_grad:
                _accumulate(b, unbroadcast(g, b.shape))

        return fn

    return _record(out_data, (a, b), "add", backward)


def sub(a, b):
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    _check_dtypes(a, b, "sub")
    out_data = a.data - b.data

    def backward(out):
        def fn():
            g = out.grad
            if a.requires_grad:
                _accumulate(a, unbroadcast(g, a.shape))
            if b.requires_grad:
                _accumulate(b, unbroadcast(-g, b.shape))

        return fn

    return _record(out_data, (a, b), "sub", backward)


def mul(a, b):
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    _check_dtypes(a, b, "mul")
    out_data = a.data * b.data

    def backward(out):
        def fn():
            g = out.grad
            if a.requires_grad:
                _accumulate(a, unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                _accumulate(b, unbroadcast(g * a.data, b.shape))

        return fn

    return _record(out_data, (a, b), "mul", backward)


def div(a, b):
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    _check_dtypes(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = a.data / b.data

    def backward(out):
        def fn():
            g = out.grad
            if a.requires_grad:
                _accumulate(a, unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                _accumulate(b, unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return fn

    return _record(out_data, (a, b), "div", backward)


def neg(a):
    def backward(out):
        def fn():
            if a.requires_grad:
                _accumulate(a, -out.grad)

        return fn

    return _record(-a.data, (a,), "neg", backward)


def power(a, p):
    p = float(p)
    with np.errstate(all="ignore"):
        out_data = a.data**p

    def backward(out):
        def fn():
            if a.requires_grad:
                _accumulate(a, out.grad * p * a.data ** (p - 1.0))

        return fn

    return _record(out_data, (a,), "pow", backward)


def matmul(a, b):
    _check_dtypes(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul requires tensors with ndim >= 2")
    out_data = np.matmul(a.data, b.data)

    def backward(out):
        def fn():
            g = out.grad
            if a.requires_grad:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                _accumulate(a, unbroadcast(ga, a.shape))
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                _accumulate(b, unbroadcast(gb, b.shape))

        return fn

    return _record(out_data, (a, b), "matmul", backward)


def _restore_axes(g, axis, in_shape, keepdims):
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(in_shape)), in_shape)
    if keepdims:
        return np.broadcast_to(g, in_shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(ax % len(in_shape) for ax in axes)
    shape = tuple(1 if i in axes else s for i, s in enumerate(in_shape))
    return np.broadcast_to(g.reshape(shape), in_shape)


def tsum(a, axis=None, keepdims=False):
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(out):
        def fn():
            if a.requires_grad:
                _accumulate(a, _restore_axes(out.grad, axis, a.shape, keepdims))

        return fn

    return _record(out_data, (a,), "sum", backward)


def tmean(a, axis=None, keepdims=False):
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(out_data.size, 1)

    def backward(out):
        def fn():
            if a.requires_grad:
                g = _restore_axes(out.grad, axis, a.shape, keepdims)
                _accumulate(a, g / count)

        return fn

    return _record(out_data, (a,), "mean", backward)


def reshape(a, shape):
    out_data = a.data.reshape(shape)

    def backward(out):
        def fn():
            if a.requires_grad:
                _accumulate(a, out.grad.reshape(a.shape))

        return fn

    return _record(out_data, (a,), "reshape", backward)


def transpose(a, axes=None):
    if axes is not None:
        axes = tuple(ax % a.ndim for ax in axes)
    out_data = a.data.transpose(axes)
    inv = None if axes is None else np.argsort(axes)

    def backward(out):
        def fn():
            if a.requires_grad:
                _accumulate(a, out.grad.transpose(inv))

        return fn

    return _record(out_data, (a,), "transpose", backward)


def getitem(a, key):
    # basic indexing only: integer/array keys with repeats would need add.at
    out_data = a.data[key]

    def backward(out):
        def fn():
            if a.requires_grad:
                buf = np.zeros_like(a.data)
                buf[key] += out.grad
                _accumulate(a, buf)

        return fn

    return _record(out_data, (a,), "getitem", backward)


def exp(a):
    with np.errstate(over="ignore"):
        out_data = np.exp(a.data)

    def backward(out):
        def fn():
            if a.requires_grad:
                _accumulate(a, out.grad * out.data)

        return fn

    return _record(out_data, (a,), "exp", backward)


def log(a):
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(a.data)

    def backward(out):
        def fn():
            if a.requires_grad:
                _accumulate(a, out.grad / a.data)

        return fn

    return _record(out_data, (a,), "log", backward)


def tanh(a):
    out_data = np.tanh(a.data)

    def backward(out):
        def fn():
            if a.requires_grad:
                _accumulate(a, out.grad * (1.0 - out.data * out.data))

        return fn

    return _record(out_data, (a,), "tanh", backward)


def sqrt(a):
    with np.errstate(invalid="ignore"):
        out_data = np.sqrt(a.data)

    def backward(out):
        def fn():
            if a.requires_grad:
                _accumulate(a, out.grad / (2.0 * out.data))

        return fn

    return _record(out_data, (a,), "sqrt", backward)


def safe_sqrt(a, eps=1e-12):
    """sqrt with the backward denominator clamped away from zero.

    Used by the RMSE loss so a perfect fit keeps value exactly 0 while the
    gradient stays finite (residuals are 0 there, so the clamped grad is 0 too).
    """
    out_data = np.sqrt(a.data)

    def backward(out):
        def fn():
            if a.requires_grad:
                denom = 2.0 * np.maximum(out.data, eps)
                _accumulate(a, out.grad / denom)

        return fn

    return _record(out_data, (a,), "safe_sqrt", backward)


def erf(a):
    out_data = _special.erf(a.data)

    def backward(out):
        def fn():
            if a.requires_grad:
                _accumulate(a, out.grad * _ERF_DCOEF * np.exp(-a.data * a.data))

        return fn

    return _record(out_data, (a,), "erf", backward)


def maximum(a, b):
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    _check_dtypes(a, b, "maximum")
    out_data = np.maximum(a.data, b.data)

    def backward(out):
        def fn():
            g = out.grad
            take_a = a.data >= b.data
            if a.requires_grad:
                _accumulate(a, unbroadcast(g * take_a, a.shape))
            if b.requires_grad:
                _accumulate(b, unbroadcast(g * ~take_a, b.shape))

        return fn

    return _record(out_data, (a, b), "maximum", backward)


def where(cond, a, b):
    """Elementwise select. `cond` is a plain boolean array, not differentiated."""
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    _check_dtypes(a, b, "where")
    cond = np.asarray(cond, dtype=bool)
    out_data = np.where(cond, a.data, b.data)

    def backward(out):
        def fn():
            g = out.grad
            if a.requires_grad:
                _accumulate(a, unbroadcast(g * cond, a.shape))
            if b.requires_grad:
                _accumulate(b, unbroadcast(g * ~cond, b.shape))

        return fn

    return _record(out_data, (a, b), "where", backward)


def concat(tensors, axis=-1):
    tensors = list(tensors)
    for t in tensors[1:]:
        _check_dtypes(tensors[0], t, "concat")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(out):
        def fn():
            pieces = np.split(out.grad, bounds, axis=axis)
            for t, g in zip(tensors, pieces):
                if t.requires_grad:
                    _accumulate(t, g)

        return fn

    return _record(out_data, tuple(tensors), "concat", backward)


def index_select(a, axis, idx):
    """Gather whole slices at integer positions `idx` along `axis`."""
    idx = np.asarray(idx, dtype=np.int64)
    out_data = np.take(a.data, idx, axis=axis)
    ax = axis % a.ndim

    def backward(out):
        def fn():
            if a.requires_grad:
                buf = np.zeros_like(a.data)
                np.add.at(np.moveaxis(buf, ax, 0), idx, np.moveaxis(out.grad, ax, 0))
                _accumulate(a, buf)

        return fn

    return _record(out_data, (a,), "index_select", backward)


def take_along(a, idx, axis):
    """np.take_along_axis with scatter-add backward."""
    idx = np.asarray(idx, dtype=np.int64)
    out_data = np.take_along_axis(a.data, idx, axis=axis)
    ax = axis % a.ndim

    def backward(out):
        def fn():
            if a.requires_grad:
                buf = np.zeros_like(a.data)
                bmoved = np.moveaxis(buf, ax, -1)
                imoved = np.moveaxis(idx, ax, -1)
                gmoved = np.moveaxis(out.grad, ax, -1)
                lead = np.indices(imoved.shape[:-1])
                lead = tuple(l[..., None] for l in lead)
                np.add.at(bmoved, (*lead, imoved), gmoved)
                _accumulate(a, buf)

        return fn

    return _record(out_data, (a,), "take_along", backward)


def mask_fill(a, allowed, fill=-np.inf):
    """Write `fill` where `allowed` is False. The only op whose output may be
    non-finite; downstream softmax turns the -inf entries into exact zeros."""
    allowed = np.asarray(allowed, dtype=bool)
    out_data = np.where(allowed, a.data, a.data.dtype.type(fill))

    def backward(out):
        def fn():
            if a.requires_grad:
                _accumulate(a, unbroadcast(out.grad * allowed, a.shape))

        return fn

    return _record(out_data, (a,), "mask_fill", backward, finite=False)


def softmax(a, axis=-1):
    m = np.max(a.data, axis=axis, keepdims=True)
    if np.any(np.isneginf(m)):
        raise DegenerateMaskError("softmax row with every entry masked")
    e = np.exp(a.data - m)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(out):
        def fn():
            if a.requires_grad:
                g = out.grad
                inner = (g * out.data).sum(axis=axis, keepdims=True)
                _accumulate(a, (g - inner) * out.data)

        return fn

    return _record(out_data, (a,), "softmax", backward)


def attention_context(x, wq, bq, wk, bk, wv, bv, wo, bo, allowed, n_heads,
                      weights_sink=None):
    """Full multi-head attention as one recorded op.

    Computes softmax((Q K^T) / sqrt(dh), masked by `allowed`) V through the
    output projection, where Q/K/V are head-split projections of `x`. Numerics
    match the unfused projection/mask_fill/softmax/matmul chain exactly; the
    single node keeps graph bookkeeping off the hot path. `allowed` is a
    boolean [s, s] array and is not differentiated. If `weights_sink` is a
    list, a copy of the post-softmax weights [..., h, s, s] is appended.
    """
    for t in (wq, bq, wk, bk, wv, bv, wo, bo):
        _check_dtypes(x, t, "attention")
    d = x.shape[-1]
    s = x.shape[-2]
    lead = x.shape[:-2]
    dh = d // n_heads
    allowed = np.asarray(allowed, dtype=bool)
    dt = x.data.dtype.type

    def split(t):
        return t.reshape(*lead, s, n_heads, dh).swapaxes(-2, -3)

    def merge(t):
        return t.swapaxes(-2, -3).reshape(*lead, s, d)

    q = split(x.data @ wq.data + bq.data)
    k = split(x.data @ wk.data + bk.data)
    v = split(x.data @ wv.data + bv.data)
    scale = dt(1.0 / np.sqrt(dh))
    masked = np.where(allowed, (q @ k.swapaxes(-1, -2)) * scale, dt(-np.inf))
    m = masked.max(axis=-1, keepdims=True)
    if np.any(np.isneginf(m)):
        raise DegenerateMaskError("softmax row with every entry masked")
    e = np.exp(masked - m)
    weights = e / e.sum(axis=-1, keepdims=True)
    if weights_sink is not None:
        weights_sink.append(weights.copy())
    ctx = merge(weights @ v)
    out_data = ctx @ wo.data + bo.data

    def backward(out):
        def fn():
            g = out.grad
            g2 = g.reshape(-1, d)
            if wo.requires_grad:
                _accumulate(wo, ctx.reshape(-1, d).T @ g2)
            if bo.requires_grad:
                _accumulate(bo, g2.sum(axis=0))
            gctx = split(g @ wo.data.T)
            gw = gctx @ v.swapaxes(-1, -2)
            gvh = weights.swapaxes(-1, -2) @ gctx
            inner = (gw * weights).sum(axis=-1, keepdims=True)
            gs = ((gw - inner) * weights) * scale
            gq_m = merge(gs @ k)
            gk_m = merge(gs.swapaxes(-1, -2) @ q)
            gv_m = merge(gvh)
            x2 = x.data.reshape(-1, d)
            for w_t, b_t, gm in ((wq, bq, gq_m), (wk, bk, gk_m), (wv, bv, gv_m)):
                if w_t.requires_grad:
                    _accumulate(w_t, x2.T @ gm.reshape(-1, d))
                if b_t.requires_grad:
                    _accumulate(b_t, gm.reshape(-1, d).sum(axis=0))
            if x.requires_grad:
                gx = gq_m @ wq.data.T + gk_m @ wk.data.T + gv_m @ wv.data.T
                _accumulate(x, gx)

        return fn

    return _record(out_data, (x, wq, bq, wk, bk, wv, bv, wo, bo),
                   "attention", backward)


def dropout(a, p, rng, train):
    """Inverted dropout; identity (records nothing) when eval or p == 0."""
    if not train or p == 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must be in [0, 1)")
    keep = (rng.random(a.shape) >= p).astype(a.data.dtype) / a.data.dtype.type(1.0 - p)
    out_data = a.data * keep

    def backward(out):
        def fn():
            if a.requires_grad:
                _accumulate(a, out.grad * keep)

        return fn

    return _record(out_data, (a,), "dropout", backward)


# -- composites --------------------------------------------------------------


def gelu(a):
    """Exact-erf GELU, 0.5 * x * (1 + erf(x / sqrt(2))), as one recorded op."""
    dt = a.data.dtype.type
    c = dt(INV_SQRT2)
    erf_term = _special.erf(a.data * c) + dt(1.0)
    out_data = (a.data * erf_term) * dt(0.5)

    def backward(out):
        def fn():
            if a.requires_grad:
                bell = _ERF_DCOEF * np.exp(-(a.data * c) * (a.data * c)) * c
                _accumulate(a, out.grad * (0.5 * erf_term + 0.5 * a.data * bell))

        return fn

    return _record(out_data, (a,), "gelu", backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine.

    eps sits inside the sqrt, so a constant vector maps to exact zeros.
    Single recorded op; the backward treats mean and variance as functions
    of x (the standard layer-norm gradient).
    """
    _check_dtypes(x, gamma, "layer_norm")
    _check_dtypes(x, beta, "layer_norm")
    dt = x.data.dtype.type
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    std = np.sqrt(var + dt(eps))
    xhat = xc / std
    out_data = xhat * gamma.data + beta.data

    def backward(out):
        def fn():
            g = out.grad
            if gamma.requires_grad:
                _accumulate(gamma, unbroadcast(g * xhat, gamma.shape))
            if beta.requires_grad:
                _accumulate(beta, unbroadcast(g, beta.shape))
            if x.requires_grad:
                gh = g * gamma.data
                m1 = gh.mean(axis=-1, keepdims=True)
                m2 = (gh * xhat).mean(axis=-1, keepdims=True)
                _accumulate(x, (gh - m1 - xhat * m2) / std)

        return fn

    return _record(out_data, (x, gamma, beta), "layer_norm", backward)


def logsumexp(a, axis=-1, keepdims=False):
    m = np.max(a.data, axis=axis, keepdims=True)
    shifted = sub(a, Tensor(m))
    s = tsum(exp(shifted), axis=axis, keepdims=True)
    out = add(log(s), Tensor(m))
    if not keepdims:
        ax = axis % a.ndim
        out = reshape(out, tuple(s_ for i, s_ in enumerate(out.shape) if i != ax))
    return out
