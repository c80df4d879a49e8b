"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` when at
least one input requires a gradient. Without an active tape nothing is
recorded, which doubles as inference mode.

Broadcasting is deliberately narrow: elementwise binary ops need equal shapes,
``add_bias`` adds a vector along the last axis, and ``mul_const``/``add_const``
accept non-differentiable numpy operands of broadcastable shape.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "is_leaf", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None, _leaf=True):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self.is_leaf = _leaf

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class _Record:
    __slots__ = ("output", "inputs", "backward", "op")

    def __init__(self, output, inputs, backward, op):
        self.output = output
        self.inputs = inputs
        self.backward = backward
        self.op = op


class Tape:
    """Ordered record of differentiable operations.

    Records are appended at creation time, so the list is already in
    topological order; ``backward`` walks it once in reverse.
    """

    def __init__(self):
        self.records = []
        self.backward_calls = 0

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def record(self, output, inputs, backward, op):
        self.records.append(_Record(output, inputs, backward, op))

    def backward(self, loss, retain_intermediate=False):
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        self.backward_calls = 0
        for rec in reversed(self.records):
            g = rec.output.grad
            if g is None:
                continue
            needs = tuple(t.requires_grad for t in rec.inputs)
            grads = rec.backward(g, needs)
            self.backward_calls += 1
            adopted = set()
            for t, gi, need in zip(rec.inputs, grads, needs):
                if not need or gi is None:
                    continue
                if t.grad is None:
                    # adopt freshly allocated arrays; copy pass-throughs and views
                    fresh = (gi is not g and gi.base is None and gi.flags.writeable
                             and gi.dtype == np.float64 and gi.shape == t.shape
                             and id(gi) not in adopted)
                    t.grad = gi if fresh else np.array(gi, dtype=np.float64).reshape(t.shape)
                    adopted.add(id(t.grad))
                else:
                    t.grad += gi
            if not retain_intermediate and rec.output is not loss:
                rec.output.grad = None


_TAPES: list = []


def active_tape():
    return _TAPES[-1] if _TAPES else None


@contextmanager
def no_grad():
    """Suspend recording inside the block."""
    saved = _TAPES[:]
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES[:] = saved


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data, inputs, backward, op):
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track, _leaf=False)
    if track:
        tape.record(out, inputs, backward, op)
    return out


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    """Matrix product of 2-D operands, or batched product of equal-batch 3-D operands."""
    a, b = as_tensor(a), as_tensor(b)
    ok = a.ndim == b.ndim and a.ndim in (2, 3) and a.shape[-1] == b.shape[-2]
    if ok and a.ndim == 3:
        ok = a.shape[0] == b.shape[0]
    if not ok:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def backward(g, needs):
        ga = g @ np.swapaxes(B, -1, -2) if needs[0] else None
        gb = np.swapaxes(A, -1, -2) @ g if needs[1] else None
        return ga, gb

    return _emit(A @ B, (a, b), backward, "matmul")


def linear(x, w, b=None):
    """``x @ w + b`` applied over the last axis of ``x``."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    X = x.data.reshape(-1, w.shape[0])
    out = X @ w.data
    if b is not None:
        out += b.data
    out = out.reshape(lead + (w.shape[1],))
    W = w.data

    def backward(g, needs):
        g2 = g.reshape(-1, W.shape[1])
        gx = None
        if needs[0]:
            gx = np.empty(lead + (W.shape[0],))
            np.matmul(g2, W.T, out=gx.reshape(-1, W.shape[0]))
        gw = X.T @ g2 if needs[1] else None
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=0) if needs[2] else None)
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return _emit(out, inputs, backward, "linear")


# ---------------------------------------------------------------- elementwise


def add(a, b):
    _same_shape(a, b, "add")
    return _emit(a.data + b.data, (a, b), lambda g, n: (g, g), "add")


def sub(a, b):
    _same_shape(a, b, "sub")
    return _emit(a.data - b.data, (a, b), lambda g, n: (g, -g), "sub")


def mul(a, b):
    _same_shape(a, b, "mul")
    A, B = a.data, b.data
    return _emit(A * B, (a, b),
                 lambda g, n: (g * B if n[0] else None, g * A if n[1] else None), "mul")


def scale(x, s):
    s = float(s)
    return _emit(x.data * s, (x,), lambda g, n: (g * s,), "scale")


def add_bias(x, b):
    """Add a length-n vector along the last axis of ``x``."""
    if b.ndim != 1 or b.shape[0] != x.shape[-1]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return _emit(x.data + b.data, (x, b),
                 lambda g, n: (g, g.sum(axis=lead) if n[1] else None), "add_bias")


def mul_const(x, c):
    """Multiply by a constant array broadcastable to ``x.shape``."""
    c = np.asarray(c, dtype=np.float64)
    out = x.data * c
    if out.shape != x.shape:
        raise ShapeError(f"mul_const: constant {c.shape} would broadcast {x.shape} to {out.shape}")
    return _emit(out, (x,), lambda g, n: (g * c,), "mul_const")


def add_const(x, c):
    c = np.asarray(c, dtype=np.float64)
    out = x.data + c
    if out.shape != x.shape:
        raise ShapeError(f"add_const: constant {c.shape} would broadcast {x.shape} to {out.shape}")
    return _emit(out, (x,), lambda g, n: (g,), "add_const")


def exp(x):
    y = np.exp(x.data)
    return _emit(y, (x,), lambda g, n: (g * y,), "exp")


def log(x):
    X = x.data
    return _emit(np.log(X), (x,), lambda g, n: (g / X,), "log")


def sigmoid(x):
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _emit(y, (x,), lambda g, n: (g * y * (1.0 - y),), "sigmoid")


def gelu(x):
    X = x.data
    y, t = kernels.gelu_forward(X)
    return _emit(y, (x,), lambda g, n: (kernels.gelu_backward(X, t, g),), "gelu")


# ---------------------------------------------------------------- shape ops


def reshape(x, shape):
    old = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g, n: (g.reshape(old),), "reshape")


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _emit(np.transpose(x.data, axes), (x,),
                 lambda g, n: (np.transpose(g, inv),), "transpose")


def concat(tensors, axis=0):
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g, needs):
        out = []
        for i, need in enumerate(needs):
            if not need:
                out.append(None)
                continue
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(sl)])
        return out

    return _emit(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 backward, "concat")


def index(x, idx):
    """Numpy-style indexing; repeated indices accumulate in the backward pass."""
    shape = x.shape
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None
                for p in parts)

    def backward(g, needs):
        gx = np.zeros(shape)
        if basic:
            gx[idx] = g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return _emit(x.data[idx], (x,), backward, "index")


def take_rows(table, ids):
    """Embedding lookup: rows of a 2-D table selected by an integer array."""
    ids = np.asarray(ids, dtype=np.int64)
    nrows = table.shape[0]

    def backward(g, needs):
        gt = np.zeros((nrows,) + g.shape[ids.ndim:])
        np.add.at(gt, ids.reshape(-1), g.reshape((-1,) + g.shape[ids.ndim:]))
        return (gt,)

    return _emit(table.data[ids], (table,), backward, "take_rows")


# ---------------------------------------------------------------- reductions


def sum_(x, axis=None, keepdims=False):
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _emit(out, (x,), backward, "sum")


def mean(x, axis=None, keepdims=False):
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum_(x, axis, keepdims), 1.0 / count)


# ---------------------------------------------------------------- normalisation


def softmax(x):
    """Softmax over the last axis (row-max stabilised)."""
    y = kernels.softmax_forward(x.data)
    return _emit(y, (x,), lambda g, n: (kernels.softmax_backward(y, g),), "softmax")


def softmax_rows(x):
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got {x.shape}")
    return softmax(x)


def log_softmax(x):
    X = x.data
    z = X - X.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _emit(y, (x,), lambda g, n: (g - p * g.sum(axis=-1, keepdims=True),), "log_softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine {gamma.shape}/{beta.shape} vs features {d}")
    y, xhat, rstd = kernels.layernorm_forward(x.data, gamma.data, beta.data, eps)
    G = gamma.data

    def backward(g, needs):
        gx, gg, gb = kernels.layernorm_backward(g, xhat, rstd, G)
        return gx, gg, gb

    return _emit(y, (x, gamma, beta), backward, "layer_norm")


def l2_normalize(x, eps=1e-12):
    """Unit-normalise along the last axis; vectors with norm < eps map to zero."""
    X = x.data
    norm = np.sqrt((X * X).sum(axis=-1, keepdims=True))
    live = norm >= eps
    inv = np.where(live, 1.0 / np.where(live, norm, 1.0), 0.0)
    y = X * inv

    def backward(g, needs):
        return (inv * (g - y * (g * y).sum(axis=-1, keepdims=True)),)

    return _emit(y, (x,), backward, "l2_normalize")


def parameter(data, name=None, requires_grad=True):
    return Tensor(data, requires_grad=requires_grad, name=name)
