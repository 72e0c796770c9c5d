"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every operation records its parents and a backward closure on the output
tensor; `backward()` runs a topological sweep from a scalar loss. All math
is double precision and single-threaded, so results are bit-reproducible.
"""

import math
from contextlib import contextmanager

import numpy as np

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (pure forward evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ValueError(
                f"backward() requires a scalar terminal, got shape {self.shape}"
            )
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    def item(self):
        return float(self.data.reshape(-1)[0])

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _toposort(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _tracked(*tensors):
    return _GRAD_ENABLED and any(t.requires_grad for t in tensors)


def _make(data, parents, backward):
    out = Tensor(data, requires_grad=True)
    out._parents = parents
    out._backward = backward
    return out


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data
    if not _tracked(a, b):
        return Tensor(data)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _make(data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data
    if not _tracked(a, b):
        return Tensor(data)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))

    return _make(data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data
    if not _tracked(a, b):
        return Tensor(data)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), bw)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data @ b.data
    if not _tracked(a, b):
        return Tensor(data)

    def bw(g):
        if a.requires_grad:
            if b.data.ndim == 1:
                ga = np.outer(g, b.data) if a.data.ndim == 2 else g * b.data
            else:
                ga = g @ b.data.swapaxes(-1, -2)
            a._accum(_unbroadcast(np.asarray(ga), a.shape))
        if b.requires_grad:
            if a.data.ndim == 1:
                gb = np.outer(a.data, g) if b.data.ndim == 2 else g * a.data
            else:
                gb = a.data.swapaxes(-1, -2) @ g
            b._accum(_unbroadcast(np.asarray(gb), b.shape))

    return _make(data, (a, b), bw)


def relu(x):
    x = as_tensor(x)
    data = np.maximum(x.data, 0.0)
    if not _tracked(x):
        return Tensor(data)
    mask = (x.data > 0.0).astype(np.float64)

    def bw(g):
        x._accum(g * mask)

    return _make(data, (x,), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """GELU, tanh approximation."""
    x = as_tensor(x)
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    data = 0.5 * v * (1.0 + t)
    if not _tracked(x):
        return Tensor(data)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v**2)
        dx = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t**2) * dinner
        x._accum(g * dx)

    return _make(data, (x,), bw)


def exp(x):
    x = as_tensor(x)
    data = np.exp(x.data)
    if not _tracked(x):
        return Tensor(data)

    def bw(g):
        x._accum(g * data)

    return _make(data, (x,), bw)


def log(x):
    x = as_tensor(x)
    data = np.log(x.data)
    if not _tracked(x):
        return Tensor(data)

    def bw(g):
        x._accum(g / x.data)

    return _make(data, (x,), bw)


def power(x, p):
    x = as_tensor(x)
    data = x.data**p
    if not _tracked(x):
        return Tensor(data)

    def bw(g):
        x._accum(g * p * x.data ** (p - 1))

    return _make(data, (x,), bw)


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)
    if not _tracked(x):
        return Tensor(data)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accum(np.broadcast_to(g, x.shape).copy())

    return _make(data, (x,), bw)


def tmean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        n = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(x, axis=-1):
    """Numerically stable softmax along `axis`."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)
    if not _tracked(x):
        return Tensor(data)

    def bw(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        x._accum(data * (g - dot))

    return _make(data, (x,), bw)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = tmean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = tmean(mul(xc, xc), axis=-1, keepdims=True)
    inv = power(add(var, eps), -0.5)
    return add(mul(mul(xc, inv), gain), bias)


def embedding(table, ids):
    """Row lookup `table[ids]`; gradient scatters back with np.add.at."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    data = table.data[ids]
    if not _tracked(table):
        return Tensor(data)

    def bw(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids, g)

    return _make(data, (table,), bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    if not _tracked(*tensors):
        return Tensor(data)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accum(piece)

    return _make(data, tuple(tensors), bw)


def reshape(x, shape):
    x = as_tensor(x)
    data = x.data.reshape(shape)
    if not _tracked(x):
        return Tensor(data)

    def bw(g):
        x._accum(g.reshape(x.shape))

    return _make(data, (x,), bw)


def transpose(x, axes):
    x = as_tensor(x)
    data = x.data.transpose(axes)
    if not _tracked(x):
        return Tensor(data)
    inv = np.argsort(axes)

    def bw(g):
        x._accum(g.transpose(inv))

    return _make(data, (x,), bw)


def getitem(x, index):
    """Basic slicing / integer-array indexing with scatter-add gradient."""
    x = as_tensor(x)
    data = x.data[index]
    if not _tracked(x):
        return Tensor(data)

    def bw(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        np.add.at(x.grad, index, g)

    return _make(data, (x,), bw)


def l2_normalize(x, eps=1e-12):
    """Scale rows of x (last axis) to unit length; `eps` guards the zero row."""
    x = as_tensor(x)
    norm = power(tsum(mul(x, x), axis=-1, keepdims=True), 0.5)
    guard = (norm.data >= eps).astype(np.float64)
    denom = add(mul(norm, guard), eps * (1.0 - guard))
    return mul(x, power(denom, -1.0))


def masked_logsumexp(x, mask, axis=-1):
    """log(sum(mask * exp(x))) along `axis`, numerically stable.

    `mask` is a constant 0/1 array; every row must have at least one
    included entry. The max-shift constant is detached, which leaves the
    gradient exact.
    """
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=np.float64)
    shift = np.where(mask > 0, x.data, -np.inf).max(axis=axis, keepdims=True)
    # masking inside exp keeps excluded (possibly huge) entries from overflowing
    z = mul(sub(x, shift), mask)
    s = tsum(mul(exp(z), mask), axis=axis, keepdims=False)
    return add(log(s), np.squeeze(shift, axis=axis))


def logsumexp(x, axis=-1):
    return masked_logsumexp(x, np.ones(as_tensor(x).shape), axis=axis)


# ---------------------------------------------------------------------------
# program-level helpers
# ---------------------------------------------------------------------------

def forward_backward(program, inputs):
    """Evaluate `program(*inputs)` and return (scalar value, gradients).

    `program` composes primitives from this module; `inputs` are Tensors
    (grad tracking is forced on). The terminal must be scalar.
    """
    for t in inputs:
        t.requires_grad = True
        t.zero_grad()
    out = program(*inputs)
    if out.data.size != 1:
        raise ValueError(f"program terminal must be scalar, got shape {out.shape}")
    out.backward()
    grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    return out, grads


def finite_difference(program, inputs, index, step=1e-5):
    """Central-difference gradient of program w.r.t. inputs[index]."""
    base = [t.data.copy() for t in inputs]
    g = np.zeros_like(base[index])
    flat = base[index].reshape(-1)
    gflat = g.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = program(*[Tensor(b) for b in base]).item()
            flat[i] = orig - step
            lo = program(*[Tensor(b) for b in base]).item()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
    return g


def gradient_check(program, point, step=1e-5, tol=1e-4):
    """Compare analytic gradients against central differences.

    Returns a report dict with per-input max relative error and pass flags.
    Relative error uses a floor of 1e-3 on the denominator so near-zero
    gradients compare on an absolute scale.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if tol <= 0:
        raise ValueError("tol must be positive")
    tensors = [as_tensor(p) for p in point]
    _, grads = forward_backward(program, tensors)
    report = {"inputs": [], "passed": True, "max_rel_error": 0.0}
    for i, analytic in enumerate(grads):
        numeric = finite_difference(program, tensors, i, step=step)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3)
        rel = float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0
        ok = rel <= tol
        report["inputs"].append({"index": i, "max_rel_error": rel, "passed": ok})
        report["max_rel_error"] = max(report["max_rel_error"], rel)
        report["passed"] = report["passed"] and ok
    return report
