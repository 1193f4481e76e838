"""Minimal reverse-mode autodiff tensor engine.

Dense float64 tensors backed by numpy, with exactly the operations the
convolutional-prompt computation graph needs. Every differentiable op
registers an exact backward closure; numerical gradients appear only in
the finite-difference checker, never in the training path.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

_GRAD_ENABLED = True

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class Tensor:
    """Dense n-d float64 array with gradient accumulation.

    Immutable after construction except for ``grad`` accumulation. A graph
    instance is confined to one thread; independent graphs may run in
    parallel.
    """

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    # -- autograd ------------------------------------------------------------

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without gradient requires a scalar")
            grad = np.ones_like(self.data)
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=np.float64).reshape(self.data.shape)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accumulate(self, grad):
        if self.grad is None:
            # copy: incoming gradients may alias another node's buffer
            self.grad = np.array(grad, dtype=np.float64)
        else:
            self.grad += grad

    # -- operators -----------------------------------------------------------

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def astensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(*inputs):
    return _GRAD_ENABLED and any(t.requires_grad for t in inputs)


def _make(data, inputs, backward):
    if _tracked(*inputs):
        return Tensor(data, requires_grad=True, _parents=tuple(inputs), _backward=backward)
    return Tensor(data)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverses numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic --------------------------------------------------

def add(a, b):
    a, b = astensor(a), astensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def sub(a, b):
    a, b = astensor(a), astensor(b)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b):
    a, b = astensor(a), astensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward)


def div(a, b):
    a, b = astensor(a), astensor(b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, (a, b), backward)


def exp(a):
    a = astensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data)

    return _make(out_data, (a,), backward)


def sqrt(a):
    a = astensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * 0.5 / out_data)

    return _make(out_data, (a,), backward)


def absval(a):
    a = astensor(a)
    out_data = np.abs(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * np.sign(a.data))

    return _make(out_data, (a,), backward)


def relu(a):
    a = astensor(a)
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0.0))

    return _make(out_data, (a,), backward)


def gelu(a):
    """GELU, tanh approximation (fixed choice; closed-form gradient)."""
    a = astensor(a)
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def backward(g):
        if a.requires_grad:
            dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
            da = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            a._accumulate(g * da)

    return _make(out_data, (a,), backward)


# -- shape manipulation ------------------------------------------------------

def reshape(a, shape):
    a = astensor(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.data.shape))

    return _make(out_data, (a,), backward)


def transpose(a):
    a = astensor(a)
    out_data = a.data.T

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.T)

    return _make(out_data, (a,), backward)


def getitem(a, key):
    a = astensor(a)
    out_data = a.data[key]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, key, g)
            a._accumulate(full)

    return _make(out_data, (a,), backward)


def concat(tensors, axis=0):
    tensors = [astensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _make(out_data, tensors, backward)


def tsum(a, axis=None, keepdims=False):
    a = astensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if a.requires_grad:
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.data.shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                a._accumulate(np.broadcast_to(gg, a.data.shape).copy())

    return _make(out_data, (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = astensor(a)
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


# -- linear algebra ----------------------------------------------------------

def matmul(a, b):
    a, b = astensor(a), astensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.data.shape} x {b.data.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(out_data, (a, b), backward)


def softmax(x, axis=-1):
    """Numerically stabilized softmax (max subtraction; max treated constant)."""
    x = astensor(x)
    shifted = sub(x, np.max(x.data, axis=axis, keepdims=True))
    e = exp(shifted)
    return div(e, tsum(e, axis=axis, keepdims=True))


def layer_norm(x, gain, bias, eps=1e-5):
    """Per-row normalization over the last axis, then affine."""
    x, gain, bias = astensor(x), astensor(gain), astensor(bias)
    if gain.data.shape != x.data.shape[-1:] or bias.data.shape != x.data.shape[-1:]:
        raise ShapeError("layer_norm gain/bias must match the last dimension")
    mu = mean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = mean(mul(xc, xc), axis=-1, keepdims=True)
    normed = div(xc, sqrt(add(var, eps)))
    return add(mul(normed, gain), bias)


def conv2d_valid(inp, kernel):
    """2-d valid cross-correlation, single channel, stride 1.

    Deep-learning convention: the kernel is not flipped.
    """
    inp, kernel = astensor(inp), astensor(kernel)
    if inp.data.ndim != 2 or kernel.data.ndim != 2:
        raise ShapeError("conv2d_valid expects 2-d input and kernel")
    A, B = inp.data.shape
    kh, kw = kernel.data.shape
    if kh > A or kw > B:
        raise ShapeError(f"kernel {kernel.data.shape} larger than input {inp.data.shape}")
    oh, ow = A - kh + 1, B - kw + 1
    out_data = np.zeros((oh, ow))
    for i in range(kh):
        for j in range(kw):
            out_data += kernel.data[i, j] * inp.data[i:i + oh, j:j + ow]

    def backward(g):
        if inp.requires_grad:
            gi = np.zeros_like(inp.data)
            for i in range(kh):
                for j in range(kw):
                    gi[i:i + oh, j:j + ow] += kernel.data[i, j] * g
            inp._accumulate(gi)
        if kernel.requires_grad:
            gk = np.empty_like(kernel.data)
            for i in range(kh):
                for j in range(kw):
                    gk[i, j] = np.sum(inp.data[i:i + oh, j:j + ow] * g)
            kernel._accumulate(gk)

    return _make(out_data, (inp, kernel), backward)


def cosine_similarity(u, v, return_flag=False):
    """cos(u, v) in [-1, 1]; a zero-norm operand yields 0 with a flag.

    Degenerate projections must not abort training, hence the flagged
    zero instead of an error.
    """
    u, v = astensor(u), astensor(v)
    nu = float(np.linalg.norm(u.data))
    nv = float(np.linalg.norm(v.data))
    if nu == 0.0 or nv == 0.0:
        out = Tensor(0.0)
        return (out, True) if return_flag else out
    dot = tsum(mul(u, v))
    denom = mul(sqrt(tsum(mul(u, u))), sqrt(tsum(mul(v, v))))
    out = div(dot, denom)
    return (out, False) if return_flag else out


def cross_entropy(logits, labels):
    """Mean negative log softmax probability of the true class."""
    logits = astensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ShapeError("cross_entropy expects 2-d logits")
    n, c = logits.data.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    out_data = -logp[np.arange(n), labels].mean()

    def backward(g):
        if logits.requires_grad:
            p = np.exp(logp)
            p[np.arange(n), labels] -= 1.0
            logits._accumulate(g * p / n)

    return _make(out_data, (logits,), backward)


def l1_distance(a, b):
    """Sum of absolute elementwise differences."""
    a, b = astensor(a), astensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"l1_distance shape mismatch: {a.data.shape} vs {b.data.shape}")
    return tsum(absval(sub(a, b)))


# -- finite-difference verification ------------------------------------------

@dataclass
class GradCheckReport:
    """Relative-error summary of analytic vs central-difference gradients."""

    per_parameter_errors: list = field(default_factory=list)

    @property
    def max_relative_error(self):
        return max((e for _, e in self.per_parameter_errors), default=0.0)

    def passed(self, tol):
        return self.max_relative_error < tol


def finite_diff_check(f, params, step=1e-5):
    """Check analytic gradients of scalar-valued ``f`` against central differences.

    ``params`` maps names to Tensors with requires_grad=True. Relative error
    per element is |g_a - g_n| / max(|g_a|, |g_n|, 1e-8); the report carries
    the per-parameter maximum.
    """
    for p in params.values():
        p.zero_grad()
    out = f()
    if not np.isfinite(out.data).all():
        raise FloatingPointError("objective is not finite at the given parameters")
    out.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }
    report = GradCheckReport()
    for name, p in params.items():
        flat = p.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(f().data)
            flat[i] = orig - step
            lo = float(f().data)
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise FloatingPointError(f"non-finite objective while perturbing {name}")
            numeric[i] = (hi - lo) / (2.0 * step)
        ga = analytic[name].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(ga), np.abs(numeric)), 1e-8)
        err = float(np.max(np.abs(ga - numeric) / denom)) if flat.size else 0.0
        report.per_parameter_errors.append((name, err))
    return report
