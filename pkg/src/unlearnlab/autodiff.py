"""Dense float64 tensors with reverse-mode differentiation.

The engine is deliberately small: every primitive stores a closure that maps
the output gradient to input gradients, and :func:`backward` replays the
recorded graph in reverse topological order.  Everything the language models
need beyond the primitives is composed from them.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from .errors import ContractViolation

__all__ = [
    "Tensor",
    "tensor",
    "parameter",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "grad",
    "tape",
    "finite_difference_check",
    "matmul",
    "add",
    "mul",
    "gather",
    "take_along_last",
    "masked_select",
    "softmax",
    "log_softmax",
    "log",
    "sigmoid",
    "log_sigmoid",
    "layer_norm",
    "gelu",
    "tanh",
    "sum",
    "mean",
    "reshape",
    "transpose",
]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    """An ndarray plus the bookkeeping needed for reverse mode."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        return backward(self)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar; scalars and arrays are lifted to constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_lift(other), -1.0))

    def __rsub__(self, other):
        return add(_lift(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not a primitive")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad=False, name=None):
    """Create a tensor from external input, rejecting NaN and Inf."""
    arr = np.array(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor data must be finite")
    return Tensor(arr, requires_grad=requires_grad, name=name)


def parameter(data, name=None):
    return tensor(data, requires_grad=True, name=name)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- primitives


def add(a, b):
    a, b = _lift(a), _lift(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def mul(a, b):
    a, b = _lift(a), _lift(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw)


def matmul(a, b):
    """Batched matrix product over the last two axes.

    ``b`` may be 2-D (shared weights) or carry the same leading axes as ``a``.
    """
    a, b = _lift(a), _lift(b)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw)


def gather(table, idx):
    """Row lookup ``table[idx]`` (embedding)."""
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        out = np.zeros_like(table.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(table.data[idx], (table,), bw)


def take_along_last(x, idx):
    """Pick ``x[..., idx]`` elementwise; ``idx`` has the shape of ``x`` minus its last axis."""
    idx = np.asarray(idx, dtype=np.int64)
    picked = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        out = np.zeros_like(x.data)
        np.put_along_axis(out, idx[..., None], g[..., None], axis=-1)
        return (out,)

    return _make(picked, (x,), bw)


def masked_select(x, mask):
    """Flat vector of the entries of ``x`` where the boolean ``mask`` holds."""
    mask = np.asarray(mask, dtype=bool)

    def bw(g):
        out = np.zeros_like(x.data)
        out[mask] = g
        return (out,)

    return _make(x.data[mask], (x,), bw)


def softmax(x, axis=-1):
    if x.shape[axis] < 1:
        raise ValueError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (x,), bw)


def log_softmax(x, axis=-1):
    if x.shape[axis] < 1:
        raise ValueError("log_softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw)


def log(x):
    def bw(g):
        return (g / x.data,)

    return _make(np.log(x.data), (x,), bw)


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x):
    s = _sigmoid(np.atleast_1d(x.data)).reshape(x.shape)

    def bw(g):
        return (g * s * (1.0 - s),)

    return _make(s, (x,), bw)


def log_sigmoid(x):
    v = x.data
    out = np.minimum(v, 0.0) - np.log1p(np.exp(-np.abs(v)))

    def bw(g):
        return (g * _sigmoid(np.atleast_1d(-v)).reshape(v.shape),)

    return _make(out, (x,), bw)


def layer_norm(x, eps=1e-5):
    """Normalize over the last axis (no affine part; compose gain/bias)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make(xhat, (x,), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """tanh approximation of GELU."""
    v = x.data
    v2 = v * v
    t = np.tanh(_GELU_C * (v + 0.044715 * v2 * v))
    out = 0.5 * v * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du),)

    return _make(out, (x,), bw)


def tanh(x):
    t = np.tanh(x.data)

    def bw(g):
        return (g * (1.0 - t * t),)

    return _make(t, (x,), bw)


def sum(x, axis=None, keepdims=False):  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), bw)


def mean(x, axis=None, keepdims=False):
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape):
    def bw(g):
        return (g.reshape(x.shape),)

    return _make(x.data.reshape(shape), (x,), bw)


def transpose(x, axes):
    inv = np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inv),)

    return _make(np.transpose(x.data, axes), (x,), bw)


# ------------------------------------------------------------------ backward


def tape(loss):
    """Nodes reachable from ``loss`` in topological order (inputs first)."""
    order, seen = [], set()
    stack = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.ndim != 0:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = tape(loss)
    grads = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def grad(loss, params):
    """Gradients of ``loss`` w.r.t. ``params``; unreachable params get zeros."""
    for p in params:
        p.grad = None
    backward(loss)
    out = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
    for p in params:
        p.grad = None
    return out


def finite_difference_check(loss_fn, params, eps=1e-5, max_coords=None, rng=None):
    """Max relative error between reverse-mode and central-difference gradients.

    ``loss_fn(params)`` must return a scalar Tensor.  The error per coordinate
    is ``|ga - gfd| / max(1, |ga|, |gfd|)``.  With ``max_coords`` set, large
    models are checked on a random subsample of at least
    ``max(max_coords, 256)`` coordinates, stratified per tensor.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractViolation("eps must lie in [1e-7, 1e-3]")
    first = loss_fn(params)
    second = loss_fn(params)
    if first.data.tobytes() != second.data.tobytes():
        raise ContractViolation("loss_fn is not deterministic")
    analytic = grad(loss_fn(params), params)

    total = int(np.sum([p.size for p in params]))
    if max_coords is None or total <= max(max_coords, 256):
        coords = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
    else:
        # stratified per tensor; half of each draw comes from coordinates with
        # a non-zero analytic gradient so sparse rows do not dilute the check
        rng = np.random.default_rng(0) if rng is None else rng
        budget = max(max_coords, 256)
        coords = []
        for i, p in enumerate(params):
            k = min(p.size, max(4, int(np.ceil(budget * p.size / total))))
            live = np.flatnonzero(analytic[i].reshape(-1))
            n_live = min(live.size, k // 2)
            pick = set(rng.choice(live, size=n_live, replace=False).tolist()) if n_live else set()
            rest = np.setdiff1d(np.arange(p.size), np.fromiter(pick, dtype=np.int64, count=len(pick)))
            pick.update(rng.choice(rest, size=min(rest.size, k - len(pick)), replace=False).tolist())
            coords.extend((i, j) for j in sorted(pick))

    worst = 0.0
    with no_grad():
        for i, j in coords:
            flat = params[i].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + eps
            up = loss_fn(params).item()
            flat[j] = orig - eps
            down = loss_fn(params).item()
            flat[j] = orig
            fd = (up - down) / (2 * eps)
            ga = analytic[i].reshape(-1)[j]
            worst = max(worst, abs(ga - fd) / max(1.0, abs(ga), abs(fd)))
    return worst
