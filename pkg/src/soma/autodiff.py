"""A small reverse-mode differentiation tape over numpy arrays.

Operations are recorded only while a :class:`Tape` is active; outside a tape
the same functions just compute values, which keeps inference cheap.

    with Tape() as tape:
        y = linear(x, W, b)
        loss = total(y)
    grads = tape.backward(loss, [W, b])
"""
from __future__ import annotations

import threading

import numpy as np

_active = threading.local()


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("value", "parents", "backward_fn", "__weakref__")

    def __init__(self, value, parents=(), backward_fn=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape})"


class Tape:
    def __init__(self):
        self.nodes = []
        self._done = False

    def __enter__(self):
        stack = getattr(_active, "stack", None)
        if stack is None:
            stack = _active.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _active.stack.pop()
        return False

    def record(self, node: Tensor) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor, wrt) -> list:
        """Gradients of scalar ``loss`` with respect to each tensor in ``wrt``."""
        if not self.nodes:
            raise TapeError("backward called before any forward computation was recorded")
        if self._done:
            raise TapeError("tape already consumed by a backward pass; run forward again")
        if loss.value.size != 1:
            raise TapeError("loss must be a scalar")
        self._done = True
        keep = {id(t) for t in wrt}
        grads = {id(loss): np.ones_like(loss.value)}
        for node in reversed(self.nodes):
            g = grads.get(id(node)) if id(node) in keep else grads.pop(id(node), None)
            if g is None or node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not isinstance(parent, Tensor):
                    continue
                pg = _unbroadcast(pg, parent.value.shape)
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        self.nodes = []
        return [grads.get(id(t), np.zeros_like(t.value)) for t in wrt]


def _current():
    stack = getattr(_active, "stack", None)
    return stack[-1] if stack else None


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _val(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _make(value, parents, backward_fn) -> Tensor:
    tape = _current()
    if tape is None:
        return Tensor(value)
    out = Tensor(value, parents, backward_fn)
    tape.record(out)
    return out


def param(value) -> Tensor:
    return Tensor(value)


# --- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    return _make(_val(a) + _val(b), (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    return _make(_val(a) - _val(b), (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    return _make(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a, c: float) -> Tensor:
    return _make(_val(a) * c, (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    av = _val(a)
    mask = av > 0
    return _make(np.where(mask, av, 0.0), (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    out = np.exp(_val(a))
    return _make(out, (a,), lambda g: (g * out,))


def log(a, floor: float = 0.0) -> Tensor:
    """Natural log; inputs below ``floor`` are clamped (zero gradient there)."""
    av = _val(a)
    clamped = av < floor
    safe = np.where(clamped, floor, av)
    return _make(np.log(safe), (a,), lambda g: (np.where(clamped, 0.0, g / safe),))


def total(a) -> Tensor:
    av = _val(a)
    return _make(np.sum(av), (a,), lambda g: (np.broadcast_to(g, av.shape),))


def sumsq(a) -> Tensor:
    av = _val(a)
    return _make(np.sum(av * av), (a,), lambda g: (2.0 * g * av,))


# --- shape ---------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    av = _val(a)
    return _make(av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),))


def transpose(a, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(np.transpose(_val(a), axes), (a,), lambda g: (np.transpose(g, inv),))


def split_last(a, n: int) -> list:
    """Split the last axis into ``n`` equal chunks."""
    av = _val(a)
    width = av.shape[-1] // n
    outs = []
    for k in range(n):
        sl = slice(k * width, (k + 1) * width)

        def back(g, sl=sl):
            full = np.zeros_like(av)
            full[..., sl] = g
            return (full,)
        outs.append(_make(av[..., sl], (a,), back))
    return outs


# --- linear algebra ------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes."""
    av, bv = _val(a), _val(b)

    def back(g):
        return g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g
    return _make(av @ bv, (a, b), back)


def linear(x, W, b) -> Tensor:
    """x (..., din) @ W (din, dout) + b (dout,)."""
    xv, Wv, bv = _val(x), _val(W), _val(b)
    out = xv @ Wv + bv

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        return g @ Wv.T, xv.reshape(-1, xv.shape[-1]).T @ g2, g2.sum(axis=0)
    return _make(out, (x, W, b), back)


# --- normalisation -------------------------------------------------------

def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    xv = _val(x)
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = _val(gamma)

    def back(g):
        d = xv.shape[-1]
        gx = g * gv
        dx = inv / d * (d * gx - gx.sum(-1, keepdims=True) - xhat * np.sum(gx * xhat, -1, keepdims=True))
        red = tuple(range(xv.ndim - 1))
        return dx, np.sum(g * xhat, axis=red), np.sum(g, axis=red)
    return _make(xhat * gv + _val(beta), (x, gamma, beta), back)


def softmax(x, bias=None, axis: int = -1) -> Tensor:
    """Numerically stable softmax of ``x + bias``; ``bias`` is a constant mask."""
    z = _val(x) if bias is None else _val(x) + bias
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (p * (g - np.sum(g * p, axis=axis, keepdims=True)),)
    return _make(p, (x,), back)
