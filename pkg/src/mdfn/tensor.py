"""A small reverse-mode autodiff engine over numpy arrays.

Every op takes and returns :class:`Tensor`. An op records its parents and a
closure mapping the output gradient to one gradient per parent; ``backward``
walks the graph in reverse topological order.
"""
from __future__ import annotations

import contextlib

import numpy as np

from .errors import DegenerateRow, ShapeError, StaleGraph

NEG_INF = -1e9

_state = {"dtype": np.float32, "grad_enabled": True}


def default_dtype():
    return _state["dtype"]


def set_default_dtype(dtype):
    _state["dtype"] = np.dtype(dtype).type


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for new parameters and constants."""
    old = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_used", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(default_dtype())
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._used = False
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self, registry=None):
        backward(self, registry)

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else default_dtype()
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward_fn):
    # op outputs are already float arrays; skip the constructor's conversions
    out = Tensor.__new__(Tensor)
    out.data = data if isinstance(data, np.ndarray) else np.asarray(data)
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    out._used = False
    out.name = None
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss, registry=None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    When ``registry`` is given, parameters the loss does not reach get a
    zero gradient instead of ``None``.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._used:
        raise StaleGraph("backward already ran on this graph; rebuild the forward pass")
    loss._used = True

    order = []
    seen = set()
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

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = g.astype(node.data.dtype, copy=True)
            else:
                node.grad = node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
        # free the graph so a second backward cannot silently reuse it
        node._parents = ()
        node._backward = None

    if registry is not None:
        for t in registry.values():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)


# ---------------------------------------------------------------- elementwise

def _grads(a, b, fa, fb):
    # skip work for constant operands
    return (fa() if a.requires_grad else None, fb() if b.requires_grad else None)


def add(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: _grads(a, b, lambda: _unbroadcast(g, sa), lambda: _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: _grads(a, b, lambda: _unbroadcast(g, sa), lambda: _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: _grads(a, b, lambda: _unbroadcast(g * bd, ad.shape),
                                  lambda: _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: _grads(a, b, lambda: _unbroadcast(g / bd, ad.shape),
                                  lambda: _unbroadcast(-g * out / bd, bd.shape)))


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def exp(x):
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x):
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def relu(x):
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def sigmoid(x):
    out = _sigmoid(x.data)
    return _make(out, (x,), lambda g: (g * out * (1 - out),))


def _sigmoid(z):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def tanh(x):
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1 - out * out),))


# ---------------------------------------------------------------- shape ops

def matmul(a, b):
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")
    if bd.ndim == 2 and ad.ndim > 2:
        # [..., k] @ [k, n]: fold the leading dims into one 2-D product
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def back2(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make(out, (a, b), back2)

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), back)


def reshape(x, shape):
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x, a1, a2):
    return _make(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), back)


def getitem(x, idx):
    shape, dtype = x.shape, x.dtype

    def back(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), back)


def embedding(table, ids):
    """Row lookup ``table[ids]`` with a scatter-add backward."""
    ids = np.asarray(ids)
    shape = table.shape

    def back(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (out,)

    return _make(table.data[ids], (table,), back)


def shift(x, offset, axis=-2):
    """out[..., t, ...] = x[..., t + offset, ...], zero where out of range."""
    n = x.shape[axis]
    out = np.zeros_like(x.data)
    src = [slice(None)] * x.ndim
    dst = [slice(None)] * x.ndim
    if offset >= 0:
        src[axis], dst[axis] = slice(offset, n), slice(0, max(n - offset, 0))
    else:
        src[axis], dst[axis] = slice(0, n + offset), slice(-offset, n)
    src, dst = tuple(src), tuple(dst)
    out[dst] = x.data[src]

    def back(g):
        gx = np.zeros_like(g)
        gx[src] = g[dst]
        return (gx,)

    return _make(out, (x,), back)


# ---------------------------------------------------------------- reductions

def sum_(x, axis=None, keepdims=False):
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), back)


def mean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def max_(x, axis, keepdims=False):
    """Max along one axis; the gradient goes to the first maximal entry."""
    xd = x.data
    arg = np.argmax(xd, axis=axis)
    out = np.take_along_axis(xd, np.expand_dims(arg, axis), axis)
    if not keepdims:
        out = np.squeeze(out, axis)

    def back(g):
        gx = np.zeros_like(xd)
        if not keepdims:
            g = np.expand_dims(g, axis)
        np.put_along_axis(gx, np.expand_dims(arg, axis), g, axis)
        return (gx,)

    return _make(out, (x,), back)


# ---------------------------------------------------------------- softmax family

def masked_softmax(scores, mask=None, axis=-1):
    """Softmax of ``scores + mask`` along ``axis``.

    ``mask`` is a constant additive array holding 0 or NEG_INF. A row with no
    zero entry raises :class:`DegenerateRow`.
    """
    z = scores.data
    if mask is not None:
        mask = np.asarray(mask)
        if not (mask > NEG_INF / 2).any(axis=axis).all():
            raise DegenerateRow("a softmax row is masked everywhere")
        z = z + mask.astype(z.dtype, copy=False)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (scores,), back)


def softmax(x, axis=-1):
    return masked_softmax(x, None, axis)


def log_softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def back(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), back)


def softmax_cross_entropy(logits, targets, clamp=1e-12):
    """Mean over rows of -log(softmax(logits)[target]).

    The probability is floored at ``clamp`` so a saturated wrong prediction
    yields a large finite loss.
    """
    targets = np.asarray(targets)
    n = logits.shape[0]
    logp = log_softmax(logits, axis=-1)
    picked = logp[np.arange(n), targets]
    floor = np.log(clamp)
    if (picked.data < floor).any():
        picked = clamp_min(picked, floor)
    return mul(sum_(picked), -1.0 / n)


def clamp_min(x, lo):
    keep = x.data >= lo
    return _make(np.where(keep, x.data, lo).astype(x.dtype), (x,), lambda g: (g * keep,))


def layer_norm(x, gamma, beta, eps=1e-5):
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = xd.shape[-1]

    def back(g):
        gg = _unbroadcast(g * xhat, gamma.shape)
        gb = _unbroadcast(g, beta.shape)
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / n)
        return gx, gg, gb

    return _make(out, (x, gamma, beta), back)
