"""Parameter registry, seeded initialisation and the layers the model composes."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import NEG_INF, Tensor

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def splitmix64(seed, n):
    """The first ``n`` outputs of SplitMix64 started from ``seed``.

    state_i = seed + i * 0x9E3779B97F4A7C15 (i = 1..n), then the standard
    xor-shift/multiply finaliser. Pure uint64 arithmetic, so the stream is
    identical on every platform.
    """
    with np.errstate(over="ignore"):
        z = np.uint64(seed) + np.arange(1, n + 1, dtype=np.uint64) * _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def _fnv1a64(text):
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def uniform(seed, name, shape, low, high):
    """Deterministic uniform draws keyed by (seed, parameter name).

    Keying on the name keeps every parameter's initial value independent of
    construction order.
    """
    n = int(np.prod(shape)) if shape else 1
    key = int(splitmix64((seed ^ _fnv1a64(name)) & 0xFFFFFFFFFFFFFFFF, 1)[0])
    bits = splitmix64(key, n) >> np.uint64(11)
    u = bits.astype(np.float64) * (1.0 / 9007199254740992.0)
    return (low + (high - low) * u).reshape(shape)


class ParamRegistry:
    """Named trainable tensors, iterated in sorted-name order."""

    def __init__(self, seed=0, dtype=None):
        self.seed = seed
        self.dtype = np.dtype(dtype or T.default_dtype()).type
        self._params = {}

    def param(self, name, shape, init="xavier"):
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        shape = tuple(shape)
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        elif init == "xavier":
            if len(shape) < 2:
                raise ConfigError(f"xavier init needs a matrix, got {shape} for {name}")
            fan_in = int(np.prod(shape[:-1]))
            fan_out = shape[-1]
            a = math.sqrt(6.0 / (fan_in + fan_out))
            data = uniform(self.seed, name, shape, -a, a)
        else:
            raise ConfigError(f"unknown init {init!r}")
        t = Tensor(data.astype(self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return sorted(self._params)

    def items(self):
        return [(n, self._params[n]) for n in self.names()]

    def values(self):
        return [self._params[n] for n in self.names()]

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def count(self):
        return sum(t.data.size for t in self._params.values())

    def state(self):
        return {n: t.data.copy() for n, t in self.items()}

    def load_state(self, state):
        missing = set(self._params) ^ set(state)
        if missing:
            raise ShapeError(f"parameter sets differ: {sorted(missing)}")
        for n, arr in state.items():
            t = self._params[n]
            if t.shape != tuple(arr.shape):
                raise ShapeError(f"{n}: expected {t.shape}, got {arr.shape}")
            t.data = np.array(arr, dtype=self.dtype)


def linear(x, w, b=None):
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} vs weight {w.shape}")
    out = T.matmul(x, w)
    return out if b is None else out + b


class Linear:
    def __init__(self, reg, name, d_in, d_out, bias=True):
        self.w = reg.param(f"{name}.w", (d_in, d_out))
        self.b = reg.param(f"{name}.b", (d_out,), "zeros") if bias else None

    def __call__(self, x):
        return linear(x, self.w, self.b)


class MaskedMHSA:
    """Multi-head self-attention with an additive mask.

    Heads are column blocks of the d x d projections, so head ``i`` uses
    columns ``i*d_k:(i+1)*d_k`` of ``wq``/``wk``/``wv``. No biases.
    """

    def __init__(self, reg, name, d, heads):
        if heads < 1 or d % heads:
            raise ConfigError(f"d={d} is not divisible by heads={heads}")
        self.d, self.heads, self.dk = d, heads, d // heads
        self.wq = reg.param(f"{name}.wq", (d, d))
        self.wk = reg.param(f"{name}.wk", (d, d))
        self.wv = reg.param(f"{name}.wv", (d, d))
        self.wo = reg.param(f"{name}.wo", (d, d))

    def __call__(self, x, mask=None):
        return mhsa(x, mask, self.heads, self.wq, self.wk, self.wv, self.wo)


def mhsa(x, mask, heads, wq, wk, wv, wo):
    d = x.shape[-1]
    if d % heads:
        raise ConfigError(f"d={d} is not divisible by heads={heads}")
    dk = d // heads
    lead = x.shape[:-1]

    def split(t):
        return T.swapaxes(t.reshape(lead + (heads, dk)), -2, -3)

    q = split(T.matmul(x, wq))
    k = split(T.matmul(x, wk))
    v = split(T.matmul(x, wv))
    scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dk))
    if mask is not None:
        mask = np.expand_dims(np.asarray(mask), -3)
    attn = T.masked_softmax(scores, mask)
    heads_out = T.swapaxes(T.matmul(attn, v), -2, -3).reshape(lead + (d,))
    return T.matmul(heads_out, wo)


class GRUParams:
    """z, r and candidate weights of one GRU direction (Cho et al. form)."""

    def __init__(self, reg, name, d_in, d_h):
        self.d_in, self.d_h = d_in, d_h
        for gate in ("z", "r", "h"):
            setattr(self, f"w_{gate}", reg.param(f"{name}.w_{gate}", (d_in, d_h)))
            setattr(self, f"u_{gate}", reg.param(f"{name}.u_{gate}", (d_h, d_h)))
            setattr(self, f"b_{gate}", reg.param(f"{name}.b_{gate}", (d_h,), "zeros"))


def gru_cell(h_prev, x, p):
    """One step: z=s(Wz x+Uz h+bz), r=s(Wr x+Ur h+br),
    h~=tanh(Wh x+Uh(r*h)+bh), h=(1-z)*h_prev+z*h~."""
    if x.shape[-1] != p.d_in or h_prev.shape[-1] != p.d_h:
        raise ShapeError(f"gru_cell: x {x.shape}, h {h_prev.shape} vs ({p.d_in}, {p.d_h})")
    return _gru_step(h_prev, x @ p.w_z + p.b_z, x @ p.w_r + p.b_r, x @ p.w_h + p.b_h, p)


def _gru_step(h, xz, xr, xh, p):
    z = T.sigmoid(xz + h @ p.u_z)
    r = T.sigmoid(xr + h @ p.u_r)
    cand = T.tanh(xh + (r * h) @ p.u_h)
    return h + z * (cand - h)


def gru_sequence(xs, lengths, p, reverse=False):
    """Run one GRU direction over ``xs`` [B, n, d_in] with per-row lengths.

    Steps at or beyond a row's length leave its state untouched, so the
    forward pass ends at step ``length-1`` and the reverse pass starts there.
    Returns all states [B, n, d_h] and the final state [B, d_h].
    """
    b, n = xs.shape[0], xs.shape[1]
    xz = xs @ p.w_z + p.b_z
    xr = xs @ p.w_r + p.b_r
    xh = xs @ p.w_h + p.b_h
    h = T.Tensor(np.zeros((b, p.d_h), dtype=xs.dtype))
    lengths = np.asarray(lengths)
    states = [None] * n
    steps = range(n - 1, -1, -1) if reverse else range(n)
    for t in steps:
        live = (t < lengths).astype(xs.dtype)[:, None]
        nh = _gru_step(h, xz[:, t], xr[:, t], xh[:, t], p)
        h = nh if live.all() else h + (nh - h) * live
        states[t] = h
    return T.stack(states, axis=1), h


def conv1d(x, weight, bias=None, segments=None):
    """Same-padded 1-D convolution along axis -2.

    ``weight`` is [k, d_in, d_out]; output position t sees offsets
    -(k-1)//2 .. k-1-(k-1)//2. With ``segments`` (int array shaped like
    x.shape[:-1]) a neighbour from a different segment reads as zero, so the
    convolution never crosses an utterance boundary.
    """
    k = weight.shape[0]
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"conv1d: input dim {x.shape[-1]} vs weight {weight.shape}")
    left = (k - 1) // 2
    out = None
    for i in range(k):
        off = i - left
        xs = T.shift(x, off, axis=-2) if off else x
        if off and segments is not None:
            seg = np.asarray(segments)
            n = seg.shape[-1]
            shifted = np.full_like(seg, -1)
            if off > 0:
                shifted[..., : n - off] = seg[..., off:]
            else:
                shifted[..., -off:] = seg[..., : n + off]
            same = (shifted == seg).astype(x.dtype)[..., None]
            xs = xs * same
        term = xs @ weight[i]
        out = term if out is None else out + term
    return out if bias is None else out + bias


def max_pool_rows(x, member):
    """Max over rows of x [..., l, d] for each group in member [..., G, l].

    Groups with no member rows come out as zeros.
    """
    member = np.asarray(member, dtype=bool)
    penalty = np.where(member, 0.0, NEG_INF).astype(x.dtype)[..., None]
    pooled = T.max_(T.reshape(x, x.shape[:-2] + (1,) + x.shape[-2:]) + penalty, axis=-2)
    present = member.any(axis=-1)
    if present.all():
        return pooled
    return pooled * present[..., None].astype(x.dtype)


def mean_pool_rows(x, member):
    member = np.asarray(member, dtype=x.dtype)
    counts = np.maximum(member.sum(axis=-1, keepdims=True), 1.0)
    return T.matmul(T.Tensor(member / counts), x)


class LayerNorm:
    def __init__(self, reg, name, d):
        self.gamma = reg.param(f"{name}.gamma", (d,), "ones")
        self.beta = reg.param(f"{name}.beta", (d,), "zeros")

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta)
