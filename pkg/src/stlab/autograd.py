"""Reverse-mode automatic differentiation over dense float64 arrays.

Define-by-run: every op builds a fresh node with a backward closure; the
graph lives only as long as the output tensors. No broadcasting beyond
what the model layers actually use.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    """Enable NaN/Inf guards after every forward primitive (slow)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible shapes."""

    def __init__(self, op, *shapes):
        super().__init__(f"{op}: incompatible shapes {shapes}")
        self.op = op
        self.shapes = shapes


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self._consumed = False
        if _DEBUG_CHECKS and not np.all(np.isfinite(self.data)):
            raise FloatingPointError("non-finite values in forward result")

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

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise RuntimeError("second backward on the same graph; re-run the forward pass")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        self._consumed = True

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul_scalar(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), mul_scalar(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, 1.0 / float(other))
        return mul(self, pow_scalar(other, -1.0))

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_scalar(self, float(p))

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data, parents, backward):
    rg = any(p.requires_grad for p in parents)
    if not rg:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)


def _acc(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g, dtype=np.float64)
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ---------------------------------------------------------


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape)

    def bwd(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), bwd)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape)

    def bwd(g):
        _acc(a, _unbroadcast(g * b.data, a.data.shape))
        _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), bwd)


def mul_scalar(a, s: float):
    out = a.data * s

    def bwd(g):
        _acc(a, g * s)

    return _make(out, (a,), bwd)


def pow_scalar(a, p: float):
    out = a.data ** p

    def bwd(g):
        _acc(a, g * p * a.data ** (p - 1.0))

    return _make(out, (a,), bwd)


def exp(a):
    out = np.exp(a.data)

    def bwd(g):
        _acc(a, g * out)

    return _make(out, (a,), bwd)


def log(a):
    out = np.log(a.data)

    def bwd(g):
        _acc(a, g / a.data)

    return _make(out, (a,), bwd)


def tanh(a):
    out = np.tanh(a.data)

    def bwd(g):
        _acc(a, g * (1.0 - out * out))

    return _make(out, (a,), bwd)


def relu(a):
    out = np.maximum(a.data, 0.0)

    def bwd(g):
        _acc(a, g * (a.data > 0.0))

    return _make(out, (a,), bwd)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    # tanh approximation; derivative computed from the same closed form
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        _acc(a, g * d)

    return _make(out, (a,), bwd)


# -- reductions / shape ---------------------------------------------------


def sum_(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            _acc(a, np.broadcast_to(g, a.data.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _acc(a, np.broadcast_to(gg, a.data.shape))

    return _make(out, (a,), bwd)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul_scalar(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    out = a.data.reshape(shape)

    def bwd(g):
        _acc(a, g.reshape(a.data.shape))

    return _make(out, (a,), bwd)


def transpose(a, axes):
    axes = tuple(axes)
    out = a.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        _acc(a, g.transpose(inv))

    return _make(out, (a,), bwd)


def concat(tensors, axis=0):
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _acc(t, g[tuple(sl)])

    return _make(out, tuple(tensors), bwd)


def stack(tensors, axis=0):
    out = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g):
        for i, t in enumerate(tensors):
            _acc(t, np.take(g, i, axis=axis))

    return _make(out, tuple(tensors), bwd)


def take(a, key):
    """General indexing (slices, int arrays, tuples); backward scatter-adds."""
    out = a.data[key]

    def bwd(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, key, g)
            _acc(a, buf)

    return _make(out, (a,), bwd)


# -- linear algebra --------------------------------------------------------


def matmul(a, b):
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = np.matmul(a.data, b.data)

    def bwd(g):
        _acc(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape))
        _acc(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape))

    return _make(out, (a, b), bwd)


def embedding(table, ids):
    """Row lookup into a [V, d] table with an integer id array."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError("embedding", table.shape, ("id range", int(ids.min()), int(ids.max())))
    out = table.data[ids]

    def bwd(g):
        if table.requires_grad:
            buf = np.zeros_like(table.data)
            np.add.at(buf, ids, g)
            _acc(table, buf)

    return _make(out, (table,), bwd)


# -- normalization / softmax ------------------------------------------------


def softmax(a, axis=-1):
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        s = (g * out).sum(axis=axis, keepdims=True)
        _acc(a, out * (g - s))

    return _make(out, (a,), bwd)


def log_softmax(a, axis=-1):
    x = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=axis, keepdims=True))
    out = x - lse

    def bwd(g):
        sm = np.exp(out)
        _acc(a, g - sm * g.sum(axis=axis, keepdims=True))

    return _make(out, (a,), bwd)


def logsumexp(a, axis=-1, keepdims=False):
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out_k = np.log(s) + m
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def bwd(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        _acc(a, gg * (e / s))

    return _make(out, (a,), bwd)


LAYERNORM_EPS = 1e-5


def layer_norm(a, eps=LAYERNORM_EPS):
    """Normalize the last axis to zero mean / unit variance (no affine).

    A zero-variance row maps to zeros: eps sits inside the square root.
    """
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def bwd(g):
        n = a.data.shape[-1]
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * out).mean(axis=-1, keepdims=True)
        _acc(a, inv * (g - gm - out * gym))

    return _make(out, (a,), bwd)


# -- convolution -------------------------------------------------------------


def depthwise_conv1d(x, kernel):
    """Per-channel 1-D convolution with same-length output.

    x: [B, L, C], kernel: [K, C]. Even kernels pad left-heavy
    (ceil((K-1)/2) on the left) so output length equals input length.
    """
    if x.data.ndim != 3 or kernel.data.ndim != 2 or x.data.shape[2] != kernel.data.shape[1]:
        raise ShapeError("depthwise_conv1d", x.shape, kernel.shape)
    B, L, C = x.data.shape
    K = kernel.data.shape[0]
    left = (K - 1 + 1) // 2  # ceil((K-1)/2)
    right = K - 1 - left
    xp = np.pad(x.data, ((0, 0), (left, right), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, K, axis=1)  # [B, L, C, K]
    out = np.einsum("blck,kc->blc", win, kernel.data)

    def bwd(g):
        if kernel.requires_grad:
            _acc(kernel, np.einsum("blck,blc->kc", win, g))
        if x.requires_grad:
            gp = np.zeros_like(xp)
            for k in range(K):
                gp[:, k:k + L, :] += g * kernel.data[k][None, None, :]
            _acc(x, gp[:, left:left + L, :])

    return _make(out, (x, kernel), bwd)


def dropout(a, p: float, rng: np.random.Generator):
    if p <= 0.0:
        return a
    mask = (rng.random(a.data.shape) >= p) / (1.0 - p)
    out = a.data * mask

    def bwd(g):
        _acc(a, g * mask)

    return _make(out, (a,), bwd)


# -- attention ---------------------------------------------------------------

MASK_BIAS = -1e30


def scaled_dot_attention(q, k, v, bias=None):
    """q,k,v: [..., L, dh]; bias: ndarray broadcastable to the score shape
    (use MASK_BIAS at forbidden keys). Returns (output, weights)."""
    dh = q.data.shape[-1]
    scores = matmul(q, transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)))
    scores = mul_scalar(scores, 1.0 / np.sqrt(dh))
    if bias is not None:
        scores = add(scores, Tensor(bias))
    w = softmax(scores, axis=-1)
    return matmul(w, v), w


# -- parameter bookkeeping ----------------------------------------------------

PARTITIONS = ("A-Enc", "T-Enc", "Decoder")
KINDS = ("ATTEN", "FFN", "OTHER")


@dataclass(frozen=True)
class GroupKey:
    partition: str
    layer: int
    kind: str

    def __post_init__(self):
        if self.partition not in PARTITIONS:
            raise ValueError(f"unknown partition {self.partition!r}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown kind {self.kind!r}")

    def __str__(self):
        return f"{self.partition}/{self.layer}/{self.kind}"


@dataclass
class ParamGroup:
    key: GroupKey
    tensors: list = field(default_factory=list)

    @property
    def n_params(self):
        return sum(t.data.size for t in self.tensors)

    def flat_grad(self) -> np.ndarray:
        """Concatenate member grads in construction order."""
        for t in self.tensors:
            if t.grad is None:
                raise RuntimeError(f"missing grad in group {self.key}; run backward first")
        return np.concatenate([t.grad.ravel() for t in self.tensors])

    def has_grads(self) -> bool:
        return all(t.grad is not None for t in self.tensors)


def flatten_grads(groups, predicate=None):
    """Flat gradient vector per matching group, keyed by GroupKey."""
    out = {}
    for g in groups:
        if predicate is None or predicate(g.key):
            out[g.key] = g.flat_grad()
    return out
