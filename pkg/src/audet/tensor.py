"""Dense tensors with reverse-mode automatic differentiation.

The engine is deliberately small: a :class:`Tensor` wraps a numpy array,
operations record closures on the output node, and ``Tensor.backward`` walks
the graph once in reverse topological order. Two precisions are supported by
construction: float64 for gradient checking and tests, float32 for training
runs. Broadcasting is restricted to leading batch dimensions; any other shape
mismatch raises :class:`~audet.errors.DimensionError`.

Layout conventions used by the rest of the package: image tensors are
``(batch, channels, height, width)`` and token tensors are
``(batch, tokens, channels)``.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf as _erf
from scipy.special import expit as _expit

from .errors import DimensionError, NumericError, UsageError

_GRAD_ENABLED = True

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


@contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """N-dimensional array node of the differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._prev = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_(self, p)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, *shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def backward(self) -> None:
        """Populate ``grad`` on every requiring leaf reachable from this scalar.

        The graph is traversed exactly once in reverse topological order and
        freed afterwards; intermediate gradients are released as soon as
        their node has been processed.
        """
        if self.size != 1:
            raise UsageError(f"backward requires a scalar loss, got shape {self.shape}")
        topo = []
        seen = {id(self)}
        stack = [(self, iter(self._prev))]
        while stack:
            node, it = stack[-1]
            advanced = False
            for p in it:
                if id(p) not in seen:
                    seen.add(id(p))
                    stack.append((p, iter(p._prev)))
                    advanced = True
                    break
            if not advanced:
                topo.append(node)
                stack.pop()
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            fn = node._backward
            if fn is not None and node.grad is not None:
                fn(node.grad)
            if node._prev:
                node._prev = ()
                node._backward = None
                if node is not self:
                    node.grad = None


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _make(data: np.ndarray, parents, grad_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED:
        prev = tuple(p for p in parents if p.requires_grad)
        if prev:
            out.requires_grad = True
            out._prev = prev
            out._backward = grad_fn
    return out


def _leading_only(shape, out_shape) -> bool:
    # broadcast axes of an operand must form a leading prefix of ones
    pad = len(out_shape) - len(shape)
    p = (1,) * pad + tuple(shape)
    t = 0
    while t < len(p) and p[t] == 1:
        t += 1
    return p[t:] == tuple(out_shape[t:])


def _check_broadcast(sa, sb) -> tuple:
    n = max(len(sa), len(sb))
    pa = (1,) * (n - len(sa)) + tuple(sa)
    pb = (1,) * (n - len(sb)) + tuple(sb)
    out = []
    for da, db in zip(pa, pb):
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"shapes {sa} and {sb} are not compatible")
        out.append(max(da, db))
    out = tuple(out)
    if not (_leading_only(sa, out) and _leading_only(sb, out)):
        raise DimensionError(
            f"broadcast of {sa} and {sb} is not limited to leading batch dimensions"
        )
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and reduction operations


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        data = a.data + b

        def gfn(g):
            _accum(a, g)

        return _make(data, (a,), gfn)

    _check_broadcast(a.shape, b.shape)
    data = a.data + b.data

    def gfn(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.shape))

    return _make(data, (a, b), gfn)


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -b)
    _check_broadcast(a.shape, b.shape)
    data = a.data - b.data

    def gfn(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.shape))

    return _make(data, (a, b), gfn)


def neg(a: Tensor) -> Tensor:
    def gfn(g):
        _accum(a, -g)

    return _make(-a.data, (a,), gfn)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        data = a.data * b

        def gfn(g):
            _accum(a, g * b)

        return _make(data, (a,), gfn)

    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data
    data = ad * bd

    def gfn(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * bd, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * ad, b.shape))

    return _make(data, (a, b), gfn)


def div(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / b)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data
    data = ad / bd

    def gfn(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / bd, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * data / bd, b.shape))

    return _make(data, (a, b), gfn)


def pow_(a: Tensor, p) -> Tensor:
    ad = a.data
    data = ad ** p

    def gfn(g):
        _accum(a, g * p * ad ** (p - 1))

    return _make(data, (a,), gfn)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def gfn(g):
        _accum(a, g * data)

    return _make(data, (a,), gfn)


def log(a: Tensor) -> Tensor:
    ad = a.data
    if np.any(ad <= 0.0):
        raise NumericError("log requires strictly positive input")
    data = np.log(ad)

    def gfn(g):
        _accum(a, g / ad)

    return _make(data, (a,), gfn)


def sigmoid(a: Tensor) -> Tensor:
    data = _expit(a.data)

    def gfn(g):
        _accum(a, g * data * (1.0 - data))

    return _make(data, (a,), gfn)


def gelu(a: Tensor) -> Tensor:
    """Exact error-function form of the Gaussian-error linear unit."""
    ad = a.data
    phi = 0.5 * (1.0 + _erf(ad * _INV_SQRT2))
    data = ad * phi

    def gfn(g):
        _accum(a, g * (phi + ad * np.exp(-0.5 * ad * ad) * _INV_SQRT2PI))

    return _make(data, (a,), gfn)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    ad = a.data
    data = np.clip(ad, lo, hi)

    def gfn(g):
        _accum(a, g * ((ad >= lo) & (ad <= hi)))

    return _make(data, (a,), gfn)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ad = a.data
    data = ad.sum(axis=axis, keepdims=keepdims)

    def gfn(g):
        if axis is None:
            ga = np.broadcast_to(g.reshape((1,) * ad.ndim), ad.shape)
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            ga = np.broadcast_to(gg, ad.shape)
        _accum(a, ga)

    return _make(data, (a,), gfn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ad = a.data
    data = ad.mean(axis=axis, keepdims=keepdims)
    count = ad.size if axis is None else data.size and ad.size // data.size

    def gfn(g):
        if axis is None:
            ga = np.broadcast_to((g / count).reshape((1,) * ad.ndim), ad.shape)
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            ga = np.broadcast_to(gg / count, ad.shape)
        _accum(a, ga)

    return _make(data, (a,), gfn)


# ---------------------------------------------------------------------------
# linear algebra and shape operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError(f"matmul requires matrices, got {a.shape} x {b.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    _check_broadcast(ad.shape[:-2], bd.shape[:-2])
    data = ad @ bd

    def gfn(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape))

    return _make(data, (a, b), gfn)


def linear(x: Tensor, w: Tensor, b: Tensor = None) -> Tensor:
    """Fused affine map ``x @ w + b`` on the trailing feature axis.

    ``w`` may carry leading batch axes matching x (stacked weights); the bias
    broadcasts from any shape reachable by summing, e.g. ``(out,)`` or
    ``(m, 1, out)`` against an ``(m, r, out)`` product.
    """
    xd, wd = x.data, w.data
    if xd.shape[-1] != wd.shape[-2]:
        raise DimensionError(f"linear inner dimensions disagree: {x.shape} x {w.shape}")
    data = xd @ wd
    if b is not None:
        if b.shape[-1] != wd.shape[-1]:
            raise DimensionError(f"bias {b.shape} does not match output width {wd.shape[-1]}")
        data = data + b.data

    def gfn(g):
        if x.requires_grad:
            _accum(x, _unbroadcast(g @ np.swapaxes(wd, -1, -2), xd.shape))
        if w.requires_grad:
            _accum(w, _unbroadcast(np.swapaxes(xd, -1, -2) @ g, wd.shape))
        if b is not None and b.requires_grad:
            _accum(b, _unbroadcast(g, b.shape))

    parents = (x, w) if b is None else (x, w, b)
    return _make(data, parents, gfn)


def reshape(a: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    orig = a.data.shape
    data = a.data.reshape(shape)

    def gfn(g):
        _accum(a, g.reshape(orig))

    return _make(data, (a,), gfn)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = a.data.transpose(axes)

    def gfn(g):
        _accum(a, g.transpose(inv))

    return _make(data, (a,), gfn)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def gfn(g):
        pieces = np.split(g, splits, axis=axis)
        for t, p in zip(tensors, pieces):
            if t.requires_grad:
                _accum(t, p)

    return _make(data, tuple(tensors), gfn)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax along the last dimension, stabilized by max subtraction."""
    xd = x.data
    if xd.shape[-1] < 1:
        raise DimensionError("softmax requires a non-empty last dimension")
    if not np.all(np.isfinite(xd)):
        raise NumericError("softmax input contains non-finite values")
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def gfn(g):
        dot = np.sum(g * out, axis=-1, keepdims=True)
        _accum(x, out * (g - dot))

    return _make(out, (x,), gfn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the trailing feature axis, then apply the affine pair.

    The affine parameters are ``(C,)`` vectors, or carry extra leading axes
    (such as a stacked ``(m, 1, C)``) that broadcast against the normalized
    input; their gradients sum back over the broadcast axes.
    """
    xd = x.data
    c = xd.shape[-1]
    if gain.shape[-1] != c or bias.shape != gain.shape:
        raise DimensionError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match feature size {c}"
        )
    if np.broadcast_shapes(gain.shape, xd.shape) != xd.shape:
        raise DimensionError(f"affine shape {gain.shape} does not broadcast over input {x.shape}")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def gfn(g):
        if gain.requires_grad:
            _accum(gain, _unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            _accum(bias, _unbroadcast(g, bias.shape))
        if x.requires_grad:
            dxh = g * gain.data
            m1 = dxh.mean(axis=-1, keepdims=True)
            m2 = (dxh * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv * (dxh - m1 - xhat * m2))

    return _make(data, (x, gain, bias), gfn)


# ---------------------------------------------------------------------------
# convolution and spatial operations


def _pad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _conv_windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``(B,C,H,W)`` input with an ``(O,C,kh,kw)`` kernel.

    Output spatial size is ``floor((in + 2*pad - k) / stride) + 1``. A 3-d
    input is treated as a single unbatched image.
    """
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d operands, got {x.shape} and {kernel.shape}")
    kd = kernel.data
    B, C, H, W = xd.shape
    O, Ck, kh, kw = kd.shape
    if Ck != C:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise DimensionError(
            f"kernel {kernel.shape} larger than padded input {x.shape} (padding={padding})"
        )
    xp = _pad2d(xd, padding)
    win = _conv_windows(xp, kh, kw, stride)
    out = np.tensordot(win, kd, axes=([1, 4, 5], [1, 2, 3]))  # (B,Ho,Wo,O)
    out = np.moveaxis(out, -1, 1)
    Ho, Wo = out.shape[-2:]
    s, p = stride, padding

    def gfn(g):
        g4 = g[None] if squeeze else g
        if kernel.requires_grad:
            _accum(kernel, np.tensordot(g4, win, axes=([0, 2, 3], [0, 2, 3])))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for u in range(kh):
                for v in range(kw):
                    contrib = np.tensordot(g4, kd[:, :, u, v], axes=([1], [0]))
                    dxp[:, :, u:u + s * Ho:s, v:v + s * Wo:s] += np.moveaxis(contrib, -1, 1)
            dx = dxp[:, :, p:p + H, p:p + W] if p else dxp
            _accum(x, dx[0] if squeeze else dx)

    return _make(out[0] if squeeze else out, (x, kernel), gfn)


def depthwise_conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel convolution; kernel ``(C*t, 1, kh, kw)`` holds t filters per channel.

    Output channel ``c*t + r`` is produced from input channel ``c`` with
    filter ``r``, matching grouped-convolution semantics with C groups.
    """
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    kd = kernel.data
    if xd.ndim != 4 or kd.ndim != 4 or kd.shape[1] != 1:
        raise DimensionError(
            f"depthwise_conv2d expects (B,C,H,W) and (C*t,1,kh,kw), got {x.shape} and {kernel.shape}"
        )
    B, C, H, W = xd.shape
    Cm, _, kh, kw = kd.shape
    if Cm % C != 0:
        raise DimensionError(
            f"depthwise kernel channels {Cm} not a multiple of input channels {C}"
        )
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise DimensionError(
            f"kernel {kernel.shape} larger than padded input {x.shape} (padding={padding})"
        )
    t = Cm // C
    kr = kd.reshape(C, t, kh, kw)
    xp = _pad2d(xd, padding)
    Hp, Wp = xp.shape[-2:]
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    s, p = stride, padding

    # sum of shifted slices beats an im2col product for per-channel kernels
    out5 = np.zeros((B, C, t, Ho, Wo), dtype=xd.dtype)
    for u in range(kh):
        for v in range(kw):
            sl = xp[:, :, u:u + s * Ho:s, v:v + s * Wo:s]
            out5 += sl[:, :, None] * kr[None, :, :, u, v, None, None]
    out = out5.reshape(B, Cm, Ho, Wo)

    def gfn(g):
        g4 = g[None] if squeeze else g
        g5 = g4.reshape(B, C, t, Ho, Wo)
        need_dx = x.requires_grad
        dxp = np.zeros_like(xp) if need_dx else None
        if kernel.requires_grad:
            dk = np.zeros_like(kr)
        else:
            dk = None
        for u in range(kh):
            for v in range(kw):
                sl = xp[:, :, u:u + s * Ho:s, v:v + s * Wo:s]
                if dk is not None:
                    dk[:, :, u, v] = (sl[:, :, None] * g5).sum(axis=(0, 3, 4))
                if need_dx:
                    contrib = (g5 * kr[None, :, :, u, v, None, None]).sum(axis=2)
                    dxp[:, :, u:u + s * Ho:s, v:v + s * Wo:s] += contrib
        if dk is not None:
            _accum(kernel, dk.reshape(Cm, 1, kh, kw))
        if need_dx:
            dx = dxp[:, :, p:p + H, p:p + W] if p else dxp
            _accum(x, dx[0] if squeeze else dx)

    return _make(out[0] if squeeze else out, (x, kernel), gfn)


def _shuffle_fwd(d: np.ndarray, r: int) -> np.ndarray:
    *lead, C, H, W = d.shape
    nl = len(lead)
    c = C // (r * r)
    d = d.reshape(*lead, c, r, r, H, W)
    perm = tuple(range(nl)) + (nl, nl + 3, nl + 1, nl + 4, nl + 2)
    return d.transpose(perm).reshape(*lead, c, H * r, W * r)


def _shuffle_bwd(d: np.ndarray, r: int) -> np.ndarray:
    *lead, c, Hr, Wr = d.shape
    nl = len(lead)
    H, W = Hr // r, Wr // r
    d = d.reshape(*lead, c, H, r, W, r)
    perm = tuple(range(nl)) + (nl, nl + 2, nl + 4, nl + 1, nl + 3)
    return d.transpose(perm).reshape(*lead, c * r * r, H, W)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Rearrange ``(..., C*r^2, H, W)`` into ``(..., C, H*r, W*r)``.

    ``out[..., c, h*r+i, w*r+j] = in[..., c*r^2 + i*r + j, h, w]``; exactly
    inverted by :func:`pixel_unshuffle`.
    """
    if x.data.ndim < 3:
        raise DimensionError(f"pixel_shuffle expects at least 3 dims, got {x.shape}")
    C = x.data.shape[-3]
    if C % (r * r) != 0:
        raise DimensionError(f"channel count {C} not divisible by r^2={r * r}")
    data = _shuffle_fwd(x.data, r)

    def gfn(g):
        _accum(x, _shuffle_bwd(g, r))

    return _make(data, (x,), gfn)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    if x.data.ndim < 3:
        raise DimensionError(f"pixel_unshuffle expects at least 3 dims, got {x.shape}")
    H, W = x.data.shape[-2:]
    if H % r != 0 or W % r != 0:
        raise DimensionError(f"spatial size {(H, W)} not divisible by r={r}")
    data = _shuffle_bwd(x.data, r)

    def gfn(g):
        _accum(x, _shuffle_fwd(g, r))

    return _make(data, (x,), gfn)


def adaptive_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean of ``(..., C, H, W)``, returning ``(..., C)``."""
    if x.data.ndim < 3:
        raise DimensionError(f"adaptive_avg_pool expects at least 3 dims, got {x.shape}")
    H, W = x.data.shape[-2:]
    data = x.data.mean(axis=(-2, -1))

    def gfn(g):
        _accum(x, np.broadcast_to((g / (H * W))[..., None, None], x.data.shape))

    return _make(data, (x,), gfn)
