"""Self-attention blocks with recordable weight distributions.

Each block is pre-norm residual: attention with an upsampled value path, then
an MLP. Keys and values may be spatially reduced by a strided depthwise
convolution; the value path is restored to full resolution by a depthwise
convolution followed by a pixel shuffle, so the attention output and the
upsample path add at the input resolution.

The attention weights of a designated block are averaged over channels and
regressed onto landmark-derived prior maps with a KL divergence loss, which
is how location knowledge constrains the otherwise free attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, NumericError
from .layers import (
    LayerNorm,
    Linear,
    StackedLayerNorm,
    StackedLinear,
    depthwise_kernel,
    image_to_tokens,
    swap_last_two,
    tokens_to_image,
)
from .tensor import Tensor


@dataclass
class BlockConfig:
    dim: int
    heads: int
    sr_ratio: int = 1
    up_factor: int = None
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.up_factor is None:
            self.up_factor = self.sr_ratio
        if self.dim % self.heads != 0:
            raise ConfigurationError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.up_factor != self.sr_ratio:
            raise ConfigurationError(
                f"up_factor {self.up_factor} must restore the K/V reduction {self.sr_ratio}"
            )


def scaled_attention(q: Tensor, k: Tensor, v: Tensor, up=None):
    """Scaled dot-product attention, exposing the weight distribution.

    ``q`` is (..., n, d); ``k`` and ``v`` are (..., n_r, d). Returns
    ``(A, out)`` with ``A = softmax(q k^T / sqrt(d))`` along the last
    dimension and ``out = A v`` plus, when given, the upsample path ``up(v)``.
    """
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[-1] != d:
        raise DimensionError(
            f"head dimensions disagree: q {q.shape}, k {k.shape}, v {v.shape}"
        )
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"k/v token counts disagree: {k.shape} vs {v.shape}")
    logits = T.mul(T.matmul(q, swap_last_two(k)), 1.0 / math.sqrt(d))
    attn = T.softmax_lastdim(logits)
    out = T.matmul(attn, v)
    if up is not None:
        out = T.add(out, up(v))
    return attn, out


class Emsav2Attention:
    """Multi-head attention with reduced K/V and an upsampled value path."""

    def __init__(self, cfg: BlockConfig, rng, dtype=np.float32):
        self.cfg = cfg
        dim, sr = cfg.dim, cfg.sr_ratio
        self.q = Linear(dim, dim, rng, dtype)
        self.k = Linear(dim, dim, rng, dtype)
        self.v = Linear(dim, dim, rng, dtype)
        self.proj = Linear(dim, dim, rng, dtype)
        if sr > 1:
            self.sr_kernel = depthwise_kernel(dim, 1, 3, rng, dtype)
            self.sr_norm = LayerNorm(dim, dtype)
        else:
            self.sr_kernel = None
            self.sr_norm = None
        self.up_kernel = depthwise_kernel(dim, sr * sr, 3, rng, dtype)
        self.up_norm = LayerNorm(dim, dtype)

    def _split_heads(self, x: Tensor) -> Tensor:
        b, n, c = x.shape
        h = self.cfg.heads
        return T.transpose(T.reshape(x, b, n, h, c // h), (0, 2, 1, 3))

    def _merge_heads(self, x: Tensor) -> Tensor:
        b, h, n, d = x.shape
        return T.reshape(T.transpose(x, (0, 2, 1, 3)), b, n, h * d)

    def forward(self, x: Tensor, hw):
        h, w = hw
        sr = self.cfg.sr_ratio
        q = self._split_heads(self.q(x))
        if sr > 1:
            img = tokens_to_image(x, hw)
            red = T.depthwise_conv2d(img, self.sr_kernel, stride=sr, padding=1)
            kv_tokens, hw_r = image_to_tokens(red)
            kv_tokens = self.sr_norm(kv_tokens)
        else:
            kv_tokens, hw_r = x, hw
        k = self._split_heads(self.k(kv_tokens))
        v = self._split_heads(self.v(kv_tokens))
        attn, ctx = scaled_attention(q, k, v)
        out = self._merge_heads(ctx)
        v_img = tokens_to_image(self._merge_heads(v), hw_r)
        up = T.depthwise_conv2d(v_img, self.up_kernel, stride=1, padding=1)
        up = T.pixel_shuffle(up, sr)
        up_tokens, _ = image_to_tokens(up)
        out = T.add(out, self.up_norm(up_tokens))
        return self.proj(out), attn

    def named_params(self, prefix: str):
        yield from self.q.named_params(prefix + ".q")
        yield from self.k.named_params(prefix + ".k")
        yield from self.v.named_params(prefix + ".v")
        yield from self.proj.named_params(prefix + ".proj")
        if self.sr_kernel is not None:
            yield prefix + ".sr_kernel", self.sr_kernel
            yield from self.sr_norm.named_params(prefix + ".sr_norm")
        yield prefix + ".up_kernel", self.up_kernel
        yield from self.up_norm.named_params(prefix + ".up_norm")


class Mlp:
    def __init__(self, dim: int, ratio: int, rng, dtype=np.float32):
        self.fc1 = Linear(dim, dim * ratio, rng, dtype)
        self.fc2 = Linear(dim * ratio, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))

    def named_params(self, prefix: str):
        yield from self.fc1.named_params(prefix + ".fc1")
        yield from self.fc2.named_params(prefix + ".fc2")


class Emsav2Block:
    """Pre-norm residual block: x + SA(norm(x)), then + MLP(norm(.))."""

    def __init__(self, cfg: BlockConfig, rng, dtype=np.float32):
        self.cfg = cfg
        self.norm1 = LayerNorm(cfg.dim, dtype)
        self.attn = Emsav2Attention(cfg, rng, dtype)
        self.norm2 = LayerNorm(cfg.dim, dtype)
        self.mlp = Mlp(cfg.dim, cfg.mlp_ratio, rng, dtype)

    def forward(self, x: Tensor, hw):
        sa, attn = self.attn.forward(self.norm1(x), hw)
        x = T.add(x, sa)
        x = T.add(x, self.mlp(self.norm2(x)))
        return x, attn

    def named_params(self, prefix: str):
        yield from self.norm1.named_params(prefix + ".norm1")
        yield from self.attn.named_params(prefix + ".attn")
        yield from self.norm2.named_params(prefix + ".norm2")
        yield from self.mlp.named_params(prefix + ".mlp")


class Emsav2BlockStack:
    """m structurally identical residual blocks evaluated as one batch.

    Used by the per-unit branch stage (reduction factor 1): tokens are
    (m, B, N, C) with each unit's parameters stacked on the leading axis; the
    math per unit matches :class:`Emsav2Block` exactly.
    """

    def __init__(self, m: int, cfg: BlockConfig, rng, dtype=np.float32):
        if cfg.sr_ratio != 1:
            raise ConfigurationError("stacked blocks support reduction factor 1 only")
        self.m = m
        self.cfg = cfg
        dim = cfg.dim
        self.norm1 = StackedLayerNorm(m, dim, dtype)
        self.q = StackedLinear(m, dim, dim, rng, dtype)
        self.k = StackedLinear(m, dim, dim, rng, dtype)
        self.v = StackedLinear(m, dim, dim, rng, dtype)
        self.proj = StackedLinear(m, dim, dim, rng, dtype)
        self.up_kernel = depthwise_kernel(m * dim, 1, 3, rng, dtype)
        self.up_norm = StackedLayerNorm(m, dim, dtype)
        self.norm2 = StackedLayerNorm(m, dim, dtype)
        self.fc1 = StackedLinear(m, dim, dim * cfg.mlp_ratio, rng, dtype)
        self.fc2 = StackedLinear(m, dim * cfg.mlp_ratio, dim, rng, dtype)

    def _heads(self, x: Tensor, b: int, n: int) -> Tensor:
        h = self.cfg.heads
        d = self.cfg.dim // h
        return T.transpose(T.reshape(x, self.m, b, n, h, d), (0, 1, 3, 2, 4))

    def forward(self, x: Tensor, hw):
        m, b, n, c = x.shape
        gh, gw = hw
        xn = self.norm1(x)
        flat = T.reshape(xn, m, b * n, c)
        q = self._heads(self.q(flat), b, n)
        k = self._heads(self.k(flat), b, n)
        v = self._heads(self.v(flat), b, n)
        attn, ctx = scaled_attention(q, k, v)
        out = T.reshape(T.transpose(ctx, (0, 1, 3, 2, 4)), m, b, n, c)
        # value path: fold units into channels so the depthwise kernel stays per-unit
        v_tokens = T.reshape(T.transpose(v, (0, 1, 3, 2, 4)), m, b, n, c)
        v_img = T.reshape(T.transpose(v_tokens, (1, 0, 3, 2)), b, m * c, gh, gw)
        up = T.depthwise_conv2d(v_img, self.up_kernel, stride=1, padding=1)
        up = T.pixel_shuffle(up, 1)
        up_tokens = T.transpose(T.reshape(up, b, m, c, n), (1, 0, 3, 2))
        out = T.add(out, self.up_norm(up_tokens))
        x = T.add(x, self.proj(T.reshape(out, m, b * n, c)).reshape(m, b, n, c))
        mlp_in = T.reshape(self.norm2(x), m, b * n, c)
        mlp_out = self.fc2(T.gelu(self.fc1(mlp_in)))
        x = T.add(x, T.reshape(mlp_out, m, b, n, c))
        return x, attn

    def named_params(self, prefix: str):
        yield from self.norm1.named_params(prefix + ".norm1")
        yield from self.q.named_params(prefix + ".q")
        yield from self.k.named_params(prefix + ".k")
        yield from self.v.named_params(prefix + ".v")
        yield from self.proj.named_params(prefix + ".proj")
        yield prefix + ".up_kernel", self.up_kernel
        yield from self.up_norm.named_params(prefix + ".up_norm")
        yield from self.norm2.named_params(prefix + ".norm2")
        yield from self.fc1.named_params(prefix + ".fc1")
        yield from self.fc2.named_params(prefix + ".fc2")


def average_attention(attn: Tensor):
    """Mean of the k*(G*G) attention channels, reshaped to the (G, G) grid.

    ``attn`` is (B, k, N, N) or (k, N, N) from the constrained block, where
    N = G*G; each channel is a distribution so the mean is one too.
    """
    squeeze = attn.ndim == 3
    a = T.reshape(attn, 1, *attn.shape) if squeeze else attn
    b, k, n, n2 = a.shape
    if n != n2:
        raise DimensionError(f"constrained attention must be square, got {attn.shape}")
    g = int(round(math.sqrt(n)))
    if g * g != n:
        raise ConfigurationError(f"token count {n} is not a square grid")
    avg = T.mean(T.reshape(a, b, k * n, n), axis=1)
    avg = T.reshape(avg, b, g, g)
    return T.reshape(avg, g, g) if squeeze else avg


def _kl_terms(prior: np.ndarray, avg: Tensor) -> Tensor:
    # sum over cells/batch of gt*log(gt) - gt*log(avg); gt is a constant
    if np.any(prior <= 0.0):
        raise NumericError("prior maps must be strictly positive for the KL loss")
    const = float(np.sum(prior * np.log(prior)))
    cross = T.sum_(T.mul(T.log(avg), Tensor(prior)))
    return T.add(T.neg(cross), const)


def attention_regression_loss(avgs, priors) -> Tensor:
    """KL regression of the per-unit average attention onto its prior map.

    ``avgs`` is a list of m Tensors (B, G, G); ``priors`` is an (B, m, G, G)
    array. The sum of per-cell KL terms is normalized by m * G * G and
    averaged over the batch; gradients flow only into the averages.
    """
    priors = np.asarray(priors)
    m = len(avgs)
    if priors.shape[1] != m:
        raise DimensionError(f"{m} attention averages but priors have shape {priors.shape}")
    b, _, gh, gw = priors.shape
    total = None
    for j, avg in enumerate(avgs):
        if avg.shape != (b, gh, gw):
            raise DimensionError(
                f"average attention {avg.shape} does not match priors {priors.shape}"
            )
        term = _kl_terms(priors[:, j], avg)
        total = term if total is None else T.add(total, term)
    return T.mul(total, 1.0 / (m * gh * gw * b))


def average_attention_stacked(attn: Tensor) -> Tensor:
    """Channel average for stacked attention (m, B, k, N, N) -> (m, B, G, G)."""
    m, b, k, n, n2 = attn.shape
    if n != n2:
        raise DimensionError(f"constrained attention must be square, got {attn.shape}")
    g = int(round(math.sqrt(n)))
    if g * g != n:
        raise ConfigurationError(f"token count {n} is not a square grid")
    avg = T.mean(T.reshape(attn, m, b, k * n, n), axis=2)
    return T.reshape(avg, m, b, g, g)


def attention_regression_loss_stacked(avg_stack: Tensor, priors) -> Tensor:
    """Stacked form of :func:`attention_regression_loss`; same normalization."""
    priors = np.asarray(priors)
    b, m, gh, gw = priors.shape
    if avg_stack.shape != (m, b, gh, gw):
        raise DimensionError(f"stacked averages {avg_stack.shape} vs priors {priors.shape}")
    gt = np.ascontiguousarray(priors.transpose(1, 0, 2, 3))
    term = _kl_terms(gt, avg_stack)
    return T.mul(term, 1.0 / (m * gh * gw * b))


def attention_regression_loss_each_stacked(raw_stack: Tensor, priors) -> Tensor:
    """Stacked per-channel constraint over (m, B, k, N, N) raw attention."""
    priors = np.asarray(priors)
    b, m, gh, gw = priors.shape
    n = gh * gw
    mm, bb, k, nn, n2 = raw_stack.shape
    if (mm, bb, nn, n2) != (m, b, n, n):
        raise DimensionError(f"raw attention {raw_stack.shape} does not match priors {priors.shape}")
    channels = T.reshape(raw_stack, m, b, k * n, n)
    gt = np.broadcast_to(
        priors.transpose(1, 0, 2, 3).reshape(m, b, 1, n), (m, b, k * n, n)).copy()
    term = _kl_terms(gt, channels)
    return T.mul(term, 1.0 / (k * n * m * n * b))


def attention_regression_loss_each(raws, priors) -> Tensor:
    """Per-channel variant: every attention channel is regressed onto the prior.

    ``raws`` is a list of m Tensors (B, k, N, N); the per-channel KL terms are
    averaged over the k*N channels before the same normalization as the
    averaged variant.
    """
    priors = np.asarray(priors)
    m = len(raws)
    b, _, gh, gw = priors.shape
    n = gh * gw
    total = None
    for j, raw in enumerate(raws):
        bb, k, nn, n2 = raw.shape
        if bb != b or nn != n or n2 != n:
            raise DimensionError(f"raw attention {raw.shape} does not match priors {priors.shape}")
        channels = T.reshape(raw, b, k * nn, n)
        gt = np.broadcast_to(priors[:, j].reshape(b, 1, n), (b, k * nn, n)).copy()
        term = T.mul(_kl_terms(gt, channels), 1.0 / (k * nn))
        total = term if total is None else T.add(total, term)
    return T.mul(total, 1.0 / (m * n * b))
