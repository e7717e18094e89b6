"""Small parameterized layers shared by the attention blocks and the model."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Linear:
    """Affine map on the trailing feature axis; weight layout is (in, out)."""

    def __init__(self, d_in: int, d_out: int, rng, dtype=np.float32,
                 std: float = 0.02, bias: bool = True, zero: bool = False):
        if zero:
            w = np.zeros((d_in, d_out))
        else:
            w = rng.normal(0.0, std, size=(d_in, d_out))
        self.w = Tensor(w.astype(dtype), requires_grad=True)
        self.b = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.w, self.b)

    def named_params(self, prefix: str):
        yield prefix + ".w", self.w
        if self.b is not None:
            yield prefix + ".b", self.b


class StackedLinear:
    """m independent affine maps evaluated as one batched product.

    Weights are (m, in, out); the input is (m, rows, in) with every branch's
    rows stacked on the leading axis.
    """

    def __init__(self, m: int, d_in: int, d_out: int, rng, dtype=np.float32,
                 std: float = 0.02, zero: bool = False):
        if zero:
            w = np.zeros((m, d_in, d_out))
        else:
            w = rng.normal(0.0, std, size=(m, d_in, d_out))
        self.w = Tensor(w.astype(dtype), requires_grad=True)
        self.b = Tensor(np.zeros((m, 1, d_out), dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.w, self.b)

    def named_params(self, prefix: str):
        yield prefix + ".w", self.w
        yield prefix + ".b", self.b


class StackedLayerNorm:
    """m independent layer norms over the trailing feature axis."""

    def __init__(self, m: int, dim: int, dtype=np.float32):
        self.gain = Tensor(np.ones((m, 1, dim), dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros((m, 1, dim), dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        m = x.shape[0]
        c = x.shape[-1]
        flat = T.reshape(x, m, -1, c)
        out = T.layer_norm(flat, self.gain, self.bias)
        return T.reshape(out, *x.shape)

    def named_params(self, prefix: str):
        yield prefix + ".gain", self.gain
        yield prefix + ".bias", self.bias


class LayerNorm:
    def __init__(self, dim: int, dtype=np.float32):
        self.gain = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)

    def named_params(self, prefix: str):
        yield prefix + ".gain", self.gain
        yield prefix + ".bias", self.bias


def conv_kernel(c_out: int, c_in: int, k: int, rng, dtype=np.float32) -> Tensor:
    """He-normal convolution kernel of shape (c_out, c_in, k, k)."""
    std = np.sqrt(2.0 / (c_in * k * k))
    return Tensor(rng.normal(0.0, std, size=(c_out, c_in, k, k)).astype(dtype),
                  requires_grad=True)


def depthwise_kernel(channels: int, mult: int, k: int, rng, dtype=np.float32) -> Tensor:
    std = np.sqrt(2.0 / (k * k))
    return Tensor(rng.normal(0.0, std, size=(channels * mult, 1, k, k)).astype(dtype),
                  requires_grad=True)


def tokens_to_image(x: Tensor, hw) -> Tensor:
    """(B, N, C) tokens to (B, C, h, w) image layout."""
    h, w = hw
    b, n, c = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1)), b, c, h, w)


def image_to_tokens(x: Tensor):
    """(B, C, h, w) image layout to ((B, N, C) tokens, (h, w))."""
    b, c, h, w = x.shape
    return T.transpose(T.reshape(x, b, c, h * w), (0, 2, 1)), (h, w)


def swap_last_two(x: Tensor) -> Tensor:
    axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    return T.transpose(x, axes)
