"""Decoupled-weight-decay adaptive optimizer, schedule, and gradient clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, UsageError


@dataclass
class ScheduleConfig:
    """Linear warmup to the base rate, then cosine decay to zero."""

    base_rate: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if self.warmup_steps >= self.total_steps:
            raise UsageError(
                f"warmup ({self.warmup_steps}) must be shorter than the run ({self.total_steps})"
            )


def lr_at(step: int, schedule: ScheduleConfig) -> float:
    if schedule.warmup_steps > 0 and step < schedule.warmup_steps:
        return schedule.base_rate * step / schedule.warmup_steps
    span = max(1, schedule.total_steps - schedule.warmup_steps)
    progress = min(1.0, (step - schedule.warmup_steps) / span)
    return schedule.base_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_global_norm(named_params, max_norm: float) -> float:
    """Scale all gradients so their global norm is at most ``max_norm``.

    Returns the pre-clip norm. Non-finite gradients abort with the offending
    parameter names.
    """
    sq = 0.0
    bad = []
    for name, p in named_params:
        if p.grad is None:
            continue
        s = float(np.sum(p.grad.astype(np.float64) ** 2))
        if not math.isfinite(s):
            bad.append(name)
        sq += s
    if bad:
        raise NumericError(f"non-finite gradient in parameters: {', '.join(bad)}")
    norm = math.sqrt(sq)
    if norm > max_norm:
        scale = max_norm / norm
        for _, p in named_params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


class AdamW:
    """Adaptive moments with decoupled weight decay.

    The decay multiplies parameters by ``1 - lr * wd`` before the moment
    update, so zero gradients still shrink the weights and a gradient of g
    moves the parameter by about ``-lr * g / (sqrt(v) + eps)``. Parameters
    whose gradient is absent are skipped entirely. Moments live in one flat
    buffer so the common all-gradients case updates in a few vector ops.
    """

    def __init__(self, named_params, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.05):
        self.named_params = list(named_params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        sizes = [p.size for _, p in self.named_params]
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        self._slices = [slice(offsets[i], offsets[i + 1]) for i in range(len(sizes))]
        dtype = self.named_params[0][1].dtype if self.named_params else np.float32
        self._m = np.zeros(int(offsets[-1]), dtype=dtype)
        self._v = np.zeros(int(offsets[-1]), dtype=dtype)
        self._gbuf = np.empty(int(offsets[-1]), dtype=dtype)

    def _apply(self, lr: float, update: np.ndarray, p) -> None:
        if self.weight_decay:
            p.data *= 1.0 - lr * self.weight_decay
        p.data -= (lr * update).reshape(p.data.shape)
        p.grad = None

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        have = [p.grad is not None for _, p in self.named_params]
        if all(have):
            g = self._gbuf
            for sl, (_, p) in zip(self._slices, self.named_params):
                g[sl] = p.grad.reshape(-1)
            np.multiply(self._m, b1, out=self._m)
            self._m += (1.0 - b1) * g
            np.multiply(self._v, b2, out=self._v)
            self._v += (1.0 - b2) * (g * g)
            update = (self._m / bc1) / (np.sqrt(self._v / bc2) + self.eps)
            for sl, (_, p) in zip(self._slices, self.named_params):
                self._apply(lr, update[sl], p)
            return
        for sl, (_, p), h in zip(self._slices, self.named_params, have):
            if not h:
                continue
            g = p.grad.reshape(-1)
            self._m[sl] = b1 * self._m[sl] + (1.0 - b1) * g
            self._v[sl] = b2 * self._v[sl] + (1.0 - b2) * (g * g)
            update = (self._m[sl] / bc1) / (np.sqrt(self._v[sl] / bc2) + self.eps)
            self._apply(lr, update, p)


def optimizer_step(opt: AdamW, lr: float, clip_norm: float = 3.0) -> float:
    """Clip the global gradient norm, then apply one optimizer update.

    The norm is accumulated in float32 for speed; if that overflows or hits
    a non-finite value the slower float64 path re-checks and reports.
    """
    grads = [p.grad for _, p in opt.named_params]
    if all(g is not None for g in grads):
        sq = 0.0
        for g in grads:
            gf = g.reshape(-1)
            sq += float(np.dot(gf, gf))
        if not math.isfinite(sq):
            norm = clip_global_norm(opt.named_params, clip_norm)
        else:
            norm = math.sqrt(sq)
            if norm > clip_norm:
                scale = clip_norm / norm
                for _, p in opt.named_params:
                    p.grad = p.grad * scale
    else:
        norm = clip_global_norm(opt.named_params, clip_norm)
    opt.step(lr)
    return norm
