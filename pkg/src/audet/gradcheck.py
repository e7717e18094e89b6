"""Central finite-difference checking of analytic gradients."""

from __future__ import annotations

import numpy as np

from .errors import UsageError
from .tensor import Tensor, no_grad


def grad_check(fn, inputs, step: float = 1e-6, max_entries=None, rng=None) -> float:
    """Compare analytic gradients of ``fn`` against central differences.

    ``fn`` is a deterministic closure mapping the given tensors to a scalar
    Tensor. Every coordinate of every input is perturbed by ``+-step`` unless
    ``max_entries`` caps the number of sampled coordinates per input (``rng``
    selects them). Returns the worst relative error, where the error of an
    (analytic, numeric) pair is ``|a - n| / max(1, |a|, |n|)``.
    """
    inputs = list(inputs)
    for t in inputs:
        if t.data.dtype != np.float64:
            raise UsageError("grad_check requires float64 inputs")
        t.grad = None
    out = fn(*inputs)
    if out.size != 1:
        raise UsageError(f"grad_check closure must return a scalar, got {out.shape}")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else np.array(t.grad) for t in inputs]

    worst = 0.0
    for t, ana in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        aflat = ana.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max_entries:
            if rng is None:
                rng = np.random.default_rng(0)
            idxs = np.sort(rng.choice(n, size=max_entries, replace=False))
        else:
            idxs = range(n)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            with no_grad():
                fp = float(fn(*inputs).data)
            flat[i] = orig - step
            with no_grad():
                fm = float(fn(*inputs).data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * step)
            a = aflat[i]
            err = abs(a - num) / max(1.0, abs(a), abs(num))
            if err > worst:
                worst = err
    return worst
