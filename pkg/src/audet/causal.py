"""Per-unit deconfounding of the sample confounder.

The conditional probability after backdoor adjustment is approximated by
moving the expectation over sample prototypes inside the prediction function
(the normalized weighted geometric mean step) and implementing the result as
a linear model on the unit feature plus the confounder expectation.

A prototype bank stores one detached feature per training sample. In the
literal reading the bank enters only through its mean, so the attention over
prototypes collapses to a single coefficient of 1. Dictionary mode keeps the
same code path but summarizes the bank by k-means centroids, giving the
attention a non-degenerate support; both modes are selectable.
"""

from __future__ import annotations

import math
import warnings

import numpy as np

from . import tensor as T
from .errors import DimensionError, StateError, UsageError
from .tensor import Tensor


class PrototypeBank:
    """Fixed-capacity store of per-sample features with a running mean.

    Slots are keyed by training-sample index. Features are stored detached
    and in float32 regardless of the training precision; the mean is
    recomputed from the populated slots on every update so it can never
    drift from the slot contents.
    """

    def __init__(self, num_slots: int, dim: int):
        self.slots = np.zeros((num_slots, dim), dtype=np.float32)
        self.filled = np.zeros(num_slots, dtype=bool)
        self._mean = None
        self._centroids = None

    @property
    def num_slots(self) -> int:
        return self.slots.shape[0]

    @property
    def dim(self) -> int:
        return self.slots.shape[1]

    @property
    def count(self) -> int:
        return int(self.filled.sum())

    def _as_feature(self, feature) -> np.ndarray:
        arr = feature.data if isinstance(feature, Tensor) else np.asarray(feature)
        if arr.shape != (self.dim,):
            raise DimensionError(f"bank stores {self.dim}-vectors, got shape {arr.shape}")
        return arr.astype(np.float32)

    def update(self, sample_id: int, feature) -> None:
        if not 0 <= sample_id < self.num_slots:
            raise IndexError(f"sample id {sample_id} outside bank of {self.num_slots} slots")
        self.slots[sample_id] = self._as_feature(feature)
        self.filled[sample_id] = True
        self._recompute_mean()

    def update_many(self, sample_ids, features) -> None:
        features = features.data if isinstance(features, Tensor) else np.asarray(features)
        for i, sid in enumerate(sample_ids):
            if not 0 <= sid < self.num_slots:
                raise IndexError(f"sample id {sid} outside bank of {self.num_slots} slots")
            self.slots[sid] = features[i].astype(np.float32)
            self.filled[sid] = True
        self._recompute_mean()

    def _recompute_mean(self) -> None:
        self._mean = self.slots[self.filled].mean(axis=0)

    @property
    def mean(self) -> np.ndarray:
        if self._mean is None:
            raise StateError("prototype bank is empty; warm-start it before use")
        return self._mean

    def set_dictionary(self, centroids: np.ndarray) -> None:
        centroids = np.asarray(centroids, dtype=np.float32)
        if centroids.ndim != 2 or centroids.shape[1] != self.dim:
            raise DimensionError(f"dictionary must be (M, {self.dim}), got {centroids.shape}")
        self._centroids = centroids

    def refresh_dictionary(self, size: int, seed: int = 0) -> None:
        """Summarize the populated slots by k-means centroids."""
        from scipy.cluster.vq import kmeans2

        pts = self.slots[self.filled].astype(np.float64)
        if pts.shape[0] == 0:
            raise StateError("prototype bank is empty; warm-start it before use")
        k = min(size, pts.shape[0])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            centroids, _ = kmeans2(pts, k, minit="++", seed=seed)
        self.set_dictionary(centroids)

    def prototypes(self, mode: str) -> np.ndarray:
        """Prototype matrix the attention coefficients range over."""
        if mode == "literal":
            return self.mean[None, :]
        if mode == "dictionary":
            if self._centroids is None:
                raise StateError("dictionary mode requires refresh_dictionary or set_dictionary")
            return self._centroids
        raise UsageError(f"unknown causal mode {mode!r}")

    def state(self) -> dict:
        return {"slots": self.slots.copy(), "filled": self.filled.copy()}

    def load_state(self, state: dict) -> None:
        self.slots = np.array(state["slots"], dtype=np.float32)
        self.filled = np.array(state["filled"], dtype=bool)
        self._mean = self.slots[self.filled].mean(axis=0) if self.filled.any() else None


class InterventionHead:
    """Linear intervention model plus the final probability projection.

    The four projection matrices keep the stated (8c, c) shape; ``final`` is
    (outputs, 8c) with a bias. Pass ``final_std=0`` for a zero final layer,
    which makes an untrained head predict probability 0.5 exactly.
    """

    def __init__(self, dim: int, outputs: int, rng, dtype=np.float32,
                 final_std: float = 0.05):
        hid = 8 * dim
        std = 1.0 / math.sqrt(dim)

        def mat():
            return Tensor(rng.normal(0.0, std, size=(hid, dim)).astype(dtype),
                          requires_grad=True)

        self.w_x = mat()
        self.w_z = mat()
        self.w_q = mat()
        self.w_k = mat()
        self.final = Tensor(rng.normal(0.0, final_std, size=(outputs, hid)).astype(dtype),
                            requires_grad=True)
        self.bias = Tensor(np.zeros(outputs, dtype=dtype), requires_grad=True)

    @property
    def dim(self) -> int:
        return self.w_x.shape[1]

    def named_params(self, prefix: str):
        yield prefix + ".w_x", self.w_x
        yield prefix + ".w_z", self.w_z
        yield prefix + ".w_q", self.w_q
        yield prefix + ".w_k", self.w_k
        yield prefix + ".final", self.final
        yield prefix + ".bias", self.bias


def confounder_expectation(f: Tensor, bank: PrototypeBank, head: InterventionHead,
                           mode: str = "literal", prototypes=None):
    """Confounder expectation and attention coefficients for a feature batch.

    ``Q = W_Q f``, ``K = W_K z`` for each prototype z, coefficients are the
    softmax of ``Q K^T / sqrt(8c)``, and the expectation is their weighted
    prototype sum. With the literal single-aggregate bank the softmax runs
    over one logit, so the coefficient is exactly 1 and the expectation is
    the bank mean; the same path serves dictionary mode unchanged.
    """
    protos = bank.prototypes(mode) if prototypes is None else np.asarray(prototypes)
    if protos.ndim != 2 or protos.shape[1] != head.dim:
        raise DimensionError(f"prototypes {protos.shape} do not match head dim {head.dim}")
    protos_t = Tensor(protos.astype(f.dtype))
    q = T.matmul(f, T.transpose(head.w_q, (1, 0)))
    k = T.matmul(protos_t, T.transpose(head.w_k, (1, 0)))
    hid = head.w_q.shape[0]
    logits = T.mul(T.matmul(q, T.transpose(k, (1, 0))), 1.0 / math.sqrt(hid))
    alpha = T.softmax_lastdim(logits)
    e_z = T.matmul(alpha, protos_t)
    return e_z, alpha


def deconfounded_probability(f: Tensor, e_z: Tensor, head: InterventionHead) -> Tensor:
    """Probability of occurrence from the deconfounded feature.

    ``h = W_X f + W_Z E_z`` followed by the final projection and a sigmoid.
    Gradients reach the feature and all head parameters but never the bank,
    which enters only as constant data.
    """
    h = T.add(T.matmul(f, T.transpose(head.w_x, (1, 0))),
              T.matmul(e_z, T.transpose(head.w_z, (1, 0))))
    logits = T.add(T.matmul(h, T.transpose(head.final, (1, 0))), head.bias)
    return T.sigmoid(logits)
