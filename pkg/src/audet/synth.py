"""Synthetic dataset generator for end-to-end verification.

Each pseudo-unit is a pair of Gaussian blobs at fixed symmetric locations;
a unit's occurrence draws the blobs into the image, so detection requires
looking at the right places. Optional confounder modes add a global tint
that correlates with one unit's label when generating a training split but
is independent on an evaluation split, planting a measurable sample bias.
Landmarks are the fixed blob anchors plus two reference points whose
distance serves as the offset scale.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import SpecificationError, UsageError


@dataclass
class CooccurRule:
    """Pairwise label dependency: unit b follows (or excludes) unit a."""

    a: int
    b: int
    kind: str = "together"   # together | excludes
    prob: float = 1.0


@dataclass
class ConfounderMode:
    """Global tint correlated with one unit's label in the training split."""

    tint: tuple = (0.25, 0.0, -0.08)
    au: int = 0
    strength: float = 0.9


@dataclass
class SynthSpec:
    side: int = 56
    num_aus: int = 4
    subcenters: list = None          # per unit: ((x, y), (x, y))
    eye_corners: tuple = ((21.5, 10.5), (34.5, 10.5))
    blob_sigma: float = 2.2
    blob_amp: float = 0.55
    occur_probs: list = None
    cooccur: list = field(default_factory=list)
    confounders: list = field(default_factory=list)
    background: float = 0.35
    noise: float = 0.08

    def __post_init__(self):
        if self.subcenters is None:
            self.subcenters = _default_subcenters(self.side, self.num_aus)
        if self.occur_probs is None:
            self.occur_probs = [0.5] * self.num_aus

    def validate(self) -> None:
        if len(self.subcenters) != self.num_aus:
            raise SpecificationError(
                f"{self.num_aus} units but {len(self.subcenters)} sub-center pairs"
            )
        for pair in self.subcenters:
            for x, y in pair:
                if not (0 <= x < self.side and 0 <= y < self.side):
                    raise SpecificationError(f"sub-center ({x}, {y}) outside {self.side}px image")
        if len(self.occur_probs) != self.num_aus:
            raise SpecificationError("occurrence probabilities must cover every unit")
        for p in self.occur_probs:
            if not 0.0 <= p <= 1.0:
                raise SpecificationError(f"occurrence probability {p} outside [0, 1]")
        kinds = {}
        for rule in self.cooccur:
            if rule.kind not in ("together", "excludes"):
                raise SpecificationError(f"unknown co-occurrence kind {rule.kind!r}")
            if not (0 <= rule.a < self.num_aus and 0 <= rule.b < self.num_aus):
                raise SpecificationError(f"co-occurrence rule references unknown unit: {rule}")
            key = frozenset((rule.a, rule.b))
            if kinds.get(key, rule.kind) != rule.kind:
                raise SpecificationError(
                    f"contradictory co-occurrence rules for units {sorted(key)}"
                )
            kinds[key] = rule.kind
        for mode in self.confounders:
            if not 0 <= mode.au < self.num_aus:
                raise SpecificationError(f"confounder references unknown unit {mode.au}")
            if not 0.0 <= mode.strength <= 1.0:
                raise SpecificationError(f"confounder strength {mode.strength} outside [0, 1]")


def _default_subcenters(side: int, num_aus: int) -> list:
    # two symmetric anchors per unit, laid out like facial rows, all at least
    # side/7 away from the borders so random crops keep the blobs visible
    base = [
        ((0.28, 0.26), (0.72, 0.26)),
        ((0.21, 0.46), (0.79, 0.46)),
        ((0.35, 0.63), (0.65, 0.63)),
        ((0.42, 0.76), (0.58, 0.76)),
        ((0.30, 0.88), (0.70, 0.88)),
        ((0.50, 0.36), (0.50, 0.55)),
    ]
    if num_aus > len(base):
        raise SpecificationError(f"default layout supports up to {len(base)} units")
    return [tuple((round(x * side) + 0.5, round(y * side) + 0.5) for x, y in pair)
            for pair in base[:num_aus]]


def default_spec(side: int = 56, num_aus: int = 4, confounded: bool = False) -> SynthSpec:
    spec = SynthSpec(side=side, num_aus=num_aus)
    if confounded:
        spec.confounders = [ConfounderMode()]
    spec.validate()
    return spec


def sample_labels(spec: SynthSpec, n: int, rng, correlated: bool):
    """Unit occurrences plus per-sample tint vectors.

    ``correlated`` switches the confounder between training behaviour (tint
    follows the correlated unit's label with the configured strength) and
    evaluation behaviour (tint active with probability one half regardless).
    """
    spec.validate()
    labels = (rng.random((n, spec.num_aus)) < np.asarray(spec.occur_probs)).astype(np.uint8)
    for rule in spec.cooccur:
        apply = rng.random(n) < rule.prob
        if rule.kind == "together":
            labels[apply, rule.b] = labels[apply, rule.a]
        else:
            hit = apply & (labels[:, rule.a] == 1)
            labels[hit, rule.b] = 0
    tints = np.zeros((n, 3), dtype=np.float32)
    for mode in spec.confounders:
        if correlated:
            follow = rng.random(n) < mode.strength
            active = np.where(follow, labels[:, mode.au], 1 - labels[:, mode.au])
        else:
            active = (rng.random(n) < 0.5).astype(np.uint8)
        tints += active[:, None].astype(np.float32) * np.asarray(mode.tint, dtype=np.float32)
    return labels, tints


def _blob_maps(spec: SynthSpec) -> np.ndarray:
    side = spec.side
    ys, xs = np.mgrid[0:side, 0:side].astype(np.float64)
    maps = np.zeros((spec.num_aus, side, side), dtype=np.float32)
    for j, pair in enumerate(spec.subcenters):
        for cx, cy in pair:
            d2 = (xs - cx) ** 2 + (ys - cy) ** 2
            maps[j] += (spec.blob_amp * np.exp(-d2 / (2.0 * spec.blob_sigma ** 2))).astype(np.float32)
    return maps


def render_images(spec: SynthSpec, labels: np.ndarray, tints: np.ndarray, rng) -> np.ndarray:
    n = labels.shape[0]
    side = spec.side
    blobs = _blob_maps(spec)
    imgs = rng.uniform(-spec.noise, spec.noise, size=(n, 3, side, side)).astype(np.float32)
    imgs += spec.background
    signal = np.tensordot(labels.astype(np.float32), blobs, axes=([1], [0]))
    imgs += signal[:, None, :, :]
    imgs += tints[:, :, None, None]
    return np.clip(imgs, 0.0, 1.0)


def landmark_points(spec: SynthSpec) -> np.ndarray:
    pts = [spec.eye_corners[0], spec.eye_corners[1]]
    for pair in spec.subcenters:
        pts.extend(pair)
    return np.array(pts, dtype=np.float64)


def rules_text(spec: SynthSpec) -> str:
    """Scheme block for the generated landmarks: anchors with zero offsets."""
    m = spec.num_aus
    mirror = [1, 0]
    for j in range(m):
        mirror += [3 + 2 * j, 2 + 2 * j]
    lines = [
        "# generated sub-center rules for the synthetic scheme",
        f"scheme=synth{m}",
        "eyes=0,1",
        "mirror=" + ",".join(str(v) for v in mirror),
    ]
    for j in range(m):
        lines.append(f"au={j + 1} left={2 + 2 * j} right={3 + 2 * j} dx=0.0 dy=0.0")
    return "\n".join(lines) + "\n"


def synth_generate(spec: SynthSpec, n: int, seed: int, out_dir,
                   split: str = "train") -> str:
    """Write a dataset directory; reproducible from (spec, n, seed, split)."""
    if n <= 0:
        raise UsageError(f"sample count must be positive, got {n}")
    if split not in ("train", "eval"):
        raise UsageError(f"split must be train or eval, got {split!r}")
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0 if split == "train" else 1]))
    labels, tints = sample_labels(spec, n, rng, correlated=(split == "train"))

    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    pts = landmark_points(spec)
    flat = ",".join(f"{v:.2f}" for v in pts.reshape(-1))
    ids = [f"s{i:05d}" for i in range(n)]

    with open(os.path.join(out_dir, "labels.csv"), "w", encoding="utf-8") as fh:
        for sid, row in zip(ids, labels):
            fh.write(sid + "," + ",".join(str(int(v)) for v in row) + "\n")
    with open(os.path.join(out_dir, "landmarks.csv"), "w", encoding="utf-8") as fh:
        for sid in ids:
            fh.write(sid + "," + flat + "\n")
    with open(os.path.join(out_dir, "rules.txt"), "w", encoding="utf-8") as fh:
        fh.write(rules_text(spec))
    with open(os.path.join(out_dir, "meta.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"scheme=synth{spec.num_aus}\n")
        fh.write("aus=" + ",".join(str(j + 1) for j in range(spec.num_aus)) + "\n")
        fh.write(f"side={spec.side}\n")
        fh.write("rules=rules.txt\n")

    chunk = 256
    for k in range(0, n, chunk):
        imgs = render_images(spec, labels[k:k + chunk], tints[k:k + chunk], rng)
        for off, img in enumerate(imgs):
            arr = (img * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)
            Image.fromarray(arr, "RGB").save(
                os.path.join(out_dir, "images", ids[k + off] + ".png"))
    return str(out_dir)
