"""Full detection network: stem, two shared stages, per-unit branches.

The shared trunk halves the resolution three times, so the branch stage sees
an ``(l/8) x (l/8)`` token grid whose attention maps are directly comparable
with the landmark priors. Each branch runs its own copy of the third stage;
the penultimate branch block is the one whose attention is recorded and
constrained. Branch features feed either a plain linear probability head or
the per-unit causal intervention head, depending on the selected variant.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

import math

from . import tensor as T
from .attention import (
    BlockConfig,
    Emsav2Block,
    Emsav2BlockStack,
    attention_regression_loss_each_stacked,
    attention_regression_loss_stacked,
    average_attention_stacked,
)
from .causal import InterventionHead, PrototypeBank, confounder_expectation, deconfounded_probability
from .errors import ConfigurationError, DimensionError, UsageError
from .layers import (
    LayerNorm,
    StackedLayerNorm,
    StackedLinear,
    conv_kernel,
    image_to_tokens,
    tokens_to_image,
)
from .losses import au_detection_loss, total_loss
from .tensor import Tensor


@dataclass
class VariantFlags:
    """Ablation switches: constraint mode, intervention placement, bank policy."""

    constraint: str = "avg"        # none | avg | each
    intervention: str = "per_au"   # none | per_au | shared
    bank_update: str = "dynamic"   # dynamic | static
    attention_loss: bool = True


_VARIANTS = {
    "B": VariantFlags("none", "none", "dynamic", False),
    "Av": VariantFlags("avg", "none", "dynamic", True),
    "Ae": VariantFlags("each", "none", "dynamic", True),
    "AC2D": VariantFlags("avg", "per_au", "dynamic", True),
    "AvCes": VariantFlags("avg", "per_au", "static", True),
    "AvCsd": VariantFlags("avg", "shared", "dynamic", True),
}

_VARIANT_ALIASES = {
    "b": "B", "b-net": "B",
    "av": "Av", "av-net": "Av", "aᵛ": "Av", "aᵛ-net": "Av",
    "ae": "Ae", "ae-net": "Ae", "aᵉ": "Ae", "aᵉ-net": "Ae",
    "ac2d": "AC2D", "ac²d": "AC2D",
    "avces": "AvCes", "avce(s)": "AvCes", "aᵛcᵉ⁽ˢ⁾": "AvCes",
    "avcsd": "AvCsd", "avcs(d)": "AvCsd", "aᵛcˢ⁽ᵈ⁾": "AvCsd",
}

VARIANT_NAMES = tuple(_VARIANTS)


def variant_flags(name: str) -> VariantFlags:
    key = _VARIANT_ALIASES.get(name.lower().strip(), name)
    if key not in _VARIANTS:
        raise UsageError(f"unknown variant {name!r}; known: {', '.join(_VARIANTS)}")
    f = _VARIANTS[key]
    return VariantFlags(f.constraint, f.intervention, f.bank_update, f.attention_loss)


@dataclass
class ModelConfig:
    """Architecture and loss hyperparameters plus the ablation flags."""

    m: int = 12
    c: int = 64
    k: int = 4
    l: int = 176
    n1: int = 1
    n2: int = 6
    n3: int = 3
    delta: float = 3.0
    lambda_a: float = 1.28e4
    stage_widths: tuple = None
    stage_heads: tuple = None
    sr_ratios: tuple = (2, 2, 1)
    mlp_ratio: int = 4
    causal_mode: str = "literal"   # literal | dictionary
    dict_size: int = 8
    variant: VariantFlags = field(default_factory=VariantFlags)

    def __post_init__(self):
        if self.stage_widths is None:
            self.stage_widths = (self.c // 2, self.c // 2, self.c)
        if self.stage_heads is None:
            self.stage_heads = (1, 2, self.k)
        self.stage_widths = tuple(self.stage_widths)
        self.stage_heads = tuple(self.stage_heads)
        self.sr_ratios = tuple(self.sr_ratios)

    @property
    def grid_side(self) -> int:
        return self.l // 8

    def validate(self) -> None:
        if self.l % 8 != 0:
            raise ConfigurationError(f"l must be divisible by 8, got l={self.l}")
        if self.c % self.k != 0:
            raise ConfigurationError(f"c={self.c} must be divisible by k={self.k}")
        if self.n3 < 2:
            raise ConfigurationError(f"n3 must be at least 2 so a penultimate block exists, got n3={self.n3}")
        if self.m < 1:
            raise ConfigurationError(f"m must be positive, got m={self.m}")
        if self.sr_ratios[2] != 1:
            raise ConfigurationError(
                f"the branch stage needs reduction factor 1 so attention matches the prior grid, got {self.sr_ratios[2]}"
            )
        grids = (self.l // 4, self.l // 8, self.l // 8)
        for i, (g, sr, width, heads) in enumerate(
                zip(grids, self.sr_ratios, self.stage_widths, self.stage_heads), start=1):
            if width % heads != 0:
                raise ConfigurationError(f"stage {i} width {width} not divisible by heads {heads}")
            if g % sr != 0:
                raise ConfigurationError(
                    f"stage {i} token grid {g} not divisible by its reduction factor {sr} (l={self.l})"
                )
        if self.variant.constraint not in ("none", "avg", "each"):
            raise ConfigurationError(f"unknown constraint mode {self.variant.constraint!r}")
        if self.variant.intervention not in ("none", "per_au", "shared"):
            raise ConfigurationError(f"unknown intervention mode {self.variant.intervention!r}")
        if self.variant.bank_update not in ("dynamic", "static"):
            raise ConfigurationError(f"unknown bank policy {self.variant.bank_update!r}")
        if self.causal_mode not in ("literal", "dictionary"):
            raise ConfigurationError(f"unknown causal mode {self.causal_mode!r}")


def select_variant(config: ModelConfig, name: str) -> ModelConfig:
    """Copy of ``config`` with the named ablation variant's flags."""
    return replace(config, variant=variant_flags(name))


def desk_config(m: int = 4, variant: str = "AC2D") -> ModelConfig:
    """Small profile sized so the full pipeline runs on a CPU in minutes."""
    cfg = ModelConfig(m=m, c=32, k=4, l=48, n1=1, n2=2, n3=2,
                      delta=1.2, lambda_a=120.0)
    return select_variant(cfg, variant)


def paper_config(m: int = 12, variant: str = "AC2D") -> ModelConfig:
    return select_variant(ModelConfig(m=m), variant)


@dataclass
class ForwardOutput:
    """Per-unit quantities are stacked on a leading unit axis."""

    probs: Tensor                    # (B, m), each strictly inside (0, 1)
    avg_attention: Tensor            # (m, B, G, G), each map sums to 1
    features: Tensor                 # (m, B, c)
    raw_attention: Tensor = None     # (m, B, k, N, N) when recorded
    alphas: Tensor = None            # intervention coefficients, when applicable
    shared_feature: Tensor = None


class _PatchEmbed:
    def __init__(self, c_in, c_out, stride, rng, dtype):
        self.kernel = conv_kernel(c_out, c_in, 3, rng, dtype)
        self.norm = LayerNorm(c_out, dtype)
        self.stride = stride

    def forward(self, img: Tensor):
        out = T.conv2d(img, self.kernel, stride=self.stride, padding=1)
        tokens, hw = image_to_tokens(out)
        return self.norm(tokens), hw

    def named_params(self, prefix):
        yield prefix + ".kernel", self.kernel
        yield from self.norm.named_params(prefix + ".norm")


class _BranchStack:
    """All m third-stage branch copies, evaluated as one stacked computation.

    Every unit keeps its own parameters; they are stored stacked so the m
    branches run as a single batched pass instead of a Python loop.
    """

    def __init__(self, cfg: ModelConfig, rng, dtype):
        m = cfg.m
        w2, w3 = cfg.stage_widths[1], cfg.stage_widths[2]
        self.m, self.w3 = m, w3
        self.embed_kernel = conv_kernel(m * w3, w2, 3, rng, dtype)
        self.embed_norm = StackedLayerNorm(m, w3, dtype)
        bc = BlockConfig(w3, cfg.stage_heads[2], cfg.sr_ratios[2], mlp_ratio=cfg.mlp_ratio)
        self.blocks = [Emsav2BlockStack(m, bc, rng, dtype) for _ in range(cfg.n3)]
        self.constrained_index = cfg.n3 - 2
        self.final_norm = StackedLayerNorm(m, w3, dtype)

    def forward(self, rich_img: Tensor):
        b = rich_img.shape[0]
        out = T.conv2d(rich_img, self.embed_kernel, stride=1, padding=1)
        gh, gw = out.shape[-2:]
        n = gh * gw
        tokens = T.transpose(T.reshape(out, b, self.m, self.w3, n), (1, 0, 3, 2))
        tokens = self.embed_norm(tokens)
        attn = None
        for i, blk in enumerate(self.blocks):
            tokens, a = blk.forward(tokens, (gh, gw))
            if i == self.constrained_index:
                attn = a
        tokens = self.final_norm(tokens)
        features = T.mean(tokens, axis=2)
        return features, attn

    def named_params(self, prefix):
        yield prefix + ".embed_kernel", self.embed_kernel
        yield from self.embed_norm.named_params(prefix + ".embed_norm")
        for i, blk in enumerate(self.blocks):
            yield from blk.named_params(f"{prefix}.block{i}")
        yield from self.final_norm.named_params(prefix + ".final_norm")


class StackedInterventionHead:
    """Per-unit intervention heads with parameters stacked on the unit axis.

    Mirrors :class:`~audet.causal.InterventionHead` exactly, unit by unit:
    matrices are (m, 8c, c) and the final projection is zero-initialized.
    """

    def __init__(self, m: int, dim: int, rng, dtype=np.float32,
                 final_std: float = 0.05):
        hid = 8 * dim
        std = 1.0 / math.sqrt(dim)
        self.hid = hid

        def mats():
            return Tensor(rng.normal(0.0, std, size=(m, hid, dim)).astype(dtype),
                          requires_grad=True)

        self.w_x = mats()
        self.w_z = mats()
        self.w_q = mats()
        self.w_k = mats()
        # a small random final projection lets per-sample signal reach the
        # trunk from step 0; a zero projection stalls for many epochs at
        # desk scale because the pooled feature is dominated by its mean
        self.final = Tensor(rng.normal(0.0, final_std, size=(m, hid, 1)).astype(dtype),
                            requires_grad=True)
        self.bias = Tensor(np.zeros((m, 1, 1), dtype=dtype), requires_grad=True)

    def forward(self, feats: Tensor, prototypes: np.ndarray):
        """feats (m, B, c), prototypes (m, M, c) -> (probs (B, m), alphas (m, B, M))."""
        protos = Tensor(prototypes.astype(feats.dtype))
        q = T.matmul(feats, T.transpose(self.w_q, (0, 2, 1)))
        k = T.matmul(protos, T.transpose(self.w_k, (0, 2, 1)))
        logits = T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(self.hid))
        alpha = T.softmax_lastdim(logits)
        e_z = T.matmul(alpha, protos)
        h = T.add(T.matmul(feats, T.transpose(self.w_x, (0, 2, 1))),
                  T.matmul(e_z, T.transpose(self.w_z, (0, 2, 1))))
        out = T.linear(h, self.final, self.bias)
        m, b, _ = out.shape
        probs = T.sigmoid(T.transpose(T.reshape(out, m, b), (1, 0)))
        return probs, alpha

    def named_params(self, prefix):
        yield prefix + ".w_x", self.w_x
        yield prefix + ".w_z", self.w_z
        yield prefix + ".w_q", self.w_q
        yield prefix + ".w_k", self.w_k
        yield prefix + ".final", self.final
        yield prefix + ".bias", self.bias


class Model:
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = dtype
        w1, w2, w3 = config.stage_widths
        streams = np.random.SeedSequence(seed).spawn(6)
        rngs = [np.random.default_rng(s) for s in streams]
        r_stem, r_stage1, r_stage2, r_heads, r_shared, r_branches = rngs

        self.stem_kernel = conv_kernel(w1, 3, 3, r_stem, dtype)
        self.stem_norm = LayerNorm(w1, dtype)
        self.patch1 = _PatchEmbed(w1, w1, 2, r_stage1, dtype)
        bc1 = BlockConfig(w1, config.stage_heads[0], config.sr_ratios[0], mlp_ratio=config.mlp_ratio)
        self.stage1 = [Emsav2Block(bc1, r_stage1, dtype) for _ in range(config.n1)]
        self.patch2 = _PatchEmbed(w1, w2, 2, r_stage2, dtype)
        bc2 = BlockConfig(w2, config.stage_heads[1], config.sr_ratios[1], mlp_ratio=config.mlp_ratio)
        self.stage2 = [Emsav2Block(bc2, r_stage2, dtype) for _ in range(config.n2)]
        self.branches = _BranchStack(config, r_branches, dtype)
        self.head = None
        self.shared_head = None
        if config.variant.intervention == "per_au":
            self.head = StackedInterventionHead(config.m, w3, r_heads, dtype)
        elif config.variant.intervention == "none":
            self.head = StackedLinear(config.m, w3, 1, r_heads, dtype, std=0.05)
        else:
            self.shared_head = InterventionHead(w2, config.m, r_shared, dtype)
        self.banks = None

        # spatial bookkeeping: three halvings must land on the prior grid
        side = config.l
        for _ in range(3):
            side = (side + 2 - 3) // 2 + 1
        if side != config.grid_side:
            raise ConfigurationError(
                f"stage arithmetic yields grid {side}, expected l/8 = {config.grid_side}"
            )

    # ------------------------------------------------------------------
    def init_banks(self, num_samples: int) -> None:
        """Create empty prototype banks sized to the training set."""
        v = self.config.variant
        if v.intervention == "per_au":
            dim = self.config.stage_widths[2]
            self.banks = [PrototypeBank(num_samples, dim) for _ in range(self.config.m)]
        elif v.intervention == "shared":
            self.banks = [PrototypeBank(num_samples, self.config.stage_widths[1])]
        else:
            self.banks = []

    def update_banks(self, sample_ids, out: ForwardOutput) -> None:
        v = self.config.variant
        if v.intervention == "per_au":
            for j, bank in enumerate(self.banks):
                bank.update_many(sample_ids, out.features.data[j])
        elif v.intervention == "shared":
            self.banks[0].update_many(sample_ids, out.shared_feature.data)

    def _stacked_prototypes(self) -> np.ndarray:
        return np.stack([bank.prototypes(self.config.causal_mode) for bank in self.banks])

    def refresh_dictionaries(self, seed: int = 0) -> None:
        if self.config.causal_mode == "dictionary" and self.banks:
            for i, bank in enumerate(self.banks):
                bank.refresh_dictionary(self.config.dict_size, seed=seed + i)

    # ------------------------------------------------------------------
    def _backbone(self, images, keep_raw: bool):
        cfg = self.config
        if not isinstance(images, Tensor):
            images = Tensor(np.asarray(images, dtype=self.dtype))
        if images.ndim != 4 or images.shape[1:] != (3, cfg.l, cfg.l):
            raise DimensionError(
                f"expected batch of (3, {cfg.l}, {cfg.l}) images, got {images.shape}"
            )
        x = T.conv2d(images, self.stem_kernel, stride=2, padding=1)
        tokens, hw = image_to_tokens(x)
        tokens = T.gelu(self.stem_norm(tokens))
        x = tokens_to_image(tokens, hw)
        tokens, hw = self.patch1.forward(x)
        for blk in self.stage1:
            tokens, _ = blk.forward(tokens, hw)
        x = tokens_to_image(tokens, hw)
        tokens, hw = self.patch2.forward(x)
        for blk in self.stage2:
            tokens, _ = blk.forward(tokens, hw)
        rich_img = tokens_to_image(tokens, hw)

        feats, attn = self.branches.forward(rich_img)
        avgs = average_attention_stacked(attn)
        shared_feature = None
        if self.config.variant.intervention == "shared":
            shared_feature = T.mean(tokens, axis=1)
        return feats, avgs, attn if keep_raw else None, shared_feature

    def extract_features(self, images) -> ForwardOutput:
        """Branch features without the probability heads (bank warm-start path)."""
        feats, avgs, raws, shared = self._backbone(images, keep_raw=False)
        return ForwardOutput(probs=None, avg_attention=avgs, features=feats,
                             shared_feature=shared)

    def forward(self, images, record_raw: bool = False) -> ForwardOutput:
        cfg = self.config
        keep_raw = record_raw or cfg.variant.constraint == "each"
        feats, avgs, raws, shared_feature = self._backbone(images, keep_raw)

        alphas = None
        if cfg.variant.intervention == "per_au":
            if self.banks is None:
                raise UsageError("banks not initialized; call init_banks first")
            prob_matrix, alphas = self.head.forward(feats, self._stacked_prototypes())
        elif cfg.variant.intervention == "shared":
            if self.banks is None:
                raise UsageError("banks not initialized; call init_banks first")
            e_z, alphas = confounder_expectation(
                shared_feature, self.banks[0], self.shared_head, mode=cfg.causal_mode)
            prob_matrix = deconfounded_probability(shared_feature, e_z, self.shared_head)
        else:
            out = self.head(feats)  # (m, B, 1)
            m, b, _ = out.shape
            prob_matrix = T.sigmoid(T.transpose(T.reshape(out, m, b), (1, 0)))

        return ForwardOutput(
            probs=prob_matrix,
            avg_attention=avgs,
            features=feats,
            raw_attention=raws,
            alphas=alphas,
            shared_feature=shared_feature,
        )

    # ------------------------------------------------------------------
    def named_params(self):
        params = []
        params.append(("stem.kernel", self.stem_kernel))
        params.extend(self.stem_norm.named_params("stem.norm"))
        params.extend(self.patch1.named_params("patch1"))
        for i, blk in enumerate(self.stage1):
            params.extend(blk.named_params(f"stage1.block{i}"))
        params.extend(self.patch2.named_params("patch2"))
        for i, blk in enumerate(self.stage2):
            params.extend(blk.named_params(f"stage2.block{i}"))
        params.extend(self.branches.named_params("branches"))
        if self.head is not None:
            params.extend(self.head.named_params("head"))
        if self.shared_head is not None:
            params.extend(self.shared_head.named_params("shared_head"))
        return params

    def param_count(self) -> int:
        return sum(p.size for _, p in self.named_params())

    def load_param_arrays(self, arrays: dict) -> None:
        from .errors import VersionError

        for name, p in self.named_params():
            if name not in arrays:
                raise VersionError(f"checkpoint is missing parameter {name}")
            arr = arrays[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise VersionError(
                    f"checkpoint parameter {name} has shape {arr.shape}, expected {p.shape}"
                )
            p.data = arr.astype(self.dtype)


def build(config: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    return Model(config, seed=seed, dtype=dtype)


def forward_with_losses(model: Model, images, priors, labels, stats,
                        record_raw: bool = False):
    """One forward pass plus the variant's losses.

    ``priors`` is (B, m, G, G) and may be None for variants without the
    attention loss; returns ``(output, {"l_u", "l_a", "total"})`` where
    ``l_a`` is None when unused.
    """
    cfg = model.config
    out = model.forward(images, record_raw=record_raw)
    l_u = au_detection_loss(out.probs, labels, stats)
    l_a = None
    if cfg.variant.attention_loss:
        if priors is None:
            raise UsageError("this variant requires prior maps for the attention loss")
        if np.asarray(priors).shape[1] != cfg.m:
            raise ConfigurationError(
                f"priors provide {np.asarray(priors).shape[1]} units, model has {cfg.m}"
            )
        if cfg.variant.constraint == "avg":
            l_a = attention_regression_loss_stacked(out.avg_attention, priors)
        elif cfg.variant.constraint == "each":
            l_a = attention_regression_loss_each_stacked(out.raw_attention, priors)
    total = total_loss(l_u, l_a, cfg.lambda_a if l_a is not None else 0.0)
    return out, {"l_u": l_u, "l_a": l_a, "total": total}
