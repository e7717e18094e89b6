"""Action unit detection with location-constrained self-attention and
per-unit causal deconfounding, built on a small reverse-mode autodiff core."""

from .attention import (
    BlockConfig,
    Emsav2Block,
    attention_regression_loss,
    attention_regression_loss_each,
    average_attention,
    scaled_attention,
)
from .causal import (
    InterventionHead,
    PrototypeBank,
    confounder_expectation,
    deconfounded_probability,
)
from .gradcheck import grad_check
from .losses import LabelStats, au_detection_loss, compute_weights, total_loss
from .metrics import f1_frame, format_report
from .model import (
    ForwardOutput,
    Model,
    ModelConfig,
    VariantFlags,
    build,
    desk_config,
    forward_with_losses,
    paper_config,
    select_variant,
    variant_flags,
)
from .optim import AdamW, ScheduleConfig, clip_global_norm, lr_at, optimizer_step
from .priors import (
    LandmarkSet,
    PriorAttentionMap,
    SchemeRules,
    SimilarityTransform,
    SubCenterRule,
    apply_transform,
    combine_and_normalize,
    compute_subcenters,
    default_rules,
    default_template,
    fit_similarity,
    gaussian_prior,
    generate_prior_maps,
    mirror_landmarks,
    mirror_prior,
    read_prior_map,
    write_prior_map,
)
from .synth import ConfounderMode, CooccurRule, SynthSpec, default_spec, synth_generate
from .tensor import Tensor, no_grad
from .training import (
    Dataset,
    TrainConfig,
    TrainResult,
    augment,
    evaluate_checkpoint,
    evaluate_model,
    load_checkpoint,
    load_dataset,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"
