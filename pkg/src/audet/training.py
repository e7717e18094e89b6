"""Training and evaluation engine.

One epoch shuffles the sample order, augments each mini-batch (random crop,
mirror, brightness/contrast jitter), recomputes the landmark priors for every
augmented view, and applies warmup-cosine AdamW with global-norm clipping.
Prototype banks are maintained per the variant's policy: dynamic banks update
from every mini-batch's detached features, static banks are recomputed by a
full pass at each epoch end.

Everything is driven by explicit generators seeded from the run seed, so two
single-worker runs with the same seed produce byte-identical metrics logs.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from PIL import Image

from . import tensor as T
from .errors import ConfigurationError, DataError, UsageError, VersionError
from .losses import LabelStats, compute_weights
from .metrics import f1_frame
from .model import Model, ModelConfig, VariantFlags, build, forward_with_losses
from .optim import AdamW, ScheduleConfig, lr_at, optimizer_step
from .priors import (
    LandmarkSet,
    SchemeRules,
    default_rules,
    generate_prior_maps,
    load_rules,
)

_CKPT_VERSION = "audet-ckpt-1"


# ---------------------------------------------------------------------------
# dataset directory format


@dataclass
class Dataset:
    """In-memory dataset: images/ PNGs plus landmarks.csv, labels.csv, meta.txt."""

    images: np.ndarray      # (n, 3, S, S) float32 in [0, 1]
    landmarks: np.ndarray   # (n, P, 2) float64
    labels: np.ndarray      # (n, m) uint8
    scheme: str
    au_ids: list
    side: int
    rules: SchemeRules
    sample_ids: list

    def __len__(self):
        return self.images.shape[0]


def _read_kv_file(path) -> dict:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"malformed line in {path}: {raw!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def load_dataset(path) -> Dataset:
    meta_path = os.path.join(path, "meta.txt")
    if not os.path.exists(meta_path):
        raise DataError(f"{path} is not a dataset directory (no meta.txt)")
    meta = _read_kv_file(meta_path)
    for key in ("scheme", "aus", "side"):
        if key not in meta:
            raise DataError(f"meta.txt is missing {key!r}")
    scheme = meta["scheme"]
    au_ids = [int(v) for v in meta["aus"].split(",")]
    side = int(meta["side"])

    if "rules" in meta:
        rules_map = load_rules(os.path.join(path, meta["rules"]))
    else:
        rules_map = default_rules()
    if scheme not in rules_map:
        raise DataError(f"no sub-center rules for scheme {scheme!r}")
    rules = rules_map[scheme]
    for au in au_ids:
        if au not in rules.rules:
            raise DataError(f"scheme {scheme!r} has no rule for au {au}")

    labels_rows = []
    with open(os.path.join(path, "labels.csv"), "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if line:
                parts = line.split(",")
                labels_rows.append((parts[0], [int(v) for v in parts[1:]]))
    lm_map = {}
    with open(os.path.join(path, "landmarks.csv"), "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if line:
                parts = line.split(",")
                vals = np.array([float(v) for v in parts[1:]])
                lm_map[parts[0]] = vals.reshape(-1, 2)

    ids, labels, landmarks, images = [], [], [], []
    for sid, row in labels_rows:
        if len(row) != len(au_ids):
            raise DataError(
                f"sample {sid}: {len(row)} labels but meta declares {len(au_ids)} units"
            )
        if sid not in lm_map:
            raise DataError(f"sample {sid} has labels but no landmarks")
        img_path = os.path.join(path, "images", sid + ".png")
        if not os.path.exists(img_path):
            raise DataError(f"sample {sid} has labels but no image at {img_path}")
        with Image.open(img_path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        if arr.shape[:2] != (side, side):
            raise DataError(f"sample {sid} image is {arr.shape[:2]}, expected {side}x{side}")
        images.append(arr.transpose(2, 0, 1))
        ids.append(sid)
        labels.append(row)
        landmarks.append(lm_map[sid])

    if not ids:
        raise DataError(f"dataset at {path} contains no samples")
    return Dataset(
        images=np.stack(images),
        landmarks=np.stack(landmarks),
        labels=np.array(labels, dtype=np.uint8),
        scheme=scheme,
        au_ids=au_ids,
        side=side,
        rules=rules,
        sample_ids=ids,
    )


# ---------------------------------------------------------------------------
# augmentation and prior construction


def mirror_points(points: np.ndarray, width: int, rules: SchemeRules) -> np.ndarray:
    pts = points[rules.mirror].copy()
    pts[:, 0] = (width - 1.0) - pts[:, 0]
    return pts


def augment(image: np.ndarray, points: np.ndarray, rng, crop: int,
            rules: SchemeRules, jitter: float = 0.2,
            crop_offset=None, mirror=None):
    """One augmented view plus its translated/reflected landmarks.

    Draw order is fixed (crop offsets, mirror coin, brightness, contrast) so
    a seeded generator reproduces the same view stream. A crop offset of
    (dx, dy) shifts every landmark by exactly (-dx, -dy); mirroring reflects
    x about the crop midline and permutes the landmark indices.
    """
    side = image.shape[-1]
    if crop > side:
        raise UsageError(f"crop {crop} exceeds image side {side}")
    if crop_offset is None:
        dx = int(rng.integers(0, side - crop + 1))
        dy = int(rng.integers(0, side - crop + 1))
    else:
        dx, dy = crop_offset
    view = image[:, dy:dy + crop, dx:dx + crop]
    pts = points - np.array([dx, dy], dtype=np.float64)
    if mirror is None:
        mirror = bool(rng.random() < 0.5)
    if mirror:
        view = view[:, :, ::-1]
        pts = mirror_points(pts, crop, rules)
    brightness = float(rng.uniform(-jitter, jitter))
    contrast = float(rng.uniform(-jitter, jitter))
    view = (view - 0.5) * (1.0 + contrast) + 0.5 + brightness
    return np.clip(view, 0.0, 1.0).astype(np.float32), pts


def center_crop(image: np.ndarray, points: np.ndarray, crop: int):
    side = image.shape[-1]
    off = (side - crop) // 2
    view = image[:, off:off + crop, off:off + crop]
    return np.ascontiguousarray(view, dtype=np.float32), points - off


def priors_for(points_batch, rules: SchemeRules, au_ids, crop: int,
               delta: float) -> np.ndarray:
    """Stacked (B, m, G, G) prior maps recomputed from per-view landmarks."""
    g = crop // 8
    out = np.empty((len(points_batch), len(au_ids), g, g), dtype=np.float64)
    for i, pts in enumerate(points_batch):
        maps = generate_prior_maps(LandmarkSet(pts, rules.scheme), rules,
                                   au_ids, crop, delta)
        for j, pm in enumerate(maps):
            out[i, j] = pm.grid
    return out


# ---------------------------------------------------------------------------
# checkpointing


def save_checkpoint(path, model: Model, stats: LabelStats, au_ids, scheme) -> None:
    arrays = {"param/" + name: p.data for name, p in model.named_params()}
    if model.banks:
        for i, bank in enumerate(model.banks):
            arrays[f"bank{i}/slots"] = bank.slots
            arrays[f"bank{i}/filled"] = bank.filled
    config = asdict(model.config)
    meta = {
        "config": config,
        "au_ids": list(au_ids),
        "scheme": scheme,
        "stats_n": stats.n,
        "stats_counts": stats.counts.tolist(),
        "num_banks": len(model.banks) if model.banks else 0,
    }
    np.savez(path, __version__=np.array(_CKPT_VERSION),
             __meta__=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path, dtype=np.float32):
    with np.load(path, allow_pickle=False) as z:
        if "__version__" not in z or str(z["__version__"]) != _CKPT_VERSION:
            raise VersionError(f"{path} is not a {_CKPT_VERSION} checkpoint")
        meta = json.loads(str(z["__meta__"]))
        cfg_dict = dict(meta["config"])
        cfg_dict["variant"] = VariantFlags(**cfg_dict["variant"])
        for key in ("stage_widths", "stage_heads", "sr_ratios"):
            cfg_dict[key] = tuple(cfg_dict[key])
        config = ModelConfig(**cfg_dict)
        model = build(config, seed=0, dtype=dtype)
        model.load_param_arrays({k[len("param/"):]: z[k] for k in z.files
                                 if k.startswith("param/")})
        n_banks = meta["num_banks"]
        if n_banks:
            model.banks = []
            from .causal import PrototypeBank

            for i in range(n_banks):
                slots = z[f"bank{i}/slots"]
                bank = PrototypeBank(slots.shape[0], slots.shape[1])
                bank.load_state({"slots": slots, "filled": z[f"bank{i}/filled"]})
                model.banks.append(bank)
            if config.causal_mode == "dictionary":
                model.refresh_dictionaries(seed=0)
        else:
            model.init_banks(0)
        stats = compute_weights(np.array(meta["stats_counts"]), meta["stats_n"])
    return model, stats, meta["au_ids"], meta["scheme"]


# ---------------------------------------------------------------------------
# the loop


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    base_lr: float = None          # None: 2e-3/256 scaled by the batch size
    weight_decay: float = 0.05
    clip_norm: float = 3.0
    warmup_epochs: float = 1.0
    jitter: float = 0.2
    seed: int = 0
    probe_batches: int = 8
    eval_batch: int = 64

    def resolved_lr(self) -> float:
        if self.base_lr is not None:
            return self.base_lr
        return 2e-3 / 256.0 * self.batch_size


def desk_train_config(epochs: int = 20, seed: int = 0, **kwargs) -> TrainConfig:
    """Training profile matched to the small desk model.

    The batch-scaled rate rule is tuned to full-size runs; at desk scale the
    pooled feature's sample-to-sample variation is a few percent of its
    magnitude, and a larger base rate is needed to reach it within 20 epochs.
    """
    kwargs.setdefault("base_lr", 3e-3)
    return TrainConfig(epochs=epochs, seed=seed, **kwargs)


@dataclass
class TrainResult:
    checkpoint_path: str
    metrics_path: str
    history: list
    final_f1: float


def _forward_batches(model: Model, ds: Dataset, crop: int, batch: int):
    """Center-crop evaluation predictions over the whole dataset."""
    probs = []
    with T.no_grad():
        for k in range(0, len(ds), batch):
            views = []
            for i in range(k, min(k + batch, len(ds))):
                v, _ = center_crop(ds.images[i], ds.landmarks[i], crop)
                views.append(v)
            out = model.forward(np.stack(views))
            probs.append(out.probs.data.copy())
    return np.concatenate(probs, axis=0)


def evaluate_model(model: Model, ds: Dataset, batch: int = 64):
    """Per-unit F1 of center-cropped predictions at threshold 0.5."""
    if len(ds) == 0:
        raise UsageError("cannot evaluate on an empty dataset")
    probs = _forward_batches(model, ds, model.config.l, batch)
    per_unit, avg = f1_frame(probs, ds.labels)
    return probs, per_unit, avg


def evaluate_checkpoint(path, dataset, batch: int = 64):
    """Frozen-bank evaluation of a saved checkpoint on a dataset directory."""
    model, stats, au_ids, scheme = load_checkpoint(path)
    ds = load_dataset(dataset) if isinstance(dataset, (str, os.PathLike)) else dataset
    if ds.scheme != scheme or list(ds.au_ids) != list(au_ids):
        raise VersionError(
            f"checkpoint was trained on scheme {scheme}/aus {au_ids}, "
            f"dataset provides {ds.scheme}/{ds.au_ids}"
        )
    probs, per_unit, avg = evaluate_model(model, ds, batch)
    return {"probs": probs, "f1_per_unit": per_unit, "f1_avg": avg,
            "au_ids": au_ids, "labels": ds.labels}


def _recompute_banks(model: Model, ds: Dataset, tc: TrainConfig) -> None:
    crop = model.config.l
    with T.no_grad():
        for k in range(0, len(ds), tc.eval_batch):
            idx = list(range(k, min(k + tc.eval_batch, len(ds))))
            views = [center_crop(ds.images[i], ds.landmarks[i], crop)[0] for i in idx]
            out = model.extract_features(np.stack(views))
            model.update_banks(idx, out)


def _loss_probe(model: Model, ds: Dataset, tc: TrainConfig, stats, rng) -> dict:
    """Mean losses over a few augmented batches without touching the weights."""
    cfg = model.config
    n = len(ds)
    idx = rng.permutation(n)
    total = {"l_u": 0.0, "l_a": 0.0, "l": 0.0}
    batches = 0
    with T.no_grad():
        for k in range(0, min(n, tc.probe_batches * tc.batch_size), tc.batch_size):
            ids = idx[k:k + tc.batch_size]
            views, ptss = [], []
            for i in ids:
                v, p = augment(ds.images[i], ds.landmarks[i], rng, cfg.l,
                               ds.rules, tc.jitter)
                views.append(v)
                ptss.append(p)
            priors = (priors_for(ptss, ds.rules, ds.au_ids, cfg.l, cfg.delta)
                      if cfg.variant.attention_loss else None)
            _, losses = forward_with_losses(model, np.stack(views), priors,
                                            ds.labels[ids], stats)
            total["l_u"] += losses["l_u"].item()
            total["l_a"] += losses["l_a"].item() if losses["l_a"] is not None else 0.0
            total["l"] += losses["total"].item()
            batches += 1
    return {k: v / max(1, batches) for k, v in total.items()}


def _format_row(epoch, losses, per_unit, avg) -> str:
    cells = [str(epoch), f"{losses['l_u']:.6f}", f"{losses['l_a']:.6f}",
             f"{losses['l']:.6f}"]
    cells += [f"{v:.6f}" for v in per_unit]
    cells.append(f"{avg:.6f}")
    return ",".join(cells)


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, train_ds: Dataset,
          eval_ds: Dataset = None, out_dir: str = "run") -> TrainResult:
    """Full optimization loop; writes checkpoint.npz and metrics.csv per epoch."""
    cfg = model_cfg
    tc = train_cfg
    if len(train_ds) == 0:
        raise UsageError("cannot train on an empty dataset")
    if train_ds.labels.shape[1] != cfg.m:
        raise DataError(
            f"dataset provides {train_ds.labels.shape[1]} label columns, model expects {cfg.m}"
        )
    if train_ds.side < cfg.l:
        raise ConfigurationError(
            f"dataset side {train_ds.side} smaller than crop {cfg.l}"
        )
    os.makedirs(out_dir, exist_ok=True)

    n = len(train_ds)
    model = build(cfg, seed=tc.seed, dtype=np.float32)
    stats = compute_weights(train_ds.labels.sum(axis=0), n)
    report_ds = eval_ds if eval_ds is not None else train_ds

    seeds = np.random.SeedSequence(tc.seed).spawn(3)
    order_rng = np.random.default_rng(seeds[0])
    aug_rng = np.random.default_rng(seeds[1])
    probe_rng = np.random.default_rng(seeds[2])

    steps_per_epoch = math.ceil(n / tc.batch_size)
    schedule = ScheduleConfig(
        base_rate=tc.resolved_lr(),
        warmup_steps=max(1, round(tc.warmup_epochs * steps_per_epoch)),
        total_steps=tc.epochs * steps_per_epoch,
    )
    opt = AdamW(model.named_params(), weight_decay=tc.weight_decay)

    needs_banks = cfg.variant.intervention != "none"
    model.init_banks(n)
    if needs_banks:
        warm = list(range(min(tc.batch_size, n)))
        views = [center_crop(train_ds.images[i], train_ds.landmarks[i], cfg.l)[0]
                 for i in warm]
        with T.no_grad():
            out = model.extract_features(np.stack(views))
        model.update_banks(warm, out)
        if cfg.causal_mode == "dictionary":
            model.refresh_dictionaries(seed=tc.seed)

    metrics_path = os.path.join(out_dir, "metrics.csv")
    ckpt_path = os.path.join(out_dir, "checkpoint.npz")
    header = ["epoch", "L_u", "L_a", "L"]
    header += [f"f1_au{a}" for a in train_ds.au_ids] + ["f1_avg"]
    history = []

    with open(metrics_path, "w", encoding="utf-8") as log:
        log.write(",".join(header) + "\n")

        probe = _loss_probe(model, train_ds, tc, stats, probe_rng)
        _, per_unit, avg = evaluate_model(model, report_ds, tc.eval_batch)
        log.write(_format_row(0, probe, per_unit, avg) + "\n")
        log.flush()
        history.append({"epoch": 0, **probe, "f1_per_unit": per_unit, "f1_avg": avg})

        global_step = 0
        for epoch in range(1, tc.epochs + 1):
            perm = order_rng.permutation(n)
            sums = {"l_u": 0.0, "l_a": 0.0, "l": 0.0}
            for k in range(0, n, tc.batch_size):
                ids = perm[k:k + tc.batch_size]
                views, ptss = [], []
                for i in ids:
                    v, p = augment(train_ds.images[i], train_ds.landmarks[i],
                                   aug_rng, cfg.l, train_ds.rules, tc.jitter)
                    views.append(v)
                    ptss.append(p)
                priors = (priors_for(ptss, train_ds.rules, train_ds.au_ids,
                                     cfg.l, cfg.delta)
                          if cfg.variant.attention_loss else None)
                out, losses = forward_with_losses(
                    model, np.stack(views), priors, train_ds.labels[ids], stats)
                losses["total"].backward()
                rate = lr_at(global_step, schedule)
                optimizer_step(opt, rate, tc.clip_norm)
                global_step += 1
                if needs_banks and cfg.variant.bank_update == "dynamic":
                    model.update_banks(ids, out)
                sums["l_u"] += losses["l_u"].item()
                sums["l_a"] += losses["l_a"].item() if losses["l_a"] is not None else 0.0
                sums["l"] += losses["total"].item()

            if needs_banks and cfg.variant.bank_update == "static":
                _recompute_banks(model, train_ds, tc)
            if needs_banks and cfg.causal_mode == "dictionary":
                model.refresh_dictionaries(seed=tc.seed + epoch)

            means = {key: v / steps_per_epoch for key, v in sums.items()}
            _, per_unit, avg = evaluate_model(model, report_ds, tc.eval_batch)
            log.write(_format_row(epoch, means, per_unit, avg) + "\n")
            log.flush()
            history.append({"epoch": epoch, **means,
                            "f1_per_unit": per_unit, "f1_avg": avg})
            save_checkpoint(ckpt_path, model, stats, train_ds.au_ids, train_ds.scheme)

    return TrainResult(checkpoint_path=ckpt_path, metrics_path=metrics_path,
                       history=history, final_f1=history[-1]["f1_avg"])
