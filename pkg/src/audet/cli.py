"""Command-line surface: train, eval, gen-prior, viz-attention, synth-data, ablate.

Output is line-oriented ``key=value`` pairs; human-readable tables are gated
behind ``--table``. Exit codes: 0 success, 2 usage, 3 data, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import tensor as T
from .errors import (
    ConfigurationError,
    DataError,
    DimensionError,
    GeometryError,
    NumericError,
    SpecificationError,
    StateError,
    UsageError,
    VersionError,
)
from .metrics import format_report
from .model import VARIANT_NAMES, ModelConfig, desk_config, paper_config, select_variant
from .priors import (
    LandmarkSet,
    default_rules,
    generate_prior_maps,
    load_landmarks_csv,
    load_rules,
    write_prior_map,
)
from .synth import default_spec, synth_generate
from .training import (
    TrainConfig,
    evaluate_checkpoint,
    load_checkpoint,
    load_dataset,
    train,
)
from .viz import overlay_heat, save_attention_overlays


def _read_config_file(path) -> dict:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"malformed config line {raw!r}")
            key, value = line.split("=", 1)
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def _model_config(args) -> ModelConfig:
    overrides = _read_config_file(args.config) if getattr(args, "config", None) else {}

    def pick(name, cast, default=None):
        flag = getattr(args, name, None)
        if flag is not None:
            return flag
        if name in overrides:
            return cast(overrides[name])
        return default

    profile = pick("profile", str, "desk")
    m = pick("m", int, 4 if profile == "desk" else 12)
    variant = pick("variant", str, "AC2D")
    cfg = desk_config(m=m, variant=variant) if profile == "desk" \
        else paper_config(m=m, variant=variant)
    for name, cast in (("l", int), ("c", int), ("k", int), ("n1", int), ("n2", int),
                       ("n3", int), ("delta", float), ("lambda_a", float),
                       ("dict_size", int)):
        value = pick(name, cast)
        if value is not None:
            setattr(cfg, name, value)
    mode = pick("causal_mode", str)
    if mode is not None:
        cfg.causal_mode = mode
    cfg.__post_init__()
    cfg.validate()
    return cfg, overrides


def _train_config(args, overrides) -> TrainConfig:
    def pick(name, cast, default):
        flag = getattr(args, name, None)
        if flag is not None:
            return flag
        if name in overrides:
            return cast(overrides[name])
        return default

    return TrainConfig(
        epochs=pick("epochs", int, 20),
        batch_size=pick("batch", int, 16),
        base_lr=pick("lr", float, None),
        seed=pick("seed", int, 0),
    )


def _common_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file; flags override it")
    p.add_argument("--profile", choices=["desk", "paper"])
    p.add_argument("--variant", choices=list(VARIANT_NAMES))
    p.add_argument("--m", type=int)
    p.add_argument("--l", type=int)
    p.add_argument("--c", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--n1", type=int)
    p.add_argument("--n2", type=int)
    p.add_argument("--n3", type=int)
    p.add_argument("--delta", type=float)
    p.add_argument("--lambda-a", dest="lambda_a", type=float)
    p.add_argument("--causal-mode", dest="causal_mode", choices=["literal", "dictionary"])
    p.add_argument("--dict-size", dest="dict_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)


def _cmd_train(args) -> int:
    cfg, overrides = _model_config(args)
    tc = _train_config(args, overrides)
    train_ds = load_dataset(args.data)
    eval_ds = load_dataset(args.eval_data) if args.eval_data else None
    cfg.m = train_ds.labels.shape[1]
    cfg.__post_init__()
    result = train(cfg, tc, train_ds, eval_ds, out_dir=args.out)
    last = result.history[-1]
    print(f"checkpoint={result.checkpoint_path}")
    print(f"metrics={result.metrics_path}")
    print(f"epochs={last['epoch']}")
    print(f"l_u={last['l_u']:.6f}")
    print(f"l_a={last['l_a']:.6f}")
    print(f"f1_avg={last['f1_avg']:.2f}")
    if args.table:
        print(format_report(train_ds.au_ids, last["f1_per_unit"], last["f1_avg"]))
    return 0


def _cmd_eval(args) -> int:
    report = evaluate_checkpoint(args.checkpoint, args.data)
    for au, f1 in zip(report["au_ids"], report["f1_per_unit"]):
        print(f"f1_au{au}={f1:.2f}")
    print(f"f1_avg={report['f1_avg']:.2f}")
    if args.dump_predictions:
        with open(args.dump_predictions, "w", encoding="utf-8") as fh:
            for row in report["probs"]:
                fh.write(",".join(f"{v:.6f}" for v in row) + "\n")
        print(f"predictions={args.dump_predictions}")
    if args.table:
        print(format_report(report["au_ids"], report["f1_per_unit"], report["f1_avg"]))
    return 0


def _cmd_gen_prior(args) -> int:
    rules_map = load_rules(args.rules) if args.rules else default_rules()
    if args.scheme not in rules_map:
        raise DataError(f"no rules for scheme {args.scheme!r}")
    rules = rules_map[args.scheme]
    au_ids = ([int(v) for v in args.aus.split(",")] if args.aus
              else sorted(rules.rules))
    os.makedirs(args.out, exist_ok=True)
    shift = 0.0
    if args.canvas_side and args.canvas_side > args.l:
        shift = (args.canvas_side - args.l) / 2.0
    count = 0
    for sid, pts in load_landmarks_csv(args.landmarks):
        lms = LandmarkSet(pts - shift, args.scheme)
        maps = generate_prior_maps(lms, rules, au_ids, args.l, args.delta)
        for pm in maps:
            path = os.path.join(args.out, f"{sid}_au{pm.au_id}.apm")
            write_prior_map(path, pm)
            if args.png:
                side = args.l
                gray = np.full((3, side, side), 0.5, dtype=np.float64)
                overlay_heat(gray, pm.grid).save(path[:-4] + ".png")
            count += 1
            print(f"map={path} sum={pm.grid.sum():.9f}")
    print(f"maps_written={count}")
    return 0


def _cmd_synth_data(args) -> int:
    spec = default_spec(side=args.side, num_aus=args.m, confounded=args.confounded)
    out = synth_generate(spec, args.n, args.seed, args.out, split=args.split)
    print(f"dataset={out}")
    print(f"n={args.n}")
    print(f"split={args.split}")
    print(f"confounded={int(args.confounded)}")
    return 0


def _cmd_viz_attention(args) -> int:
    model, _, au_ids, scheme = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    if ds.scheme != scheme:
        raise VersionError(f"checkpoint scheme {scheme} vs dataset {ds.scheme}")
    try:
        index = ds.sample_ids.index(args.sample)
    except ValueError as exc:
        raise DataError(f"sample {args.sample!r} not in dataset") from exc
    from .training import center_crop

    view, _ = center_crop(ds.images[index], ds.landmarks[index], model.config.l)
    with T.no_grad():
        out = model.forward(view[None], record_raw=True)
    channels = [int(v) for v in args.channels.split(",")] if args.channels else []
    os.makedirs(args.out, exist_ok=True)
    g = model.config.grid_side
    written = []
    for j, au in enumerate(au_ids):
        avg = out.avg_attention.data[j, 0]
        chans = out.raw_attention.data[j, 0].reshape(-1, g * g)  # (k*N, N)
        grids = {ch: chans[ch % chans.shape[0]].reshape(g, g) for ch in channels}
        prefix = os.path.join(args.out, f"{args.sample}_au{au}")
        written += save_attention_overlays(view, avg, grids, prefix)
    for path in written:
        print(f"overlay={path}")
    return 0


def _cmd_ablate(args) -> int:
    cfg, overrides = _model_config(args)
    tc = _train_config(args, overrides)
    train_ds = load_dataset(args.data)
    eval_ds = load_dataset(args.eval_data) if args.eval_data else None
    cfg.m = train_ds.labels.shape[1]
    rows = []
    for name in VARIANT_NAMES:
        vcfg = select_variant(cfg, name)
        vcfg.__post_init__()
        out_dir = os.path.join(args.out, f"variant_{name}")
        result = train(vcfg, tc, train_ds, eval_ds, out_dir=out_dir)
        rows.append((name, result.history[-1]))
        print(f"variant={name} f1_avg={result.history[-1]['f1_avg']:.2f}")
    if args.table:
        au_ids = train_ds.au_ids
        print("variant  " + "  ".join(f"au{a}" for a in au_ids) + "  Avg")
        for name, last in rows:
            cells = "  ".join(f"{v:.1f}" for v in last["f1_per_unit"])
            print(f"{name:8s} {cells}  {last['f1_avg']:.1f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="audet",
        description="Action unit detection with constrained attention and causal deconfounding",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", dest="eval_data")
    p.add_argument("--out", required=True)
    p.add_argument("--table", action="store_true")
    _common_model_flags(p)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--dump-predictions", dest="dump_predictions")
    p.add_argument("--table", action="store_true")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("gen-prior", help="write prior attention maps for a landmarks file")
    p.add_argument("--landmarks", required=True)
    p.add_argument("--scheme", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--l", type=int, default=176)
    p.add_argument("--delta", type=float, default=3.0)
    p.add_argument("--rules")
    p.add_argument("--aus")
    p.add_argument("--canvas-side", dest="canvas_side", type=int,
                   help="landmark canvas side; center-crop shift to --l is applied")
    p.add_argument("--png", action="store_true")
    p.set_defaults(fn=_cmd_gen_prior)

    p = sub.add_parser("synth-data", help="generate a synthetic dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--side", type=int, default=56)
    p.add_argument("--m", type=int, default=4)
    p.add_argument("--split", choices=["train", "eval"], default="train")
    p.add_argument("--confounded", action="store_true")
    p.set_defaults(fn=_cmd_synth_data)

    p = sub.add_parser("viz-attention", help="render attention overlays from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sample", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--channels", help="comma-separated channel indices")
    p.set_defaults(fn=_cmd_viz_attention)

    p = sub.add_parser("ablate", help="train and evaluate all six variants with shared seeds")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", dest="eval_data")
    p.add_argument("--out", required=True)
    p.add_argument("--table", action="store_true")
    _common_model_flags(p)
    p.set_defaults(fn=_cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    try:
        return args.fn(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"error={exc}", file=sys.stderr)
        return 2
    except (DataError, VersionError, SpecificationError, GeometryError,
            StateError, FileNotFoundError) as exc:
        print(f"error={exc}", file=sys.stderr)
        return 3
    except (NumericError, DimensionError) as exc:
        print(f"error={exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
