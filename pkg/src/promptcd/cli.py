"""Command-line entry points: train, eval, infer, gen-data, gradcheck.

Configuration layers, lowest to highest priority: built-in defaults,
then a JSON config file (--config), then explicit flags.  Every run
echoes its fully-resolved config next to its outputs so results can be
reproduced from that file alone.

Exit codes: 0 success, 2 invalid configuration, 3 dataset problems,
4 unknown prompt token, 1 anything else.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import gradcheck as gc
from .checkpoint import load_checkpoint
from .data import generate_dataset, read_dataset
from .encoders import Vocabulary
from .errors import (
    ConfigError,
    DatasetError,
    GenerationError,
    PromptCDError,
    VocabularyError,
)
from .metrics import write_metrics_csv
from .model import predict, predict_sliding
from .pngio import load_rgb, save_gray, save_mask
from .training import RunConfig, build_model, evaluate, run_train


def _add_config_flags(p):
    p.add_argument("--config", help="JSON file with RunConfig fields; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--image-size", type=int, dest="image_size")
    p.add_argument("--base", type=int, help="encoder channel base")
    p.add_argument("--adapter-width", type=int, dest="adapter_width")
    p.add_argument("--model-dim", type=int, dest="model_dim")
    p.add_argument("--heads", type=int)
    p.add_argument("--text-dim", type=int, dest="text_dim")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--steps", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--freeze-encoder", action="store_true", default=None, dest="freeze_encoder")
    p.add_argument("--flip-prob", type=float, dest="flip_prob")
    p.add_argument("--dataset", dest="dataset_dir")
    p.add_argument("--checkpoint")
    p.add_argument("--out", dest="out_dir")


CONFIG_FIELDS = (
    "seed", "image_size", "base", "adapter_width", "model_dim", "heads",
    "text_dim", "lr", "batch_size", "steps", "alpha", "beta",
    "freeze_encoder", "flip_prob", "dataset_dir", "checkpoint", "out_dir",
)


def resolve_config(args):
    values = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {args.config} must hold a JSON object")
        values.update(loaded)
    for name in CONFIG_FIELDS:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    return RunConfig.from_dict(values).validate()


def _load_model(cfg, vocab_path=None):
    """Rebuild a model from cfg dims and load its checkpoint weights."""
    if not cfg.checkpoint:
        raise ConfigError("a --checkpoint path is required")
    if not os.path.isfile(cfg.checkpoint):
        raise ConfigError(f"checkpoint not found: {cfg.checkpoint}")
    if vocab_path is None:
        candidate = os.path.join(os.path.dirname(cfg.checkpoint) or ".", "vocab.txt")
        vocab_path = candidate if os.path.isfile(candidate) else None
    vocab = Vocabulary.load(vocab_path) if vocab_path else None
    model = build_model(cfg, np.random.default_rng(cfg.seed))
    if vocab is not None:
        model.vocab = vocab
        model.text_encoder.vocab = vocab
    load_checkpoint(cfg.checkpoint, model)
    model.eval()
    return model


def cmd_train(args):
    cfg = resolve_config(args)
    if not cfg.dataset_dir:
        raise ConfigError("train needs --dataset (or dataset_dir in the config file)")
    _, log = run_train(cfg, log_every=args.log_every)
    print(f"trained {len(log.records)} steps; final F1 {log.final_metrics.get('F1', 0.0):.4f}; "
          f"outputs in {cfg.out_dir}")
    return 0


def cmd_eval(args):
    cfg = resolve_config(args)
    if not cfg.dataset_dir:
        raise ConfigError("eval needs --dataset (or dataset_dir in the config file)")
    dataset = read_dataset(cfg.dataset_dir)
    model = _load_model(cfg, args.vocab)
    per_prompt, overall = evaluate(model, dataset, swap_prompts=args.swap_prompts,
                                   max_samples=args.max_samples)
    name = os.path.basename(os.path.normpath(cfg.dataset_dir))
    rows = [(name, p, m) for p, m in per_prompt.items()] + [(name, "ALL", overall)]
    os.makedirs(cfg.out_dir, exist_ok=True)
    out_csv = os.path.join(cfg.out_dir, "metrics.csv")
    write_metrics_csv(out_csv, rows)
    cfg.echo(cfg.out_dir)
    for ds, prompt, m in rows:
        print(f"{ds}/{prompt}: F1 {100 * m['F1']:.2f} IoU {100 * m['IoU']:.2f}")
    print(f"wrote {out_csv}")
    return 0


def cmd_infer(args):
    cfg = resolve_config(args)
    img_a = load_rgb(args.image_a)
    img_b = load_rgb(args.image_b)
    if img_a.shape != img_b.shape:
        raise ConfigError(f"image sizes differ: {img_a.shape[1:]} vs {img_b.shape[1:]}")
    h, w = img_a.shape[1], img_a.shape[2]
    model = _load_model(cfg, args.vocab)
    model.vocab.encode(args.prompt)  # unknown tokens fail before any compute

    os.makedirs(cfg.out_dir, exist_ok=True)
    if args.window:
        prob, mask = predict_sliding(model, img_a, img_b, args.prompt,
                                     window=args.window, stride=args.stride or args.window // 2)
    else:
        if h % 32 or w % 32:
            raise ConfigError(
                f"image size {h}x{w} not divisible by 32; use --window for sliding-window mode")
        maps = {} if args.heatmaps else None
        prob, mask = predict(model, img_a, img_b, args.prompt, collect_maps=maps)
        if args.heatmaps:
            _write_heatmaps(maps, cfg.out_dir)
    save_mask(os.path.join(cfg.out_dir, "mask.png"), mask)
    save_gray(os.path.join(cfg.out_dir, "prob.png"), prob)
    cfg.echo(cfg.out_dir)
    print(f"wrote {cfg.out_dir}/mask.png and {cfg.out_dir}/prob.png "
          f"({int(mask.sum())} change pixels)")
    return 0


def _write_heatmaps(maps, out_dir):
    """Per-scale text-fusion visualizations: head-and-word-averaged
    attention over the spatial grid, and the spatial gate."""
    for scale, collected in sorted(maps.items()):
        attn = collected["attention"].data  # (B, heads, N, L)
        gate = collected["gate"].data       # (B, 1, h, w)
        hh, ww = gate.shape[2], gate.shape[3]
        grid = attn[0].mean(axis=(0, 2)).reshape(hh, ww)
        span = grid.max() - grid.min()
        grid = (grid - grid.min()) / (span if span > 0 else 1.0)
        save_gray(os.path.join(out_dir, f"heatmap_attn_{scale}.png"), grid)
        save_gray(os.path.join(out_dir, f"heatmap_gate_{scale}.png"), gate[0, 0])


def cmd_gen_data(args):
    cfg = resolve_config(args)
    classes = tuple(s.strip() for s in args.classes.split(",") if s.strip())
    count = generate_dataset(args.out_data, scenes=args.scenes, h=cfg.image_size,
                             w=cfg.image_size, seed=cfg.seed, classes=classes,
                             no_event_fraction=args.no_event_fraction)
    cfg.echo(args.out_data)
    print(f"wrote {count} samples across {args.scenes} scenes to {args.out_data}")
    return 0


def cmd_gradcheck(args):
    failures = 0
    print(f"per-op checks (tolerance {gc.OP_TOLERANCE:g}):")
    for name, err in gc.run_op_suite():
        ok = err <= gc.OP_TOLERANCE
        failures += 0 if ok else 1
        print(f"  {'PASS' if ok else 'FAIL'} {name}: max rel err {err:.3e}")
    if not args.ops_only:
        print(f"whole-model check at 32x32/base-8 (tolerance {gc.MODEL_TOLERANCE:g}):")
        report = gc.run_model_check()
        worst_name, worst = max(report, key=lambda kv: kv[1])
        for name, err in report:
            if err > gc.MODEL_TOLERANCE:
                failures += 1
                print(f"  FAIL {name}: max rel err {err:.3e}")
        print(f"  checked {len(report)} parameter tensors; worst {worst_name}: {worst:.3e}")
    print("gradcheck " + ("PASSED" if failures == 0 else f"FAILED ({failures})"))
    return 0 if failures == 0 else 1


def build_parser():
    parser = argparse.ArgumentParser(
        prog="promptcd",
        description="Prompt-conditioned change detection on bi-temporal image pairs.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    _add_config_flags(p)
    p.add_argument("--log-every", type=int, default=0, dest="log_every")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint, writing metrics.csv")
    _add_config_flags(p)
    p.add_argument("--vocab", help="vocabulary file (default: vocab.txt next to checkpoint)")
    p.add_argument("--swap-prompts", action="store_true",
                   help="score each sample against another prompt's ground truth")
    p.add_argument("--max-samples", type=int, default=None, dest="max_samples")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict a change mask for one image pair")
    _add_config_flags(p)
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.add_argument("prompt")
    p.add_argument("--vocab")
    p.add_argument("--heatmaps", action="store_true",
                   help="also write per-scale attention and gate heatmaps")
    p.add_argument("--window", type=int, help="sliding-window tile size (multiple of 32)")
    p.add_argument("--stride", type=int, help="sliding-window stride (default window/2)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    _add_config_flags(p)
    p.add_argument("--out-data", required=True, dest="out_data")
    p.add_argument("--scenes", type=int, default=64)
    p.add_argument("--classes", default="building,road")
    p.add_argument("--no-event-fraction", type=float, default=0.0, dest="no_event_fraction")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--ops-only", action="store_true", dest="ops_only")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, GenerationError) as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return 3
    except VocabularyError as exc:
        print(f"vocabulary error: {exc}", file=sys.stderr)
        return 4
    except PromptCDError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
