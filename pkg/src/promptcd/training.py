"""Training and evaluation loops.

Runs are deterministic for a fixed config: model initialization, batch
sampling and augmentation each draw from independent generators spawned
from the run seed, so two runs with the same config produce identical
loss traces.  Every batch shares a single prompt, which keeps the word
token count uniform within the batch.
"""

import json
import os
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import nn
from .checkpoint import save_checkpoint
from .data import augment, read_dataset
from .errors import ConfigError
from .losses import LossConfig, total_loss
from .metrics import ConfusionCounts, confusion, metrics
from .model import ChangeDetector, predict
from .optim import Adam
from .tensor import Tensor, backward


@dataclass
class RunConfig:
    seed: int = 0
    image_size: int = 64
    base: int = 16           # encoder channel base; pyramid widths are base * 2^i
    adapter_width: int = 64  # per-date adapter output channels
    model_dim: int = 128     # fused/decoder token width
    heads: int = 4
    text_dim: int = 64
    lr: float = 1e-4
    batch_size: int = 4
    steps: int = 500
    alpha: float = 0.2
    beta: float = 0.1
    freeze_encoder: bool = False
    flip_prob: float = 0.5
    dataset_dir: str = ""
    checkpoint: str = ""
    out_dir: str = "run"

    def validate(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.alpha + self.beta >= 1.0 or self.alpha < 0 or self.beta < 0:
            raise ConfigError(f"need alpha, beta >= 0 and alpha + beta < 1, got {self.alpha}, {self.beta}")
        if self.image_size % 32 or self.image_size <= 0:
            raise ConfigError(f"image_size must be a positive multiple of 32, got {self.image_size}")
        if self.steps < 0:
            raise ConfigError(f"steps must be non-negative, got {self.steps}")
        if self.model_dim % self.heads:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        return self

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**values)

    def echo(self, out_dir, name="config.json"):
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, name)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=1, sort_keys=True)
            fh.write("\n")
        return path


@dataclass
class TrainLog:
    records: list = field(default_factory=list)  # (step, total, ce, iou, dice)
    final_metrics: dict = field(default_factory=dict)
    wall_clock_sec: float = 0.0

    def to_csv(self):
        lines = ["step,total,ce,iou,dice"]
        for step, total, ce, iou, dice in self.records:
            lines.append(f"{step},{total:.8f},{ce:.8f},{iou:.8f},{dice:.8f}")
        return "\n".join(lines) + "\n"


def build_model(cfg, rng):
    return ChangeDetector(
        base=cfg.base, adapter_width=cfg.adapter_width, model_dim=cfg.model_dim,
        heads=cfg.heads, text_dim=cfg.text_dim, rng=rng)


def _prompt_groups(dataset):
    groups = {}
    for i, s in enumerate(dataset.samples):
        groups.setdefault(s.prompt, []).append(i)
    return {p: np.array(idx) for p, idx in sorted(groups.items())}


def _make_batch(dataset, indices, aug_rng, flip_prob, crop_size):
    imgs_a, imgs_b, masks = [], [], []
    for i in indices:
        pair = dataset.pair(int(i))
        crop = crop_size if pair.img_a.shape[1] > crop_size or pair.img_a.shape[2] > crop_size else None
        pair = augment(pair, aug_rng, flip_prob=flip_prob, crop_size=crop)
        imgs_a.append(pair.img_a)
        imgs_b.append(pair.img_b)
        masks.append(pair.mask)
    return (np.stack(imgs_a).astype(np.float32),
            np.stack(imgs_b).astype(np.float32),
            np.stack(masks).astype(np.float32))


def train_set_f1(model, dataset, max_samples=None):
    """Micro-averaged F1 of the final mask over (a cap of) the dataset."""
    counts = ConfusionCounts()
    n = len(dataset) if max_samples is None else min(len(dataset), max_samples)
    for i in range(n):
        s = dataset.samples[i]
        img_a, img_b, mask = dataset.load(i)
        _, pred = predict(model, img_a, img_b, s.prompt)
        counts = counts + confusion(pred, mask[0])
    return metrics(counts)


def run_train(cfg, stop_fn=None, model=None, log_every=0):
    """Train a model per cfg, writing checkpoint.bin, loss.csv, vocab.txt,
    config.json and summary.json into cfg.out_dir.

    stop_fn, when given, is called as stop_fn(step, model, log) after
    each step and ends training early when it returns True.  Returns
    (model, TrainLog).
    """
    cfg.validate()
    dataset = read_dataset(cfg.dataset_dir)
    if len(dataset) == 0:
        raise ConfigError(f"dataset at {cfg.dataset_dir} has no samples")

    ss = np.random.SeedSequence(cfg.seed)
    init_ss, sample_ss, aug_ss = ss.spawn(3)
    if model is None:
        model = build_model(cfg, np.random.default_rng(init_ss))
    if cfg.freeze_encoder:
        model.freeze_encoders(True)
    model.train()

    sample_rng = np.random.default_rng(sample_ss)
    aug_rng = np.random.default_rng(aug_ss)
    groups = _prompt_groups(dataset)
    prompts = list(groups)
    text_cache = {p: model.encode_text(p) for p in prompts}

    opt = Adam(list(model.parameters()), lr=cfg.lr)
    loss_cfg = LossConfig(alpha=cfg.alpha, beta=cfg.beta)
    log = TrainLog()
    started = time.perf_counter()

    for step in range(1, cfg.steps + 1):
        prompt = prompts[int(sample_rng.integers(0, len(prompts)))]
        group = groups[prompt]
        replace = len(group) < cfg.batch_size
        indices = sample_rng.choice(group, size=cfg.batch_size, replace=replace)
        a, b, y = _make_batch(dataset, indices, aug_rng, cfg.flip_prob, cfg.image_size)

        text = text_cache[prompt] if cfg.freeze_encoder else model.encode_text(prompt)
        preds = model(Tensor(a), Tensor(b), text)
        loss, parts = total_loss(preds, Tensor(y), loss_cfg)
        backward(loss)
        opt.step()
        opt.zero_grads()

        log.records.append((step, float(loss.data), parts["ce"], parts["iou"], parts["dice"]))
        if log_every and step % log_every == 0:
            print(f"step {step}: loss {float(loss.data):.4f}", flush=True)
        if stop_fn is not None and stop_fn(step, model, log):
            break

    log.wall_clock_sec = time.perf_counter() - started
    log.final_metrics = train_set_f1(model, dataset, max_samples=64)

    os.makedirs(cfg.out_dir, exist_ok=True)
    ckpt_path = cfg.checkpoint or os.path.join(cfg.out_dir, "checkpoint.bin")
    save_checkpoint(ckpt_path, model)
    model.vocab.save(os.path.join(cfg.out_dir, "vocab.txt"))
    with open(os.path.join(cfg.out_dir, "loss.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write(log.to_csv())
    with open(os.path.join(cfg.out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump({
            "steps_run": len(log.records),
            "wall_clock_sec": log.wall_clock_sec,
            "final_metrics": log.final_metrics,
        }, fh, indent=1)
        fh.write("\n")
    cfg.echo(cfg.out_dir)
    return model, log


def evaluate(model, dataset, swap_prompts=False, max_samples=None):
    """Accumulate confusion counts per prompt (micro-averaged pixels).

    With swap_prompts=True each sample's prediction is scored against
    the ground truth of a different prompt from the same scene, which
    should be near-zero for a genuinely prompt-conditioned model.
    Samples without a swap partner are skipped.  Returns (per_prompt,
    overall) where per_prompt maps prompt -> metrics dict.
    """
    by_scene = {}
    for i, s in enumerate(dataset.samples):
        by_scene.setdefault(s.scene, []).append(i)

    per_prompt = {}
    overall = ConfusionCounts()
    n = len(dataset) if max_samples is None else min(len(dataset), max_samples)
    for i in range(n):
        s = dataset.samples[i]
        img_a, img_b, mask = dataset.load(i)
        target = mask[0]
        if swap_prompts:
            partners = [j for j in by_scene[s.scene]
                        if dataset.samples[j].prompt != s.prompt]
            if not partners:
                continue
            partner = min(partners, key=lambda j: dataset.samples[j].prompt)
            target = dataset.load(partner)[2][0]
        _, pred = predict(model, img_a, img_b, s.prompt)
        c = confusion(pred, target)
        per_prompt[s.prompt] = per_prompt.get(s.prompt, ConfusionCounts()) + c
        overall = overall + c

    return {p: metrics(c) for p, c in sorted(per_prompt.items())}, metrics(overall)
