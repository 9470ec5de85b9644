"""Acceptance suite: nine numbered criteria, each printing one PASS or
FAIL line (run with ``pytest tests/test_acceptance.py -s`` to see them
as they complete).

The criteria certify, in order: gradient correctness, the pyramid shape
schedule, loss algebra, metric fidelity, attention invariances, the
frozen-encoder contract, overfit trainability, genuine language
guidance on held-out scenes, and bitwise run determinism.
"""

import json
import os
import time

import numpy as np
import pytest

import promptcd.tensor as T
from promptcd import cli, gradcheck as gc, nn
from promptcd.checkpoint import read_checkpoint
from promptcd.data import generate_dataset, read_dataset
from promptcd.encoders import ImagePyramidEncoder
from promptcd.losses import LossConfig, bce, dice_loss, iou_loss, total_loss
from promptcd.metrics import ConfusionCounts, confusion, metrics
from promptcd.model import ChangeDetector
from promptcd.tensor import Tensor
from promptcd.tfam import TextFusionStage
from promptcd.training import RunConfig, evaluate, run_train, train_set_f1
from promptcd.vsfd import VisionSemanticDecoder


def report(num, label, ok, detail):
    print(f"\ncriterion {num} ({label}): {'PASS' if ok else 'FAIL'} - {detail}")
    return ok


def rand(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape).astype(np.float32)


def test_criterion_1_gradient_correctness():
    started = time.perf_counter()
    op_results = gc.run_op_suite()
    op_worst = max(err for _, err in op_results)
    model_results = gc.run_model_check()
    model_worst = max(err for _, err in model_results)
    elapsed = time.perf_counter() - started

    ok = (op_worst <= gc.OP_TOLERANCE and model_worst <= gc.MODEL_TOLERANCE
          and elapsed < 600.0)
    assert report(
        1, "gradient correctness", ok,
        f"{len(op_results)} ops worst {op_worst:.2e} (tol {gc.OP_TOLERANCE:g}), "
        f"{len(model_results)} model tensors worst {model_worst:.2e} "
        f"(tol {gc.MODEL_TOLERANCE:g}), {elapsed:.0f}s")


def test_criterion_2_shape_schedule():
    rng = np.random.default_rng(0)
    encoder = ImagePyramidEncoder(base=4, rng=rng)
    model = ChangeDetector(base=4, adapter_width=8, model_dim=16, heads=2,
                           text_dim=8, text_heads=2, text_layers=1,
                           rng=np.random.default_rng(1))
    model.eval()
    problems = []
    for size in (32, 64, 96, 128):
        x = Tensor(rand((1, 3, size, size), seed=size))
        with T.no_grad():
            pyramid = encoder(x)
            for i, level in enumerate(pyramid.levels):
                want = size // 2 ** (i + 2)
                if level.shape[2:] != (want, want):
                    problems.append(f"{size}px level {i}: {level.shape[2:]} != {want}")
            preds = model(x, x, model.encode_text("building"))
        if len(preds.maps) != 6:
            problems.append(f"{size}px: {len(preds.maps)} maps")
        for k, m in enumerate(preds.maps):
            if m.shape != (1, 1, size, size):
                problems.append(f"{size}px map {k}: {m.shape}")
    ok = not problems
    assert report(2, "shape schedule", ok,
                  "pyramid H/2^(i+2) and 6 full-resolution maps for H in "
                  "{32,64,96,128}" if ok else "; ".join(problems[:4]))


def test_criterion_3_loss_algebra():
    cfg = LossConfig(alpha=0.2, beta=0.1)
    weight_sum = (1.0 - cfg.alpha - cfg.beta) + cfg.alpha + cfg.beta
    sum_ok = abs(weight_sum - 1.0) < 1e-12

    rng = np.random.default_rng(2)
    p = rng.uniform(0.1, 0.9, (2, 1, 8, 8)).astype(np.float32)
    y = (rng.uniform(size=(2, 1, 8, 8)) > 0.5).astype(np.float32)
    maps = [Tensor(p) for _ in range(6)]
    total, _ = total_loss(maps, Tensor(y), LossConfig(alpha=0.0, beta=0.0))
    ce_ref = bce(Tensor(p), Tensor(y))
    ce_ok = abs(float(total.data) - float(ce_ref.data)) < 1e-7

    hp = Tensor(np.array([[[[1.0, 0.0]]]], dtype=np.float32))
    hy = Tensor(np.array([[[[1.0, 1.0]]]], dtype=np.float32))
    dice_err = abs(float(dice_loss(hp, hy, eps=1.0).data) - 0.25)
    iou_err = abs(float(iou_loss(hp, hy, eps=1.0).data) - 1.0 / 3.0)
    hand_ok = dice_err < 1e-6 and iou_err < 1e-6

    ok = sum_ok and ce_ok and hand_ok
    assert report(3, "loss algebra", ok,
                  f"weights sum 1, alpha=beta=0 gives CE (diff "
                  f"{abs(float(total.data) - float(ce_ref.data)):.1e}), hand Dice/IoU "
                  f"errs {dice_err:.1e}/{iou_err:.1e}")


def test_criterion_4_metric_oracle():
    rng = np.random.default_rng(3)
    exact = True
    identity_worst = 0.0
    for _ in range(100):
        pred = (rng.uniform(size=(16, 16)) > rng.uniform(0.1, 0.9)).astype(np.int64)
        ref = (rng.uniform(size=(16, 16)) > rng.uniform(0.1, 0.9)).astype(np.int64)
        c = confusion(pred, ref)
        tp = int(((pred == 1) & (ref == 1)).sum())
        fp = int(((pred == 1) & (ref == 0)).sum())
        fn = int(((pred == 0) & (ref == 1)).sum())
        tn = int(((pred == 0) & (ref == 0)).sum())
        if (c.tp, c.fp, c.fn, c.tn) != (tp, fp, fn, tn):
            exact = False
        m = metrics(c)
        pre = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * pre * rec / (pre + rec) if pre + rec else 0.0
        iou = tp / (tp + fp + fn) if tp + fp + fn else 0.0
        oa = (tp + tn) / 256
        if (m["Pre"], m["Rec"], m["F1"], m["IoU"], m["OA"]) != (pre, rec, f1, iou, oa):
            exact = False
        identity_worst = max(identity_worst,
                             abs(m["F1"] - 2 * m["IoU"] / (1 + m["IoU"])))
    ok = exact and identity_worst <= 1e-12
    assert report(4, "metric oracle", ok,
                  f"100 random 16x16 pairs exact, F1 identity worst "
                  f"{identity_worst:.1e} (tol 1e-12)")


def test_criterion_5_attention_invariances():
    words = rand((4, 8), seed=5)
    perm = [2, 0, 3, 1]

    stage = TextFusionStage(visual_dim=8, text_dim=8, model_dim=16, heads=4,
                            rng=np.random.default_rng(6))
    feat = Tensor(rand((2, 8, 6, 6), seed=7))
    with T.no_grad():
        fused = stage(feat, Tensor(words)).data
        fused_p = stage(feat, Tensor(words[perm])).data
    tfam_diff = np.abs(fused - fused_p).max()

    dec = VisionSemanticDecoder(model_dim=16, text_dim=8, heads=4,
                                rng=np.random.default_rng(8))
    scales = [Tensor(rand((1, 16, 8 // 2 ** min(i, 2), 8 // 2 ** min(i, 2)),
                          seed=9 + i)) for i in range(4)]
    with T.no_grad():
        dec_out = dec.decode_scales(scales, Tensor(words))
        dec_out_p = dec.decode_scales(scales, Tensor(words[perm]))
    dec_diff = max(np.abs(a.data - b.data).max() for a, b in zip(dec_out, dec_out_p))

    q = Tensor(rand((2, 4, 5, 8), seed=20))
    k = Tensor(rand((2, 4, 7, 8), seed=21))
    v = Tensor(rand((2, 4, 7, 8), seed=22))
    with T.no_grad():
        _, weights = nn.scaled_dot_attention(q, k, v)
        soft = T.softmax(Tensor(rand((50, 9), seed=23)), axis=-1)
    row_err = max(np.abs(weights.data.sum(axis=-1) - 1.0).max(),
                  np.abs(soft.data.sum(axis=-1) - 1.0).max())

    ok = tfam_diff <= 1e-5 and dec_diff <= 1e-5 and row_err <= 1e-6
    assert report(5, "attention invariances", ok,
                  f"word-permutation diffs: fusion {tfam_diff:.1e}, decoder "
                  f"{dec_diff:.1e} (tol 1e-5); softmax row-sum err {row_err:.1e} "
                  f"(tol 1e-6)")


TINY = ["--base", "4", "--adapter-width", "8", "--model-dim", "16",
        "--heads", "2", "--text-dim", "8"]


def test_criterion_6_frozen_encoder_contract(tmp_path):
    data = str(tmp_path / "data")
    generate_dataset(data, scenes=4, h=64, w=64, seed=61)
    checkpoints = {}
    for steps in (0, 50):
        out = str(tmp_path / f"run{steps}")
        rc = cli.main(["train", "--dataset", data, "--out", out,
                       "--steps", str(steps), "--seed", "3",
                       "--freeze-encoder", *TINY])
        assert rc == 0
        checkpoints[steps] = read_checkpoint(os.path.join(out, "checkpoint.bin"))

    encoder_names = sorted(
        n for n in checkpoints[0]
        if n.startswith("image_encoder.") or n.startswith("text_encoder."))
    same = all(
        checkpoints[0][n].tobytes() == checkpoints[50][n].tobytes()
        for n in encoder_names)
    trained_names = sorted(set(checkpoints[0]) - set(encoder_names))
    moved = any(
        checkpoints[0][n].tobytes() != checkpoints[50][n].tobytes()
        for n in trained_names)

    ok = bool(encoder_names) and same and moved
    assert report(6, "frozen-encoder contract", ok,
                  f"{len(encoder_names)} encoder tensors byte-identical across 50 "
                  f"steps; non-encoder weights updated: {moved}")


def test_criterion_7_overfit_sanity(tmp_path):
    data = str(tmp_path / "data")
    generate_dataset(data, scenes=4, h=64, w=64, seed=71)  # 2 classes -> 8 pairs
    dataset = read_dataset(data)
    assert len(dataset) == 8

    cfg = RunConfig(seed=1, steps=2000, lr=1e-4, batch_size=4, flip_prob=0.0,
                    dataset_dir=data, out_dir=str(tmp_path / "run"))
    started = time.perf_counter()
    best = {"f1": 0.0}

    def stop(step, model, log):
        if step % 50 == 0:
            m = train_set_f1(model, dataset)
            best["f1"] = max(best["f1"], m["F1"])
            return m["F1"] >= 0.95
        return False

    model, log = run_train(cfg, stop_fn=stop)
    elapsed = time.perf_counter() - started
    final = train_set_f1(model, dataset)
    best["f1"] = max(best["f1"], final["F1"])

    ok = best["f1"] >= 0.95 and len(log.records) <= 2000 and elapsed < 1800.0
    assert report(7, "overfit sanity", ok,
                  f"train F1 {best['f1']:.4f} (bar 0.95) after {len(log.records)} "
                  f"steps, {elapsed:.0f}s (budget 1800s)")


def test_criterion_8_language_guidance(tmp_path):
    train_dir = str(tmp_path / "train")
    held_dir = str(tmp_path / "held")
    generate_dataset(train_dir, scenes=512, h=64, w=64, seed=81)
    generate_dataset(held_dir, scenes=48, h=64, w=64, seed=82)
    held = read_dataset(held_dir)

    cfg = RunConfig(seed=7, steps=3000, lr=1e-4, batch_size=4,
                    dataset_dir=train_dir, out_dir=str(tmp_path / "run"))
    state = {}

    def measure(model):
        per, _ = evaluate(model, held)
        swapped, _ = evaluate(model, held, swap_prompts=True)
        state["b"] = per.get("building", {}).get("IoU", 0.0)
        state["r"] = per.get("road", {}).get("IoU", 0.0)
        state["sb"] = swapped.get("building", {}).get("IoU", 1.0)
        state["sr"] = swapped.get("road", {}).get("IoU", 1.0)
        return (state["b"] >= 0.80 and state["r"] >= 0.80
                and state["sb"] <= 0.30 and state["sr"] <= 0.30)

    def stop(step, model, log):
        return step % 250 == 0 and measure(model)

    model, log = run_train(cfg, stop_fn=stop)
    ok = measure(model)
    assert report(8, "language guidance", ok,
                  f"held-out IoU building {state['b']:.3f} / road {state['r']:.3f} "
                  f"(bar 0.80); swapped {state['sb']:.3f} / {state['sr']:.3f} "
                  f"(bar 0.30) after {len(log.records)} steps")


def test_criterion_9_determinism(tmp_path):
    data = str(tmp_path / "data")
    generate_dataset(data, scenes=3, h=64, w=64, seed=91)

    losses = []
    for sub in ("t1", "t2"):
        out = str(tmp_path / sub)
        rc = cli.main(["train", "--dataset", data, "--out", out, "--steps", "5",
                       "--seed", "4", *TINY])
        assert rc == 0
        with open(os.path.join(out, "loss.csv"), "rb") as fh:
            losses.append(fh.read())
    train_ok = losses[0] == losses[1]

    ckpt = os.path.join(str(tmp_path / "t1"), "checkpoint.bin")
    name = sorted(os.listdir(os.path.join(data, "A")))[0]
    pngs = []
    for sub in ("i1", "i2"):
        out = str(tmp_path / sub)
        rc = cli.main(["infer", os.path.join(data, "A", name),
                       os.path.join(data, "B", name), "building",
                       "--checkpoint", ckpt, "--out", out, "--seed", "4", *TINY])
        assert rc == 0
        blob = b""
        for fname in ("mask.png", "prob.png"):
            with open(os.path.join(out, fname), "rb") as fh:
                blob += fh.read()
        pngs.append(blob)
    infer_ok = pngs[0] == pngs[1]

    ok = train_ok and infer_ok
    assert report(9, "determinism", ok,
                  f"loss CSVs byte-identical: {train_ok}; infer PNGs "
                  f"byte-identical: {infer_ok}")
