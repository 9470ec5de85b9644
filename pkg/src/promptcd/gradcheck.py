"""Central finite-difference gradient verification.

All checks run in float64 with step h=1e-5.  The relative error between
the analytic gradient a and the numeric estimate n is

    err = |a - n| / max(|a|, |n|)      (0 when both are below 1e-6)

so near-zero gradients are compared absolutely at the finite-difference
noise floor instead of blowing up the ratio.
"""

import numpy as np

from . import tensor as T
from .tensor import Tensor, backward


def rel_error(analytic, numeric):
    scale = max(abs(analytic), abs(numeric))
    if scale < 1e-6:
        return 0.0
    return abs(analytic - numeric) / scale


def _weighted_sum(out, rng):
    # random projection makes axis-transposition bugs visible; plain sum() hides them
    r = Tensor(rng.standard_normal(out.shape))
    return (out * r).sum()


def check_op(fn, input_shapes, h=1e-5, rng=None, positive=False):
    """Finite-difference check of one op against its analytic gradients.

    `fn` maps Tensor inputs to a Tensor output; every coordinate of every
    input is perturbed.  Returns the worst relative error.
    """
    rng = rng or np.random.default_rng(0)
    with T.use_dtype(np.float64):
        arrays = [rng.standard_normal(s) for s in input_shapes]
        if positive:
            arrays = [np.abs(a) + 0.5 for a in arrays]
        inputs = [Tensor(a, requires_grad=True) for a in arrays]
        proj_rng = np.random.default_rng(12345)
        out = fn(*inputs)
        loss = _weighted_sum(out, proj_rng)
        backward(loss)
        analytic = [inp.grad.copy() for inp in inputs]

        worst = 0.0
        for idx, inp in enumerate(inputs):
            flat = inp.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                with T.no_grad():
                    lo_plus = _weighted_sum(fn(*inputs), np.random.default_rng(12345)).item()
                flat[i] = orig - h
                with T.no_grad():
                    lo_minus = _weighted_sum(fn(*inputs), np.random.default_rng(12345)).item()
                flat[i] = orig
                numeric = (lo_plus - lo_minus) / (2 * h)
                worst = max(worst, rel_error(analytic[idx].reshape(-1)[i], numeric))
        return worst


def check_parameters(build, h=1e-5, coords_per_param=4):
    """Whole-model finite-difference check.

    `build` is a zero-argument callable run under float64 that returns
    (model, loss_fn) where loss_fn() performs a fresh forward pass and
    returns a scalar Tensor.  For every parameter the few coordinates
    with the largest analytic gradient magnitude are compared against
    central differences of the full loss; the difference of two O(1)
    loss values carries round-off noise near machine-eps / (2h), so
    near-zero coordinates are uninformative while the largest ones still
    expose any scaling, transposition or missed-accumulation bug.
    Returns a list of (parameter name, max relative error) pairs.
    """
    with T.use_dtype(np.float64):
        model, loss_fn = build()
        model.zero_grads()
        loss = loss_fn()
        backward(loss)
        report = []
        for name, p in model.named_parameters():
            if p.frozen:
                continue
            grad = p.tensor.grad
            if grad is None:
                report.append((name, float("inf")))
                continue
            flat = p.tensor.data.reshape(-1)
            gflat = grad.reshape(-1)
            n = flat.size
            picks = np.argsort(-np.abs(gflat))[:min(coords_per_param, n)]
            worst = 0.0
            for i in picks:
                orig = flat[i]
                flat[i] = orig + h
                with T.no_grad():
                    up = loss_fn().item()
                flat[i] = orig - h
                with T.no_grad():
                    down = loss_fn().item()
                flat[i] = orig
                numeric = (up - down) / (2 * h)
                worst = max(worst, rel_error(gflat[i], numeric))
            report.append((name, worst))
        return report


OP_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3


def _bn_train(x, g, b):
    c = x.shape[1]
    return T.batch_norm2d(x, g, b, np.zeros(c), np.ones(c), training=True)


def _bn_eval(x, g, b):
    c = x.shape[1]
    rm = np.linspace(-0.3, 0.4, c)
    rv = np.linspace(0.5, 1.5, c)
    return T.batch_norm2d(x, g, b, rm, rv, training=False)


def op_suite():
    """(name, fn, input shapes, check_op kwargs) for every primitive op."""
    ids = np.array([[0, 2, 1, 2], [3, 3, 0, 1]])
    return [
        ("add", T.add, [(3, 4), (3, 4)], {}),
        ("add_broadcast", T.add, [(2, 3, 4), (4,)], {}),
        ("sub", T.sub, [(3, 4), (3, 1)], {}),
        ("mul", T.mul, [(3, 4), (3, 4)], {}),
        ("div", T.div, [(3, 4), (3, 4)], {"positive": True}),
        ("matmul", T.matmul, [(3, 4), (4, 5)], {}),
        ("matmul_batch", T.matmul, [(2, 3, 4), (2, 4, 5)], {}),
        ("matmul_broadcast", T.matmul, [(2, 2, 3, 4), (1, 1, 4, 5)], {}),
        ("relu", T.relu, [(3, 4)], {}),
        ("sigmoid", T.sigmoid, [(3, 4)], {}),
        ("exp", T.exp, [(3, 4)], {}),
        ("log", T.log, [(3, 4)], {"positive": True}),
        ("clamp", lambda x: T.clamp(x, -0.5, 0.5), [(3, 4)], {}),
        ("softmax_last", lambda x: T.softmax(x, axis=-1), [(3, 5)], {}),
        ("softmax_mid", lambda x: T.softmax(x, axis=1), [(2, 4, 3)], {}),
        ("sum_all", lambda x: T.tensor_sum(x), [(3, 4)], {}),
        ("sum_axis", lambda x: T.tensor_sum(x, axis=1, keepdims=True), [(3, 4)], {}),
        ("mean_axis", lambda x: T.tensor_mean(x, axis=0), [(3, 4)], {}),
        ("reshape", lambda x: T.reshape(x, (4, 3)), [(3, 4)], {}),
        ("transpose", lambda x: T.transpose(x, (1, 0, 2)), [(2, 3, 4)], {}),
        ("concat", lambda a, b: T.concat([a, b], axis=1), [(2, 3), (2, 2)], {}),
        ("slice", lambda x: T.slice_axis(x, 1, 1, 3), [(2, 4)], {}),
        ("broadcast", lambda x: T.broadcast_to(x, (3, 2, 4)), [(2, 4)], {}),
        ("embedding", lambda t: T.embedding_lookup(t, ids), [(4, 3)], {}),
        ("conv2d", lambda x, w, b: T.conv2d(x, w, b, stride=1, pad=1),
         [(2, 3, 5, 5), (4, 3, 3, 3), (4,)], {}),
        ("conv2d_stride", lambda x, w, b: T.conv2d(x, w, b, stride=2, pad=0),
         [(1, 2, 6, 6), (3, 2, 2, 2), (3,)], {}),
        ("conv2d_nobias", lambda x, w: T.conv2d(x, w, stride=2, pad=1),
         [(1, 2, 4, 4), (2, 2, 3, 3)], {}),
        ("bilinear_up", lambda x: T.bilinear_resize(x, 5, 7), [(2, 3, 3, 4)], {}),
        ("bilinear_down", lambda x: T.bilinear_resize(x, 2, 2), [(1, 2, 5, 6)], {}),
        ("batch_norm_train", _bn_train, [(3, 2, 4, 4), (2,), (2,)], {}),
        ("batch_norm_eval", _bn_eval, [(3, 2, 4, 4), (2,), (2,)], {}),
        ("layer_norm", lambda x, g, b: T.layer_norm(x, g, b), [(3, 4, 6), (6,), (6,)], {}),
        ("layer_norm_plain", lambda x: T.layer_norm(x), [(3, 6)], {}),
    ]


def run_op_suite(h=1e-5):
    """Run every per-op check; returns [(name, max rel err)]."""
    return [(name, check_op(fn, shapes, h=h, **kw)) for name, fn, shapes, kw in op_suite()]


def build_toy_model(size=32, seed=7):
    """Zero-argument builder for check_parameters: a small full model on
    a random image pair with the composite training loss.

    Every parameter is jittered off its init before checking: zero-init
    biases otherwise leave relu inputs exactly at the kink (the deepest
    scale is a 1x1 grid whose batch norm output collapses to beta), where
    one-sided finite differences and the analytic subgradient disagree.
    """
    from .losses import total_loss
    from .model import ChangeDetector

    def build():
        rng = np.random.default_rng(seed)
        model = ChangeDetector(base=8, adapter_width=16, model_dim=32, heads=4,
                               text_dim=16, text_heads=2, text_layers=1, rng=rng)
        model.train()
        for _, p in model.named_parameters():
            p.tensor.data += rng.uniform(-0.05, 0.05, size=p.tensor.data.shape)
        a = Tensor(rng.uniform(0.0, 1.0, size=(8, 3, size, size)))
        b = Tensor(rng.uniform(0.0, 1.0, size=(8, 3, size, size)))
        y = Tensor((rng.uniform(0.0, 1.0, size=(8, 1, size, size)) > 0.7).astype(np.float64))

        def loss_fn():
            preds = model(a, b, model.encode_text("building"))
            return total_loss(preds, y)[0]

        return model, loss_fn

    return build


def run_model_check(size=32, coords_per_param=4, h=1e-5, seed=7):
    """Whole-model check at the small config; returns [(param, err)]."""
    return check_parameters(build_toy_model(size=size, seed=seed), h=h,
                            coords_per_param=coords_per_param)
