"""Full prompt-conditioned change detector.

A shared convolutional pyramid encodes both image dates, lightweight
adapters fuse the two feature stacks per scale, word-level prompt
features gate each fused scale, and the vision-semantic decoder turns
the result into six probability maps plus a binary change mask.
"""

import numpy as np

from . import nn
from . import tensor as T
from .adapters import AdapterStack
from .encoders import (
    DEFAULT_TOKENS,
    ImagePyramidEncoder,
    TextEncoder,
    Vocabulary,
)
from .tensor import Tensor, no_grad
from .tfam import TextFusion
from .vsfd import MASK_THRESHOLD, VisionSemanticDecoder


class ChangeDetector(nn.Module):
    """End-to-end detector; ``forward`` expects two image batches shaped
    (B, 3, H, W) with H and W divisible by 32, and a text embedding from
    ``encode_text``.  All samples in a batch share one prompt."""

    def __init__(self, vocab=None, base=16, adapter_width=64, model_dim=128,
                 heads=4, text_dim=64, text_heads=4, text_layers=2, rng=None):
        super().__init__()
        if rng is None:
            rng = np.random.default_rng(0)
        if vocab is None:
            vocab = Vocabulary(DEFAULT_TOKENS)
        self.vocab = vocab
        self.base = base
        self.image_encoder = ImagePyramidEncoder(base, rng)
        self.text_encoder = TextEncoder(vocab, text_dim, text_heads, text_layers, rng)
        self.adapters = AdapterStack(base, adapter_width, rng)
        self.fusion = TextFusion(2 * adapter_width, text_dim, model_dim, heads, rng)
        self.decoder = VisionSemanticDecoder(model_dim, text_dim, heads, rng)
        self._calibrate_norms(rng)
        self.stamp_parameter_names()

    def _calibrate_norms(self, rng):
        """Set every batch-norm running statistic from one deterministic
        probe batch, then pin the buffers.

        The image encoder stands in for a pretrained backbone, so its
        normalizers arrive fixed instead of drifting with training
        batches.  The adapter statistics are pinned too: their input
        distribution is static once the encoder is frozen, and without
        pinning, train-mode batch statistics make each sample's features
        depend on its batch mates, which blocks convergence on precise
        mask boundaries.  Affine terms stay trainable throughout.
        """
        bns = [m for m in self.modules() if isinstance(m, nn.BatchNorm2d)]
        momenta = [bn.momentum for bn in bns]
        for bn in bns:
            bn.momentum = 1.0
            bn.frozen_stats = False
        was_training = self.training
        self.train()
        with no_grad():
            dtype = T.default_dtype()
            coarse = Tensor(rng.uniform(0.1, 0.9, size=(4, 3, 8, 8)).astype(dtype))
            base = T.bilinear_resize(coarse, 64, 64)
            speckle = rng.normal(0.0, 0.02, size=base.shape)
            probe = Tensor(np.clip(base.data + speckle, 0.0, 1.0).astype(dtype))
            pyramid = self.image_encoder(probe)
            self.adapters(pyramid, pyramid)
        for bn, momentum in zip(bns, momenta):
            bn.momentum = momentum
            bn.frozen_stats = True
        if not was_training:
            self.eval()

    def encode_text(self, prompt):
        return self.text_encoder.encode_prompt(prompt)

    def freeze_encoders(self, frozen=True):
        """Freeze (or thaw) both the image and the text encoder: their
        parameters stop receiving updates and batch-norm running
        statistics stop drifting."""
        nn.set_frozen(self.image_encoder, frozen)
        nn.set_frozen(self.text_encoder, frozen)

    def forward(self, img_a, img_b, text, collect_maps=None):
        pyr_a = self.image_encoder(img_a)
        pyr_b = self.image_encoder(img_b)
        fused = self.adapters(pyr_a, pyr_b)
        gated = self.fusion(fused, text.words, collect=collect_maps)
        out_h, out_w = img_a.shape[2], img_a.shape[3]
        return self.decoder(gated, text.words, text.global_vec, out_h, out_w)


def predict(model, img_a, img_b, prompt, collect_maps=None):
    """Run one image pair through the model in eval mode.

    Accepts (3, H, W) float arrays in [0, 1]; returns (probability,
    mask) as (H, W) float arrays, probability in [0, 1] and mask binary.
    """
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            text = model.encode_text(prompt)
            a = Tensor(np.asarray(img_a)[None])
            b = Tensor(np.asarray(img_b)[None])
            preds = model(a, b, text, collect_maps=collect_maps)
            prob = preds.final_probability.data[0, 0]
            mask = preds.final_mask.data[0, 0]
    finally:
        if was_training:
            model.train()
    return prob, mask


def window_starts(total, window, stride):
    """Top-left offsets covering [0, total) with the final window pinned
    to the boundary; strictly increasing."""
    if window > total:
        raise ValueError(f"window {window} exceeds extent {total}")
    starts = list(range(0, total - window + 1, max(stride, 1)))
    if starts[-1] != total - window:
        starts.append(total - window)
    return starts


def predict_sliding(model, img_a, img_b, prompt, window, stride):
    """Tile a large pair with overlapping windows and stitch a full
    probability map.  Each pixel takes its value from the window whose
    center is nearest, so only window interiors are trusted; the
    ownership regions partition the image exactly.
    """
    a = np.asarray(img_a)
    h, w = a.shape[1], a.shape[2]
    ys = window_starts(h, window, stride)
    xs = window_starts(w, window, stride)

    def owned(starts, size, extent):
        centers = [s + size / 2.0 for s in starts]
        bounds = [0]
        for c0, c1 in zip(centers[:-1], centers[1:]):
            bounds.append(int(round((c0 + c1) / 2.0)))
        bounds.append(extent)
        return [(bounds[i], bounds[i + 1]) for i in range(len(starts))]

    own_y = owned(ys, window, h)
    own_x = owned(xs, window, w)

    prob = np.zeros((h, w), dtype=np.float32)
    for iy, y0 in enumerate(ys):
        for ix, x0 in enumerate(xs):
            tile_prob, _ = predict(
                model,
                a[:, y0:y0 + window, x0:x0 + window],
                np.asarray(img_b)[:, y0:y0 + window, x0:x0 + window],
                prompt,
            )
            ry0, ry1 = own_y[iy]
            rx0, rx1 = own_x[ix]
            prob[ry0:ry1, rx0:rx1] = tile_prob[ry0 - y0:ry1 - y0, rx0 - x0:rx1 - x0]
    mask = (prob >= MASK_THRESHOLD).astype(np.float32)
    return prob, mask
