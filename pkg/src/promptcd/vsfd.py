"""Vision-semantic decoder: per-scale multimodal token mixing, top-down
pyramid integration, a global-language path, and the similarity
segmentation head that emits six full-resolution probability maps.
"""

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .encoders import PYRAMID_LEVELS
from .errors import DecoderError
from .tensor import Tensor

PREDICTION_COUNT = 6
MASK_THRESHOLD = 0.5

_POS_CACHE = {}


def sinusoidal_position_table(h, w, dim, dtype=np.float32):
    """2-D sinusoidal positional encodings for an (h, w) grid.

    The first dim/2 channels encode the row coordinate and the rest the
    column coordinate, each with interleaved sin/cos at geometric
    frequencies.  Parameter-free, values in [-1, 1], cached per grid.
    """
    key = (h, w, dim, np.dtype(dtype).str)
    cached = _POS_CACHE.get(key)
    if cached is not None:
        return cached

    def axis_table(n, d):
        pos = np.arange(n, dtype=np.float64)[:, None]
        idx = np.arange(d // 2, dtype=np.float64)[None, :]
        ang = pos / (10000.0 ** (2.0 * idx / d))
        out = np.zeros((n, d))
        out[:, 0::2] = np.sin(ang)
        out[:, 1::2] = np.cos(ang)
        return out

    half = dim // 2
    table = np.zeros((h, w, dim))
    table[:, :, :half] = axis_table(h, half)[:, None, :]
    table[:, :, half:] = axis_table(w, dim - half)[None, :, :]
    table = table.reshape(h * w, dim).astype(dtype)
    table.setflags(write=False)
    _POS_CACHE[key] = table
    return table


def tokenize_scale(feat):
    """(B, D, h, w) -> (B, h*w, D) row-major tokens with positions added."""
    b, d, h, w = feat.shape
    tokens = T.transpose(T.reshape(feat, (b, d, h * w)), (0, 2, 1))
    pos = Tensor(sinusoidal_position_table(h, w, d, feat.data.dtype))
    return tokens + pos


class ScaleDecoderBlock(nn.Module):
    """Joint self-attention over [visual tokens, projected word tokens],
    then cross-attention of the visual tokens against the word tokens.
    Only the visual tokens are returned; word positions are discarded.
    Word tokens carry no positional encoding."""

    def __init__(self, model_dim, text_dim, heads, rng):
        super().__init__()
        self.word_proj = nn.Linear(text_dim, model_dim, rng)
        self.msa_norm = nn.LayerNorm(model_dim)
        self.msa = nn.SelfAttention(model_dim, heads, rng)
        self.mca_norm = nn.LayerNorm(model_dim)
        self.mca = nn.CrossAttention(model_dim, model_dim, model_dim, heads, rng)

    def forward(self, vis_tokens, words):
        b, n, d = vis_tokens.shape
        w_tok = T.reshape(self.word_proj(words), (1, words.shape[0], d))
        joint = T.concat([vis_tokens, T.broadcast_to(w_tok, (b,) + w_tok.shape[1:])], axis=1)
        joint = joint + self.msa(self.msa_norm(joint))
        vis = T.slice_axis(joint, 1, 0, n)
        vis = vis + self.mca(self.mca_norm(vis), w_tok)
        return vis


class FpnIntegrator(nn.Module):
    """Lateral 1x1 convs and a top-down upsample-add path with 3x3
    smoothing after each merge; returns the stride-4 map."""

    def __init__(self, dim, rng):
        super().__init__()
        for i in range(PYRAMID_LEVELS):
            setattr(self, f"lateral{i}", nn.Conv2d(dim, dim, 1, rng))
        for i in range(PYRAMID_LEVELS - 1):
            setattr(self, f"smooth{i}", nn.Conv2d(dim, dim, 3, rng, pad=1))

    def forward(self, grids):
        if len(grids) != PYRAMID_LEVELS or any(g is None for g in grids):
            raise DecoderError(f"pyramid integration needs {PYRAMID_LEVELS} scales, got {grids}")
        p = self.lateral3(grids[3])
        for i in (2, 1, 0):
            h, w = grids[i].shape[2], grids[i].shape[3]
            up = T.bilinear_resize(p, h, w)
            p = getattr(self, f"smooth{i}")(getattr(self, f"lateral{i}")(grids[i]) + up)
        return p


class LanguagePath(nn.Module):
    """Global prompt vector attends over the integrated visual tokens
    (raw cross-attention, no output projection), then a self-attention
    over the 2-token set {projected global vector, content-aware token};
    the content-aware token after self-attention is the output."""

    def __init__(self, model_dim, text_dim, heads, rng):
        super().__init__()
        self.heads = heads
        self.model_dim = model_dim
        self.g_proj = nn.Linear(text_dim, model_dim, rng)
        self.w_q = nn.Linear(model_dim, model_dim, rng)
        self.w_k = nn.Linear(model_dim, model_dim, rng)
        self.w_v = nn.Linear(model_dim, model_dim, rng)
        self.msa_norm = nn.LayerNorm(model_dim)
        self.msa = nn.SelfAttention(model_dim, heads, rng)

    def forward(self, global_vec, fv_tokens):
        b = fv_tokens.shape[0]
        d = self.model_dim
        g = self.g_proj(T.reshape(global_vec, (1, global_vec.shape[0])))
        g = T.broadcast_to(T.reshape(g, (1, 1, d)), (b, 1, d))
        q = nn.split_heads(self.w_q(g), self.heads)
        k = nn.split_heads(self.w_k(fv_tokens), self.heads)
        v = nn.split_heads(self.w_v(fv_tokens), self.heads)
        attended, _ = nn.scaled_dot_attention(q, k, v)
        content = nn.merge_heads(attended)  # (B, 1, D)
        pair = T.concat([g, content], axis=1)
        pair = pair + self.msa(self.msa_norm(pair))
        return T.reshape(T.slice_axis(pair, 1, 1, 2), (b, d))


@dataclass
class PredictionSet:
    """Six probability maps at full resolution plus the binary mask.

    maps[0..3] come from the per-scale heads, maps[4] from the integrated
    pyramid head, and maps[5] is the language-similarity response: the
    final prediction, thresholded at 0.5 (ties count as change).
    """

    maps: list  # Tensor (B, 1, H, W) each, values in [0, 1]
    final_mask: Tensor  # (B, 1, H, W), values in {0, 1}

    def __post_init__(self):
        if len(self.maps) != PREDICTION_COUNT:
            raise DecoderError(f"expected {PREDICTION_COUNT} prediction maps, got {len(self.maps)}")

    @property
    def final_probability(self):
        return self.maps[-1]


class SegmentationHead(nn.Module):
    """1x1-conv heads on each decoded scale and on the integrated map,
    plus the similarity response between visual map and language vector;
    all upsampled to full resolution as probabilities."""

    def __init__(self, model_dim, rng):
        super().__init__()
        self.model_dim = model_dim
        for i in range(PYRAMID_LEVELS):
            setattr(self, f"aux{i}", nn.Conv2d(model_dim, 1, 1, rng))
        self.pyramid_head = nn.Conv2d(model_dim, 1, 1, rng)

    def forward(self, fv_map, f_l, grids, out_h, out_w):
        maps = []
        for i in range(PYRAMID_LEVELS):
            logits = getattr(self, f"aux{i}")(grids[i])
            maps.append(T.bilinear_resize(T.sigmoid(logits), out_h, out_w))
        maps.append(T.bilinear_resize(T.sigmoid(self.pyramid_head(fv_map)), out_h, out_w))

        b = fv_map.shape[0]
        f_l_grid = T.reshape(f_l, (b, self.model_dim, 1, 1))
        sim = (fv_map * f_l_grid).sum(axis=1, keepdims=True) * (1.0 / np.sqrt(self.model_dim))
        maps.append(T.bilinear_resize(T.sigmoid(sim), out_h, out_w))

        mask = Tensor((maps[-1].data >= MASK_THRESHOLD).astype(maps[-1].data.dtype))
        return PredictionSet(maps=maps, final_mask=mask)


class VisionSemanticDecoder(nn.Module):
    def __init__(self, model_dim, text_dim, heads, rng):
        super().__init__()
        self.model_dim = model_dim
        for i in range(PYRAMID_LEVELS):
            setattr(self, f"block{i}", ScaleDecoderBlock(model_dim, text_dim, heads, rng))
        self.fpn = FpnIntegrator(model_dim, rng)
        # keeps the integrated features at unit scale so the similarity
        # logits start inside the responsive range of the sigmoid
        self.out_norm = nn.LayerNorm(model_dim)
        self.language = LanguagePath(model_dim, text_dim, heads, rng)
        self.head = SegmentationHead(model_dim, rng)

    def decode_scales(self, fused_scales, words):
        grids = []
        for i, feat in enumerate(fused_scales):
            b, d, h, w = feat.shape
            tokens = tokenize_scale(feat)
            decoded = getattr(self, f"block{i}")(tokens, words)
            grids.append(T.reshape(T.transpose(decoded, (0, 2, 1)), (b, d, h, w)))
        return grids

    def forward(self, fused_scales, words, global_vec, out_h, out_w):
        grids = self.decode_scales(fused_scales, words)
        fv = self.fpn(grids)
        b, d, h4, w4 = fv.shape
        fv_tokens = self.out_norm(T.transpose(T.reshape(fv, (b, d, h4 * w4)), (0, 2, 1)))
        fv = T.reshape(T.transpose(fv_tokens, (0, 2, 1)), (b, d, h4, w4))
        f_l = self.language(global_vec, fv_tokens)
        return self.head(fv, f_l, grids, out_h, out_w)
