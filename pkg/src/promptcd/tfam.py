"""Text fusion attention: inject word-level semantics into each visual
scale via multi-head cross-attention, then apply a learned spatial gate.

The cross-attention here follows the raw attention form (query
projection of the visual tokens against key/value projections of the
word rows, softmax over the word axis, no output projection) with the
attended values added residually back onto the visual tokens.  The gate
is a single 7x7 conv producing a one-channel sigmoid map that multiplies
the fused features elementwise.
"""

import math

from . import nn
from . import tensor as T
from .encoders import PYRAMID_LEVELS


class CrossWordAttention(nn.Module):
    """Visual queries over word key/value pairs, no output projection."""

    def __init__(self, visual_dim, text_dim, model_dim, heads, rng):
        super().__init__()
        self.heads = heads
        self.model_dim = model_dim
        self.w_q = nn.Linear(visual_dim, model_dim, rng)
        self.w_k = nn.Linear(text_dim, model_dim, rng)
        self.w_v = nn.Linear(text_dim, model_dim, rng)
        self.res_proj = None if visual_dim == model_dim else nn.Linear(visual_dim, model_dim, rng)

    def forward(self, tokens, words, return_weights=False):
        """tokens: (B, N, visual_dim); words: (L, text_dim) -> (B, N, model_dim)."""
        L = words.shape[0]
        q = nn.split_heads(self.w_q(tokens), self.heads)  # (B, h, N, dh)
        kv_shape = (1, L, self.model_dim)
        k = nn.split_heads(T.reshape(self.w_k(words), kv_shape), self.heads)  # (1, h, L, dh)
        v = nn.split_heads(T.reshape(self.w_v(words), kv_shape), self.heads)
        attended, weights = nn.scaled_dot_attention(q, k, v)
        attended = nn.merge_heads(attended)
        residual = tokens if self.res_proj is None else self.res_proj(tokens)
        out = residual + attended
        if return_weights:
            return out, weights  # weights: (B, h, N, L)
        return out


class SpatialGate(nn.Module):
    """7x7 conv -> 1 channel -> sigmoid, multiplied onto the input."""

    def __init__(self, dim, rng):
        super().__init__()
        self.conv = nn.Conv2d(dim, 1, 7, rng, pad=3)

    def forward(self, x, return_gate=False):
        gate = T.sigmoid(self.conv(x))
        out = x * gate
        if return_gate:
            return out, gate
        return out


class TextFusionStage(nn.Module):
    """One pyramid scale: cross-attention over words, then the gate."""

    def __init__(self, visual_dim, text_dim, model_dim, heads, rng):
        super().__init__()
        self.model_dim = model_dim
        self.cross = CrossWordAttention(visual_dim, text_dim, model_dim, heads, rng)
        self.gate = SpatialGate(model_dim, rng)

    def forward(self, feat, words, collect=None):
        b, c, h, w = feat.shape
        tokens = T.transpose(T.reshape(feat, (b, c, h * w)), (0, 2, 1))
        fused, attn = self.cross(tokens, words, return_weights=True)
        grid = T.reshape(T.transpose(fused, (0, 2, 1)), (b, self.model_dim, h, w))
        gated, gate = self.gate(grid, return_gate=True)
        if collect is not None:
            collect["attention"] = attn
            collect["gate"] = gate
        return gated


class TextFusion(nn.Module):
    """The four per-scale fusion stages."""

    def __init__(self, visual_dim, text_dim, model_dim, heads, rng):
        super().__init__()
        for i in range(PYRAMID_LEVELS):
            setattr(self, f"scale{i}", TextFusionStage(visual_dim, text_dim, model_dim, heads, rng))

    def forward(self, fused_levels, words, collect=None):
        out = []
        for i, feat in enumerate(fused_levels):
            maps = {} if collect is not None else None
            out.append(getattr(self, f"scale{i}")(feat, words, collect=maps))
            if collect is not None:
                collect[f"scale{i}"] = maps
        return out
