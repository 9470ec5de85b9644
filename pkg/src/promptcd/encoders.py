"""Visual pyramid encoder and prompt text encoder.

Both are small trainable stand-ins sized for CPU experiments: the image
encoder is a 4-stage convolutional net producing features at strides
4/8/16/32 with channels base*2^i, and the text encoder is an embedding
table with two self-attention layers plus a learned classifier token that
yields the whole-prompt embedding.
"""

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, VocabularyError
from .tensor import Tensor

PYRAMID_LEVELS = 4
MAX_PROMPT_TOKENS = 8
PAD_TOKEN = "<pad>"
DEFAULT_TOKENS = (PAD_TOKEN, "building", "road", "tank", "change")


class Vocabulary:
    """Ordered prompt-token list; index 0 is reserved for padding."""

    def __init__(self, tokens=DEFAULT_TOKENS):
        tokens = list(tokens)
        if not tokens or tokens[0] != PAD_TOKEN:
            raise ConfigError(f"vocabulary must start with the padding token {PAD_TOKEN!r}")
        if len(set(tokens)) != len(tokens):
            raise ConfigError("vocabulary contains duplicate tokens")
        self.tokens = tokens
        self._index = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self._index

    def encode(self, prompt):
        """Whitespace-tokenize a prompt into vocabulary indices."""
        words = prompt.split()
        if not words:
            raise VocabularyError("empty prompt")
        if len(words) > MAX_PROMPT_TOKENS:
            raise VocabularyError(f"prompt has {len(words)} tokens; the cap is {MAX_PROMPT_TOKENS}")
        ids = []
        for w in words:
            if w not in self._index:
                raise VocabularyError(f"unknown prompt token {w!r}; vocabulary: {self.tokens[1:]}")
            ids.append(self._index[w])
        return ids

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for t in self.tokens:
                f.write(t + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f if line.strip()]
        return cls(tokens)


@dataclass
class TextEmbedding:
    """Word-level rows plus the whole-prompt vector for one prompt."""

    words: Tensor  # (L, d_t)
    global_vec: Tensor  # (d_t,)
    token_ids: list = field(default_factory=list)

    @property
    def length(self):
        return self.words.shape[0]


@dataclass
class FeaturePyramid:
    """Four feature maps at strides 4/8/16/32 for one image batch."""

    levels: list  # Tensor (B, base*2^i, H/2^(i+2), W/2^(i+2)) for i=0..3

    def shapes(self):
        return [lvl.shape for lvl in self.levels]


class ConvBnRelu(nn.Module):
    def __init__(self, in_ch, out_ch, rng, stride=1):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, rng, stride=stride, pad=1)
        self.bn = nn.BatchNorm2d(out_ch)

    def forward(self, x):
        return T.relu(self.bn(self.conv(x)))


class ImagePyramidEncoder(nn.Module):
    """Stem of two stride-2 convs, then three stride-2 stages of two
    conv-BN-ReLU blocks each.  Emits one level per stage boundary."""

    def __init__(self, base, rng):
        super().__init__()
        self.base = base
        self.stem1 = ConvBnRelu(3, base, rng, stride=2)
        self.stem2 = ConvBnRelu(base, base, rng, stride=2)
        for i in (1, 2, 3):
            in_ch = base * 2 ** (i - 1)
            out_ch = base * 2**i
            setattr(self, f"stage{i}a", ConvBnRelu(in_ch, out_ch, rng, stride=2))
            setattr(self, f"stage{i}b", ConvBnRelu(out_ch, out_ch, rng, stride=1))

    def forward(self, img):
        b, c, h, w = img.shape
        if h % 32 or w % 32:
            raise ConfigError(f"image size {(h, w)} must be divisible by 32")
        x = self.stem2(self.stem1(img))
        levels = [x]
        for i in (1, 2, 3):
            x = getattr(self, f"stage{i}b")(getattr(self, f"stage{i}a")(x))
            levels.append(x)
        return FeaturePyramid(levels)


class TextSelfAttentionBlock(nn.Module):
    def __init__(self, dim, heads, rng):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = nn.SelfAttention(dim, heads, rng)

    def forward(self, x):
        return x + self.attn(self.norm(x))


class TextEncoder(nn.Module):
    """Prompt -> word rows f_w and a whole-prompt vector from a learned
    classifier token (not an average of words)."""

    def __init__(self, vocab, dim=64, heads=4, layers=2, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.vocab = vocab
        self.dim = dim
        self.embed = nn.Embedding(len(vocab), dim, rng)
        self.positions = nn.Parameter(rng.normal(0.0, 0.02, size=(MAX_PROMPT_TOKENS + 1, dim)))
        self.global_token = nn.Parameter(rng.normal(0.0, 0.02, size=(1, dim)))
        self.layers = layers
        for i in range(layers):
            setattr(self, f"block{i}", TextSelfAttentionBlock(dim, heads, rng))
        self.out_norm = nn.LayerNorm(dim, affine=False)

    def forward(self, token_ids):
        token_ids = list(token_ids)
        L = len(token_ids)
        words = self.embed(np.asarray(token_ids))  # (L, dim)
        seq = T.concat([self.global_token.tensor, words], axis=0)  # (L+1, dim)
        seq = seq + T.slice_axis(self.positions.tensor, 0, 0, L + 1)
        x = T.reshape(seq, (1, L + 1, self.dim))
        for i in range(self.layers):
            x = getattr(self, f"block{i}")(x)
        x = self.out_norm(x)
        x = T.reshape(x, (L + 1, self.dim))
        global_vec = T.reshape(T.slice_axis(x, 0, 0, 1), (self.dim,))
        word_rows = T.slice_axis(x, 0, 1, L + 1)
        return TextEmbedding(words=word_rows, global_vec=global_vec, token_ids=token_ids)

    def encode_prompt(self, prompt):
        return self.forward(self.vocab.encode(prompt))
