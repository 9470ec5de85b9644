"""Parameters, module tree, and the small set of layers the model needs."""

import math

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor


class Parameter:
    """A named, trainable tensor.

    `frozen=True` removes the parameter from gradient accumulation and
    optimizer updates; its bytes stay fixed until unfrozen.
    """

    def __init__(self, data, name=""):
        self.tensor = Tensor(np.asarray(data, dtype=T.default_dtype()), requires_grad=True)
        self.name = name
        self.frozen = False

    @property
    def data(self):
        return self.tensor.data

    @data.setter
    def data(self, value):
        self.tensor.data = value

    @property
    def grad(self):
        return self.tensor.grad

    def set_frozen(self, frozen):
        self.frozen = bool(frozen)
        self.tensor.requires_grad = not self.frozen

    def __repr__(self):
        return f"Parameter({self.name or '<unnamed>'}, shape={self.tensor.data.shape}, frozen={self.frozen})"


class Module:
    """Minimal module tree: parameter/buffer registration and train/eval."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array):
        """Non-trainable state saved with checkpoints (e.g. BN running stats)."""
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield (prefix + name if prefix else name), p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + "." if prefix else name + ".")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield (prefix + name if prefix else name), b
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix + name + "." if prefix else name + ".")

    def modules(self):
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def train(self, mode=True):
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def stamp_parameter_names(self, prefix=""):
        """Write full tree paths into each Parameter's .name field."""
        for name, p in self.named_parameters(prefix):
            p.name = name

    def zero_grads(self):
        for p in self.parameters():
            p.tensor.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def set_frozen(module, frozen=True):
    """Freeze/unfreeze every parameter below `module`.

    Freezing also pins BatchNorm running statistics, so a frozen subtree
    is byte-stable across training steps.
    """
    for p in module.parameters():
        p.set_frozen(frozen)
    for m in module.modules():
        if isinstance(m, BatchNorm2d):
            m.frozen_stats = bool(frozen)


# ---------------------------------------------------------------------------
# layers


class Linear(Module):
    def __init__(self, in_features, out_features, rng, bias=True):
        super().__init__()
        limit = math.sqrt(6.0 / (in_features + out_features))
        self.weight = Parameter(rng.uniform(-limit, limit, size=(in_features, out_features)))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x):
        out = T.matmul(x, self.weight.tensor)
        if self.bias is not None:
            out = out + self.bias.tensor
        return out


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, pad=0, bias=True):
        super().__init__()
        std = math.sqrt(2.0 / (in_ch * kernel * kernel))
        self.weight = Parameter(rng.normal(0.0, std, size=(out_ch, in_ch, kernel, kernel)))
        self.bias = Parameter(np.zeros(out_ch)) if bias else None
        self.stride = stride
        self.pad = pad

    def forward(self, x):
        b = self.bias.tensor if self.bias is not None else None
        return T.conv2d(x, self.weight.tensor, bias=b, stride=self.stride, pad=self.pad)


class BatchNorm2d(Module):
    """Batch norm with running statistics (momentum 0.1).

    `frozen_stats` keeps the running buffers untouched and forces
    running-stat normalization even in train mode (the frozen-encoder
    regime).
    """

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels, dtype=T.default_dtype()))
        self.register_buffer("running_var", np.ones(channels, dtype=T.default_dtype()))
        self.momentum = momentum
        self.eps = eps
        self.frozen_stats = False

    def forward(self, x):
        use_batch_stats = self.training and not self.frozen_stats
        return T.batch_norm2d(
            x,
            self.gamma.tensor,
            self.beta.tensor,
            self.running_mean,
            self.running_var,
            training=use_batch_stats,
            momentum=self.momentum,
            eps=self.eps,
        )


class LayerNorm(Module):
    def __init__(self, dim, affine=True, eps=1e-5):
        super().__init__()
        if affine:
            self.gamma = Parameter(np.ones(dim))
            self.beta = Parameter(np.zeros(dim))
        else:
            self.gamma = None
            self.beta = None
        self.eps = eps

    def forward(self, x):
        g = self.gamma.tensor if self.gamma is not None else None
        b = self.beta.tensor if self.beta is not None else None
        return T.layer_norm(x, g, b, eps=self.eps)


class Embedding(Module):
    def __init__(self, count, dim, rng):
        super().__init__()
        self.table = Parameter(rng.normal(0.0, 0.02, size=(count, dim)))

    def forward(self, ids):
        return T.embedding_lookup(self.table.tensor, ids)


# ---------------------------------------------------------------------------
# attention plumbing shared by the text encoder, fusion stages, and decoder


def split_heads(x, heads):
    """(B, N, D) -> (B, heads, N, D/heads)."""
    b, n, d = x.shape
    if d % heads:
        raise ShapeError(f"dim {d} not divisible by {heads} heads")
    return T.transpose(T.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x):
    """(B, heads, N, dh) -> (B, N, heads*dh)."""
    b, h, n, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def scaled_dot_attention(q, k, v):
    """softmax(q k^T / sqrt(dh)) v over the last two axes.

    q: (..., N, dh), k/v: (..., L, dh); batch axes broadcast.  Returns the
    attended values and the attention weights.
    """
    dh = q.shape[-1]
    scores = T.matmul(q, T.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)))
    weights = T.softmax(scores * (1.0 / math.sqrt(dh)), axis=-1)
    return T.matmul(weights, v), weights


class SelfAttention(Module):
    """Standard multi-head self-attention with output projection."""

    def __init__(self, dim, heads, rng):
        super().__init__()
        self.heads = heads
        self.w_q = Linear(dim, dim, rng)
        self.w_k = Linear(dim, dim, rng)
        self.w_v = Linear(dim, dim, rng)
        self.w_o = Linear(dim, dim, rng)

    def forward(self, x):
        q = split_heads(self.w_q(x), self.heads)
        k = split_heads(self.w_k(x), self.heads)
        v = split_heads(self.w_v(x), self.heads)
        out, _ = scaled_dot_attention(q, k, v)
        return self.w_o(merge_heads(out))


class CrossAttention(Module):
    """Multi-head attention with distinct query and key/value sources."""

    def __init__(self, q_dim, kv_dim, dim, heads, rng):
        super().__init__()
        self.heads = heads
        self.w_q = Linear(q_dim, dim, rng)
        self.w_k = Linear(kv_dim, dim, rng)
        self.w_v = Linear(kv_dim, dim, rng)
        self.w_o = Linear(dim, dim, rng)

    def forward(self, queries, keys_values):
        q = split_heads(self.w_q(queries), self.heads)
        k = split_heads(self.w_k(keys_values), self.heads)
        v = split_heads(self.w_v(keys_values), self.heads)
        out, _ = scaled_dot_attention(q, k, v)
        return self.w_o(merge_heads(out))
