"""Parameter containers and the building blocks of the encoder/decoder stacks."""

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor

NEG_INF = -1e9


class Module:
    """Attribute-walking parameter container.

    Parameters are leaf Tensors with ``requires_grad``; sub-modules may be
    stored directly, in lists, or in dicts.  Names follow attribute order.
    """

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            yield from _walk(value, prefix + key)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise KeyError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != expected {p.shape}")
            p.data = value.astype(p.dtype, copy=True)


def _walk(value, name):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")
    elif isinstance(value, dict):
        for key, item in value.items():
            yield from _walk(item, f"{name}.{key}")


def parameter(data):
    return Tensor(data, requires_grad=True)


def xavier(rng, fan_in, fan_out, shape=None):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, shape or (fan_in, fan_out))


class Linear(Module):
    def __init__(self, rng, d_in, d_out):
        self.weight = parameter(xavier(rng, d_in, d_out))
        self.bias = parameter(np.zeros(d_out))

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gain = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, rng, num, dim):
        self.table = parameter(rng.normal(0.0, dim ** -0.5, (num, dim)))

    def __call__(self, ids):
        return T.embedding(ids, self.table)


def sinusoidal_encoding(length, dim):
    pos = np.arange(length)[:, None]
    div = np.exp(np.arange(0, dim, 2) * (-math.log(10000.0) / dim))
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div)
    return pe


class MultiHeadAttention(Module):
    def __init__(self, rng, dim, heads, dropout_rate):
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim)
        self.v = Linear(rng, dim, dim)
        self.out = Linear(rng, dim, dim)
        self.heads = heads
        self.dropout_rate = dropout_rate

    def __call__(self, query, memory, mask, rng=None):
        """query (B, Tq, d), memory (B, Tk, d); mask broadcasts to (B, Tq, Tk), True = hidden."""
        batch, tq, dim = query.shape
        tk = memory.shape[1]
        h, dk = self.heads, dim // self.heads
        q = self.q(query).reshape(batch, tq, h, dk).transpose(0, 2, 1, 3)
        k = self.k(memory).reshape(batch, tk, h, dk).transpose(0, 2, 3, 1)
        v = self.v(memory).reshape(batch, tk, h, dk).transpose(0, 2, 1, 3)
        scores = T.scale(q @ k, 1.0 / math.sqrt(dk))
        if mask is not None:
            scores = T.masked_fill(scores, mask[:, None], NEG_INF)
        attn = T.dropout(T.softmax(scores), self.dropout_rate, rng)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(batch, tq, dim)
        return self.out(ctx)


class FeedForward(Module):
    def __init__(self, rng, dim, hidden, activation, dropout_rate):
        self.w1 = Linear(rng, dim, hidden)
        self.w2 = Linear(rng, hidden, dim)
        self.activation = activation
        self.dropout_rate = dropout_rate

    def __call__(self, x, rng=None):
        return self.w2(T.dropout(self.activation(self.w1(x)), self.dropout_rate, rng))


class ConvModule(Module):
    """Pointwise conv -> GLU -> depthwise conv -> layer norm -> swish -> pointwise conv.

    Layer norm replaces batch norm so every utterance is normalised on its own.
    """

    def __init__(self, rng, dim, kernel):
        self.pointwise1 = Linear(rng, dim, 2 * dim)
        self.depthwise = parameter(xavier(rng, kernel, kernel, (kernel, dim)))
        self.depthwise_bias = parameter(np.zeros(dim))
        self.norm = LayerNorm(dim)
        self.pointwise2 = Linear(rng, dim, dim)

    def __call__(self, x, pad_mask):
        x = T.glu(T.pointwise_conv1d(x, self.pointwise1.weight, self.pointwise1.bias))
        if pad_mask is not None:
            x = T.masked_fill(x, pad_mask[:, :, None], 0.0)
        x = T.depthwise_conv1d(x, self.depthwise, self.depthwise_bias)
        x = T.swish(self.norm(x))
        return T.pointwise_conv1d(x, self.pointwise2.weight, self.pointwise2.bias)


class TransformerEncoderLayer(Module):
    def __init__(self, rng, cfg):
        d = cfg.attention_dim
        self.norm_att = LayerNorm(d)
        self.self_attn = MultiHeadAttention(rng, d, cfg.num_heads, cfg.dropout_rate)
        self.norm_ff = LayerNorm(d)
        self.ffn = FeedForward(rng, d, cfg.ffn_dim, T.relu, cfg.dropout_rate)
        self.dropout_rate = cfg.dropout_rate

    def __call__(self, x, att_mask, pad_mask, rng=None):
        p = self.dropout_rate
        y = self.norm_att(x)
        x = x + T.dropout(self.self_attn(y, y, att_mask, rng), p, rng)
        return x + T.dropout(self.ffn(self.norm_ff(x), rng), p, rng)


class ConformerEncoderLayer(Module):
    """Half-step FFN, self-attention, convolution, half-step FFN, final norm."""

    def __init__(self, rng, cfg):
        d = cfg.attention_dim
        self.norm_ff1 = LayerNorm(d)
        self.ffn1 = FeedForward(rng, d, cfg.ffn_dim, T.swish, cfg.dropout_rate)
        self.norm_att = LayerNorm(d)
        self.self_attn = MultiHeadAttention(rng, d, cfg.num_heads, cfg.dropout_rate)
        self.norm_conv = LayerNorm(d)
        self.conv = ConvModule(rng, d, cfg.conv_kernel)
        self.norm_ff2 = LayerNorm(d)
        self.ffn2 = FeedForward(rng, d, cfg.ffn_dim, T.swish, cfg.dropout_rate)
        self.norm_final = LayerNorm(d)
        self.dropout_rate = cfg.dropout_rate

    def __call__(self, x, att_mask, pad_mask, rng=None):
        p = self.dropout_rate
        x = x + T.scale(T.dropout(self.ffn1(self.norm_ff1(x), rng), p, rng), 0.5)
        y = self.norm_att(x)
        x = x + T.dropout(self.self_attn(y, y, att_mask, rng), p, rng)
        x = x + T.dropout(self.conv(self.norm_conv(x), pad_mask), p, rng)
        x = x + T.scale(T.dropout(self.ffn2(self.norm_ff2(x), rng), p, rng), 0.5)
        return self.norm_final(x)


class DecoderLayer(Module):
    """Masked self-attention, source attention over the encoder, feed-forward."""

    def __init__(self, rng, cfg):
        d = cfg.attention_dim
        self.norm_self = LayerNorm(d)
        self.self_attn = MultiHeadAttention(rng, d, cfg.num_heads, cfg.dropout_rate)
        self.norm_src = LayerNorm(d)
        self.src_attn = MultiHeadAttention(rng, d, cfg.num_heads, cfg.dropout_rate)
        self.norm_ff = LayerNorm(d)
        self.ffn = FeedForward(rng, d, cfg.ffn_dim, T.relu, cfg.dropout_rate)
        self.dropout_rate = cfg.dropout_rate

    def __call__(self, x, self_mask, memory, memory_mask, rng=None):
        p = self.dropout_rate
        y = self.norm_self(x)
        x = x + T.dropout(self.self_attn(y, y, self_mask, rng), p, rng)
        x = x + T.dropout(self.src_attn(self.norm_src(x), memory, memory_mask, rng), p, rng)
        return x + T.dropout(self.ffn(self.norm_ff(x), rng), p, rng)
