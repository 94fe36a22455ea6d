"""Frame-wise embedding network: stacked self-attention blocks, no positional encoding.

Also holds the fixed-size classification head of the conventional
(attractor-free) model.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigurationError, Module, uniform_init


class Linear(Module):
    def __init__(self, rng, n_in, n_out):
        self.w = uniform_init(rng, (n_in, n_out), n_in)
        self.b = uniform_init(rng, (n_out,), n_in)

    def __call__(self, x):
        return ad.matmul(x, self.w) + self.b


class LayerNorm(Module):
    def __init__(self, dim):
        self.gain = ad.parameter(np.ones(dim))
        self.bias = ad.parameter(np.zeros(dim))

    def __call__(self, x):
        return ad.layer_norm(x, self.gain, self.bias)


class EncoderBlock(Module):
    """Post-norm block: attention, add & norm, feed-forward (ReLU), add & norm."""

    def __init__(self, rng, dim, num_heads, ff_dim):
        if dim % num_heads:
            raise ConfigurationError(f"embedding dim {dim} is not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.attn = {}
        for name in ("q", "k", "v", "o"):
            self.attn["w" + name] = uniform_init(rng, (dim, dim), dim)
            self.attn["b" + name] = uniform_init(rng, (dim,), dim)
        self.norm1 = LayerNorm(dim)
        self.ff1 = Linear(rng, dim, ff_dim)
        self.ff2 = Linear(rng, ff_dim, dim)
        self.norm2 = LayerNorm(dim)

    def __call__(self, x, fused=True, dropout=0.0, rng=None):
        # dropout (training only) acts on each sublayer output before the residual sum
        a = ad.multi_head_self_attention(x, self.attn, self.num_heads, fused=fused)
        h = self.norm1(x + ad.dropout(a, dropout, rng))
        return self.norm2(h + ad.dropout(self.ff2(ad.relu(self.ff1(h))), dropout, rng))


class EncoderStack(Module):
    """Input projection followed by ``num_blocks`` encoder blocks."""

    def __init__(self, rng, feat_dim, dim=256, num_blocks=4, num_heads=4, ff_dim=None):
        self.feat_dim, self.dim = feat_dim, dim
        self.proj = Linear(rng, feat_dim, dim)
        self.blocks = [EncoderBlock(rng, dim, num_heads, ff_dim or 4 * dim) for _ in range(num_blocks)]

    def __call__(self, x, fused=True):
        return embed(x, self, fused=fused)


def embed(x, stack, fused=True, dropout=0.0, rng=None):
    """Map features (T, F) or (B, T, F) to embeddings of the same leading shape with last dim D.

    ``dropout`` with a generator ``rng`` regularizes training; without
    ``rng`` the mapping is deterministic.
    """
    x = ad.as_tensor(x)
    if x.ndim not in (2, 3) or x.shape[-1] != stack.feat_dim:
        raise ConfigurationError(f"features of shape {x.shape} do not fit input dim {stack.feat_dim}")
    e = stack.proj(x)
    for block in stack.blocks:
        e = block(e, fused=fused, dropout=dropout, rng=rng)
    return e


class FixedClassifierHead(Module):
    """Linear layer to a fixed number of speakers."""

    def __init__(self, rng, dim, num_speakers):
        self.num_speakers = num_speakers
        self.w = uniform_init(rng, (dim, num_speakers), dim)
        self.b = uniform_init(rng, (num_speakers,), dim)


def fixed_head_posteriors(e, head):
    """Posteriors (..., S, T) from embeddings (..., T, D)."""
    e = ad.as_tensor(e)
    if e.shape[-1] != head.w.shape[0]:
        raise ConfigurationError(f"embedding dim {e.shape[-1]} != head input dim {head.w.shape[0]}")
    return ad.transpose(ad.sigmoid(ad.matmul(e, head.w) + head.b))

