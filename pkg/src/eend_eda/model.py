"""Complete diarization models: attractor-based and fixed-head, with batch losses and inference."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .eda import (MAX_ATTRACTORS, EdaParams, ShuffleOrder, attractor_posteriors, decode_attractors,
                  encode_embeddings, estimate_speaker_count, existence_probs)
from .encoder import EncoderStack, FixedClassifierHead, embed, fixed_head_posteriors
from .objective import LossBreakdown, existence_loss, pit_loss, total_loss


@dataclass
class ModelConfig:
    feat_dim: int = 345
    dim: int = 256
    num_blocks: int = 4
    num_heads: int = 4
    ff_dim: int = 0  # 0 means 4 * dim
    head: str = "eda"  # "eda" or "fixed"
    num_speakers: int = 2  # output count of the fixed head
    seed: int = 0
    dropout: float = 0.0  # encoder sublayer dropout during training

    @classmethod
    def from_dict(cls, d):
        conv = {"str": str, "int": int, "float": float}
        known = {f.name: conv[f.type] for f in fields(cls)}
        out = {k: known[k](v) for k, v in d.items() if k in known}
        return cls(**out)


@dataclass
class Estimate:
    """Inference output for one recording."""

    posteriors: np.ndarray  # (S, T)
    existence: np.ndarray  # (cap,) or empty for the fixed head
    count: int


def _mean(values):
    total = values[0]
    for v in values[1:]:
        total = total + v
    return total * (1.0 / len(values))


class EendEda(ad.Module):
    """Encoder stack followed by encoder-decoder attractors."""

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.encoder = EncoderStack(rng, config.feat_dim, config.dim, config.num_blocks,
                                    config.num_heads, config.ff_dim or None)
        self.eda = EdaParams(rng, config.dim)

    def batch_loss(self, x, labels, orders=None, alpha=1.0, stop_gradient=False, rng=None):
        """Mean loss over a batch of equal-length chunks.

        ``x`` is (B, T, F); ``labels[b]`` is an (S_b, T) 0/1 matrix whose
        rows are the speakers present in chunk b.  S_b + 1 attractors are
        decoded per chunk; the first S_b enter the permutation-free loss and
        all S_b + 1 enter the existence loss.  ``orders`` (B, T) gives the
        frame order fed to the attractor encoder (None: chronological).
        ``rng`` enables dropout in the encoder (training).
        Returns the loss tensor and the per-chunk breakdowns.
        """
        e = embed(x, self.encoder, dropout=self.config.dropout, rng=rng)
        counts = [int(np.asarray(y).shape[0]) for y in labels]
        state = encode_embeddings(e, self.eda, orders)
        attractors = decode_attractors(state, max(counts) + 1, self.eda)
        q = existence_probs(attractors, self.eda, stop_gradient)
        breakdowns, totals = [], []
        for b, (y, s) in enumerate(zip(labels, counts)):
            if s:
                p = attractor_posteriors(e[b], attractors[b, :s])
                l_diar, _ = pit_loss(y, p)
            else:
                l_diar = ad.Tensor(0.0)
            parts = total_loss(l_diar, existence_loss(q[b, :s + 1]), alpha)
            breakdowns.append(parts)
            totals.append(parts.total)
        return _mean(totals), breakdowns

    def embed(self, x):
        return embed(x, self.encoder)

    def estimate(self, x, order=None, tau=0.5, cap=MAX_ATTRACTORS, num_speakers=None, limit=None):
        """Posteriors of the estimated speakers for one (T, F) recording.

        The count is the first attractor whose existence probability falls
        below ``tau`` (at most ``cap``); ``num_speakers`` overrides it with
        an oracle count and ``limit`` truncates it.
        """
        with ad.no_grad():
            e = embed(x, self.encoder)
            if order is not None and not isinstance(order, ShuffleOrder):
                order = ShuffleOrder.draw(e.shape[0], int(order))
            state = encode_embeddings(e, self.eda, order)
            n = max(cap, num_speakers or 0)
            attractors = decode_attractors(state, n, self.eda)
            q = existence_probs(attractors, self.eda).data
            count = num_speakers if num_speakers is not None else estimate_speaker_count(q, tau, cap)
            if limit is not None:
                count = min(count, limit)
            if count:
                p = attractor_posteriors(e, attractors[:count]).data
            else:
                p = np.zeros((0, e.shape[0]))
        return Estimate(p, q, count)


class SaEend(ad.Module):
    """Encoder stack with a fixed-size linear classification head (no attractors)."""

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.encoder = EncoderStack(rng, config.feat_dim, config.dim, config.num_blocks,
                                    config.num_heads, config.ff_dim or None)
        self.head = FixedClassifierHead(rng, config.dim, config.num_speakers)

    def batch_loss(self, x, labels, orders=None, alpha=1.0, stop_gradient=False, rng=None):
        """Mean permutation-free loss; label matrices are zero-padded to the head size."""
        e = embed(x, self.encoder, dropout=self.config.dropout, rng=rng)
        p = fixed_head_posteriors(e, self.head)
        n = self.config.num_speakers
        breakdowns, totals = [], []
        for b, y in enumerate(labels):
            y = np.asarray(y, dtype=np.float64)
            if y.shape[0] > n:
                raise ValueError(f"chunk has {y.shape[0]} speakers but the head outputs {n}")
            padded = np.zeros((n, y.shape[1]))
            padded[:y.shape[0]] = y
            l_diar, _ = pit_loss(padded, p[b])
            parts = LossBreakdown(l_diar, 0.0, alpha, l_diar)
            breakdowns.append(parts)
            totals.append(l_diar)
        return _mean(totals), breakdowns

    def embed(self, x):
        return embed(x, self.encoder)

    def estimate(self, x, order=None, tau=0.5, cap=MAX_ATTRACTORS, num_speakers=None, limit=None):
        with ad.no_grad():
            p = fixed_head_posteriors(embed(x, self.encoder), self.head).data
        count = p.shape[0] if limit is None else min(p.shape[0], limit)
        return Estimate(p[:count], np.zeros(0), count)


def build_model(config: ModelConfig):
    if config.head == "eda":
        return EendEda(config)
    if config.head == "fixed":
        return SaEend(config)
    raise ad.ConfigurationError(f"unknown model head {config.head!r}")


def save_model(path, model, meta=None):
    return ad.save_checkpoint(path, model.state_dict(), {"model": asdict(model.config), **(meta or {})})


def load_model(path):
    state, meta = ad.load_checkpoint(path)
    model = build_model(ModelConfig.from_dict(meta["model"]))
    model.load_state_dict(state)
    return model, meta
