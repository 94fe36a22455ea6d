"""Encoder-decoder attractors.

An LSTM reads the frame embeddings (optionally in a shuffled order) and its
final state seeds a second LSTM that is fed zero vectors; each decoder
hidden state is one speaker attractor.  A linear layer plus sigmoid maps
every attractor to the probability that it belongs to an actual speaker.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Module, Tensor, uniform_init

MAX_ATTRACTORS = 20


class SpeakerCountWarning(UserWarning):
    """Decoding hit the attractor cap before any probability fell below the threshold."""


def lstm_params(rng, n_in, hidden):
    return {
        "w_ih": uniform_init(rng, (n_in, 4 * hidden), hidden),
        "w_hh": uniform_init(rng, (hidden, 4 * hidden), hidden),
        "b": uniform_init(rng, (4 * hidden,), hidden),
    }


class EdaParams(Module):
    def __init__(self, rng, dim):
        self.dim = dim
        self.encoder = lstm_params(rng, dim, dim)
        self.decoder = lstm_params(rng, dim, dim)
        self.w_exist = uniform_init(rng, (dim,), dim)
        self.b_exist = uniform_init(rng, (), dim)


@dataclass(frozen=True)
class ShuffleOrder:
    """A permutation of frame indices and the seed it was drawn from (None if chronological)."""

    perm: np.ndarray
    seed: int | None = None

    @classmethod
    def draw(cls, num_frames, seed):
        return cls(np.random.default_rng(seed).permutation(num_frames), seed)

    @classmethod
    def chronological(cls, num_frames):
        return cls(np.arange(num_frames), None)

    def __post_init__(self):
        perm = np.asarray(self.perm, dtype=np.int64)
        if perm.ndim != 1 or not np.array_equal(np.sort(perm), np.arange(perm.size)):
            raise ValueError("shuffle order must be a permutation of 0..T-1")
        object.__setattr__(self, "perm", perm)


@dataclass
class AttractorSet:
    attractors: np.ndarray  # (S', D)
    existence: np.ndarray  # (S',)


def _batched(e):
    e = ad.as_tensor(e)
    if e.ndim == 2:
        return ad.reshape(e, (1,) + e.shape), True
    if e.ndim != 3:
        raise DimensionError(f"embeddings must be (T, D) or (B, T, D), got {e.shape}")
    return e, False


def encode_embeddings(e, params, order=None):
    """Final (hidden, cell) state of the EDA encoder after reading the embeddings.

    ``order`` is None (chronological), a ShuffleOrder, or an integer array of
    shape (T,) or (B, T) giving the frame read at each step.
    """
    e, squeeze = _batched(e)
    batch, frames, dim = e.shape
    if frames < 1:
        raise ValueError("EDA encoder needs at least one frame")
    if order is not None:
        perm = order.perm if isinstance(order, ShuffleOrder) else np.asarray(order)
        e = ad.gather_frames(e, np.broadcast_to(perm, (batch, frames)))
    zero = Tensor(np.zeros((batch, params.dim)))
    hs, c = ad.lstm_sequence(e, zero, zero, params.encoder)
    h = hs[:, frames - 1]
    if squeeze:
        h, c = ad.reshape(h, (dim,)), ad.reshape(c, (dim,))
    return h, c


def decode_attractors(init, count, params):
    """``count`` attractors: decoder hidden states after feeding zero vectors from ``init``."""
    if count < 1:
        raise ValueError("attractor count must be at least 1")
    h, c = ad.as_tensor(init[0]), ad.as_tensor(init[1])
    squeeze = h.ndim == 1
    if squeeze:
        h, c = ad.reshape(h, (1,) + h.shape), ad.reshape(c, (1,) + c.shape)
    zeros = Tensor(np.zeros((h.shape[0], count, params.dim)))
    attractors, _ = ad.lstm_sequence(zeros, h, c, params.decoder)
    if squeeze:
        attractors = ad.reshape(attractors, attractors.shape[1:])
    return attractors


def existence_probs(attractors, params, stop_gradient=False):
    """Probability per attractor (..., S') that it represents a speaker.

    With ``stop_gradient`` the attractors are treated as constants, so only
    the existence layer itself is trained through this output.
    """
    a = ad.as_tensor(attractors)
    if stop_gradient:
        a = ad.stop_gradient(a)
    return ad.sigmoid(ad.tsum(a * params.w_exist, axis=-1) + params.b_exist)


def attractor_posteriors(e, attractors):
    """Speech-activity posteriors (..., S, T) as sigmoids of attractor-embedding dot products."""
    e, a = ad.as_tensor(e), ad.as_tensor(attractors)
    if e.shape[-1] != a.shape[-1]:
        raise DimensionError(f"embedding dim {e.shape[-1]} != attractor dim {a.shape[-1]}")
    return ad.sigmoid(ad.matmul(a, ad.transpose(e)))


def estimate_speaker_count(existence, tau=0.5, cap=MAX_ATTRACTORS):
    """Number of attractors before the first existence probability below ``tau``.

    If none falls below within the first ``cap`` values, returns
    ``min(cap, len(existence))`` and emits a SpeakerCountWarning.
    """
    q = np.asarray(existence, dtype=np.float64).ravel()
    below = np.flatnonzero(q[:cap] < tau)
    if below.size:
        return int(below[0])
    warnings.warn(f"no existence probability below {tau} within {min(cap, q.size)} attractors",
                  SpeakerCountWarning, stacklevel=2)
    return min(cap, q.size)
