"""Turning posteriors into speech activities.

* ``decode``: threshold posteriors at 0.5.
* ``sad_postprocess``: make the activities agree with external speech
  activity detection, clearing frames it marks as non-speech and giving
  frames it marks as speech to the most likely speaker.
* ``iterative_inference``: decode, then run the model again on the frames
  where nobody was found, so that more speakers than the model's trained
  maximum can be recovered.
* ``iterative_inference_plus``: repeat iterative inference with the first
  pass truncated to 1, 2, ..., S_max speakers and fuse the results.

A model here is anything with an ``estimate(x, order=, tau=, limit=)``
method returning an object with ``posteriors`` (S, T) and ``count``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .combine import combine_activities
from .eda import MAX_ATTRACTORS


def decode(p, threshold=0.5):
    """1 where the posterior is strictly above ``threshold``."""
    return (np.asarray(p) > threshold).astype(np.int8)


def sad_postprocess(p, z, threshold=0.5):
    """Align decoded activities with speech activity labels ``z`` (length T).

    Frames with activity but ``z == 0`` are cleared; frames without any
    activity but ``z == 1`` get the speaker with the highest posterior
    (lowest index on ties).
    """
    p = np.asarray(p, dtype=np.float64)
    z = np.asarray(z).astype(bool).ravel()
    if p.ndim != 2 or z.size != p.shape[1]:
        raise ValueError(f"SAD labels of length {z.size} do not match posteriors of shape {p.shape}")
    y = decode(p, threshold)
    active = y.any(axis=0)
    y[:, active & ~z] = 0
    if p.shape[0]:
        recover = np.flatnonzero(~active & z)
        y[np.argmax(p[:, recover], axis=0), recover] = 1
    return y


@dataclass
class IterativeResult:
    activity: np.ndarray  # (sum of per-iteration speaker counts, T)
    counts: list = field(default_factory=list)  # speakers decoded per iteration (after limiting)

    @property
    def iterations(self):
        return len(self.counts)


def iterative_inference(x, model, s_max, tau=0.5, seed=0, shuffle=True, first_limit=None):
    """Decode repeatedly on the frames left silent by earlier iterations.

    Each pass feeds only the still-selected frames (as one gap-free
    sequence) to the model, with the speaker count capped at ``s_max``.
    The loop stops once a pass finds fewer than ``s_max`` speakers, when
    no frames remain, or when a pass leaves the frame set unchanged.
    ``first_limit`` keeps at most that many speakers from the first pass;
    the stopping test still uses the untruncated first-pass count.
    """
    x = np.asarray(x, dtype=np.float64)
    n_frames = x.shape[0]
    selected = np.arange(n_frames)
    blocks, counts = [], []
    for n in range(max(n_frames, 1)):
        order = (seed + n) if shuffle else None
        est = model.estimate(x[selected], order=order, tau=tau, limit=s_max)
        found = est.count
        y_sel = decode(est.posteriors[:found])
        if n == 0 and first_limit is not None:
            y_sel = y_sel[:min(found, first_limit)]
        block = np.zeros((y_sel.shape[0], n_frames), dtype=np.int8)
        block[:, selected] = y_sel
        blocks.append(block)
        counts.append(y_sel.shape[0])
        remaining = selected[~y_sel.any(axis=0)]
        shrunk = remaining.size < selected.size
        selected = remaining
        if found < s_max or selected.size == 0 or not shrunk:
            break
    activity = np.concatenate(blocks, axis=0) if blocks else np.zeros((0, n_frames), dtype=np.int8)
    return IterativeResult(activity, counts)


def iterative_inference_plus(x, model, s_max, tau=0.5, seed=0, shuffle=True):
    """Fuse the iterative-inference results obtained with first-pass limits 1..s_max."""
    hyps = [iterative_inference(x, model, s_max, tau, seed, shuffle, first_limit=limit).activity
            for limit in range(1, s_max + 1)]
    return combine_activities(hyps), hyps


def infer(x, model, mode="plain", s_max=MAX_ATTRACTORS, tau=0.5, seed=0, shuffle=True, sad=None):
    """Activity matrix for one recording in the given mode, optionally SAD post-processed.

    SAD post-processing needs posteriors and therefore applies to the
    plain mode only.
    """
    x = np.asarray(x, dtype=np.float64)
    if mode == "plain":
        est = model.estimate(x, order=seed if shuffle else None, tau=tau, limit=s_max)
        p = est.posteriors[:est.count]
        return sad_postprocess(p, sad) if sad is not None else decode(p)
    if sad is not None:
        raise ValueError("SAD post-processing is only defined for plain decoding")
    if mode == "iterative":
        return iterative_inference(x, model, s_max, tau, seed, shuffle).activity
    if mode == "iterative-plus":
        return iterative_inference_plus(x, model, s_max, tau, seed, shuffle)[0]
    raise ValueError(f"unknown inference mode {mode!r}")
