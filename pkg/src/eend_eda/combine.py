"""Overlap-aware majority-vote combination of diarization hypotheses.

Hypotheses are frame-level activity matrices on a common frame grid.  The
first hypothesis anchors the global speaker labels; every later one is
matched to the global speakers by maximizing overlapped speaking time with
an optimal assignment, and speakers without any overlap open new global
labels.  Voting then keeps, per frame, as many speakers as the rounded
mean of the hypotheses' active-speaker counts, choosing the speakers with
the most votes (lower global label on ties).

A speaker that is never active in a non-anchor hypothesis carries no
votes and is left unmapped (label -1), so fusing identical hypotheses
returns them unchanged, silent rows included.
"""
from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment

from .rttm import ActivityMatrix, rasterize, segmentize


def map_labels(hypotheses):
    """Global label of every local speaker: a list with one int array per hypothesis.

    Each hypothesis is an (S_k, T) 0/1 matrix.  Matching uses the total
    activity accumulated so far by each global speaker.
    """
    if not hypotheses:
        raise ValueError("need at least one hypothesis")
    hyps = [np.asarray(h, dtype=np.int64) for h in hypotheses]
    first = hyps[0]
    mappings = [np.arange(first.shape[0])]
    totals = [row.copy() for row in first]
    for hyp in hyps[1:]:
        mapping = np.full(hyp.shape[0], -1)
        if totals and hyp.shape[0]:
            overlap = hyp @ np.array(totals).T
            rows, cols = linear_sum_assignment(overlap, maximize=True)
            for r, c in zip(rows, cols):
                if overlap[r, c] > 0:
                    mapping[r] = c
        for r in range(hyp.shape[0]):
            if mapping[r] < 0 and not hyp[r].any():
                continue
            if mapping[r] < 0:
                mapping[r] = len(totals)
                totals.append(np.zeros(hyp.shape[1], dtype=np.int64))
            totals[mapping[r]] += hyp[r]
        mappings.append(mapping)
    return mappings


def _round_half_even(num, den):
    """Elementwise round(num / den) with ties to even, exact for integers."""
    q, r = np.divmod(num, den)
    twice = 2 * r
    return q + ((twice > den) | ((twice == den) & (q % 2 == 1)))


def vote(hypotheses, mappings, num_global=None):
    """Fused (G, T) activity from hypotheses mapped to global labels, all weighted equally."""
    hyps = [np.asarray(h, dtype=np.int64) for h in hypotheses]
    k = len(hyps)
    n_frames = hyps[0].shape[1]
    if num_global is None:
        num_global = max((int(m.max()) + 1 for m in mappings if m.size), default=0)
    votes = np.zeros((num_global, n_frames), dtype=np.int64)
    counts = np.zeros(n_frames, dtype=np.int64)
    for hyp, mapping in zip(hyps, mappings):
        used = mapping >= 0
        if used.any():
            np.add.at(votes, mapping[used], hyp[used])
        counts += hyp.sum(axis=0)
    keep = _round_half_even(counts, k)
    out = np.zeros_like(votes, dtype=np.int8)
    if num_global:
        # stable sort on descending votes keeps lower labels first among ties
        order = np.argsort(-votes, axis=0, kind="stable")
        for t in np.flatnonzero(keep):
            out[order[:keep[t], t], t] = 1
    return out


def combine_activities(hypotheses):
    """Map and vote (S_k, T) matrices; returns the fused (G, T) matrix over global labels."""
    hyps = [np.asarray(h, dtype=np.int64).reshape(-1, np.shape(h)[-1]) for h in hypotheses]
    return vote(hyps, map_labels(hyps))


def combine_annotations(annotations, frame_period, num_frames=None, recording_id=None):
    """Rasterize annotations on a common grid, fuse them and return an Annotation."""
    if not annotations:
        raise ValueError("need at least one hypothesis")
    if num_frames is None:
        end = max((a.end() for a in annotations), default=0.0)
        num_frames = int(np.ceil(end / frame_period - 1e-9))
    mats = [rasterize(a, frame_period, num_frames).matrix for a in annotations]
    fused = combine_activities(mats)
    speakers = [f"spk{i}" for i in range(fused.shape[0])]
    rec = recording_id or annotations[0].recording_id
    return segmentize(ActivityMatrix(fused.reshape(len(speakers), num_frames), frame_period, speakers), rec)
