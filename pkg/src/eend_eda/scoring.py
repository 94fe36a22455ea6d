"""Diarization error rate, Jaccard error rate and speaker-counting confusion.

All interval arithmetic runs on integer microsecond ticks so that segment
boundaries never drift; durations are converted to seconds only when
reported.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .rttm import ActivityMatrix, Annotation, segmentize

TICKS_PER_SECOND = 1_000_000


class ScoringError(ValueError):
    pass


def to_ticks(seconds):
    return int(round(seconds * TICKS_PER_SECOND))


@dataclass
class DerBreakdown:
    speech: int = 0
    miss: int = 0
    false_alarm: int = 0
    confusion: int = 0

    @property
    def der(self):
        if self.speech == 0:
            raise ScoringError("DER is undefined without reference speech")
        return (self.miss + self.false_alarm + self.confusion) / self.speech

    @property
    def error(self):
        return self.miss + self.false_alarm + self.confusion

    def seconds(self):
        s = TICKS_PER_SECOND
        return {"speech": self.speech / s, "miss": self.miss / s,
                "false_alarm": self.false_alarm / s, "confusion": self.confusion / s}

    def __add__(self, other):
        return DerBreakdown(self.speech + other.speech, self.miss + other.miss,
                            self.false_alarm + other.false_alarm, self.confusion + other.confusion)


@dataclass
class JerBreakdown:
    speakers: list[str]
    per_speaker: list[float]
    false_alarm: list[int]
    miss: list[int]
    union: list[int]

    @property
    def jer(self):
        return float(np.mean(self.per_speaker))


def _speaker_intervals(annotation):
    out: dict[str, list[tuple[int, int]]] = {}
    for seg in annotation.segments:
        out.setdefault(seg.speaker, []).append((to_ticks(seg.onset), to_ticks(seg.offset)))
    return out


def _grid(ref, hyp, extra=()):
    """Elementary intervals and per-speaker membership for both annotations."""
    ref_iv, hyp_iv = _speaker_intervals(ref), _speaker_intervals(hyp)
    points = {0}
    for ivs in list(ref_iv.values()) + list(hyp_iv.values()) + [list(extra)]:
        for a, b in ivs:
            points.update((a, b))
    bounds = np.array(sorted(points), dtype=np.int64)
    dur = np.diff(bounds)

    def membership(ivs):
        mark = np.zeros(len(bounds), dtype=np.int64)
        for a, b in ivs:
            mark[np.searchsorted(bounds, a)] += 1
            mark[np.searchsorted(bounds, b)] -= 1
        return np.cumsum(mark)[:-1] > 0

    ref_mat = np.array([membership(v) for v in ref_iv.values()], dtype=bool).reshape(len(ref_iv), len(dur))
    hyp_mat = np.array([membership(v) for v in hyp_iv.values()], dtype=bool).reshape(len(hyp_iv), len(dur))
    return bounds, dur, list(ref_iv), ref_mat, list(hyp_iv), hyp_mat, membership


def der(ref, hyp, collar=0.25):
    """DER of ``hyp`` against ``ref``, overlapped speech included.

    Regions within ``collar`` seconds of any reference segment boundary are
    not scored.  Speakers are mapped one-to-one to maximize the total time
    in which a reference speaker and its hypothesis speaker are both active.
    """
    if not ref.segments:
        raise ScoringError(f"recording {ref.recording_id!r} has no reference speech")
    c = to_ticks(collar)
    zones = []
    if c > 0:
        for seg in ref.segments:
            for b in (to_ticks(seg.onset), to_ticks(seg.offset)):
                zones.append((max(b - c, 0), b + c))
    bounds, dur, _, ref_mat, _, hyp_mat, membership = _grid(ref, hyp, zones)
    scored = ~membership(zones) if zones else np.ones(len(dur), dtype=bool)
    w = dur * scored

    n_ref = ref_mat.sum(axis=0)
    n_hyp = hyp_mat.sum(axis=0)
    speech = int((w * n_ref).sum())
    correct = np.zeros(len(dur), dtype=np.int64)
    if len(ref_mat) and len(hyp_mat):
        overlap = (ref_mat * w) @ hyp_mat.T.astype(np.int64)
        rows, cols = linear_sum_assignment(overlap, maximize=True)
        for r, h in zip(rows, cols):
            if overlap[r, h] > 0:
                correct += ref_mat[r] & hyp_mat[h]
    return DerBreakdown(
        speech=speech,
        miss=int((w * np.maximum(n_ref - n_hyp, 0)).sum()),
        false_alarm=int((w * np.maximum(n_hyp - n_ref, 0)).sum()),
        confusion=int((w * (np.minimum(n_ref, n_hyp) - correct)).sum()),
    )


def jer(ref, hyp):
    """Jaccard error rate averaged over reference speakers, without collar.

    The reference/hypothesis pairing minimizes the summed per-pair
    ``(FA + MI) / union``; reference speakers left unpaired score 1.
    """
    _, dur, ref_ids, ref_mat, _, hyp_mat, _ = _grid(ref, hyp)
    if not ref_ids:
        raise ScoringError("JER is undefined without reference speakers")
    n_ref, n_hyp = len(ref_mat), len(hyp_mat)
    fa = np.zeros((n_ref, n_hyp), dtype=np.int64)
    mi = np.zeros((n_ref, n_hyp), dtype=np.int64)
    un = np.zeros((n_ref, n_hyp), dtype=np.int64)
    for i in range(n_ref):
        for j in range(n_hyp):
            r, h = ref_mat[i], hyp_mat[j]
            fa[i, j] = (dur * (h & ~r)).sum()
            mi[i, j] = (dur * (r & ~h)).sum()
            un[i, j] = (dur * (r | h)).sum()
    cost = (fa + mi) / np.maximum(un, 1)
    per = [1.0] * n_ref
    pfa, pmi = [0] * n_ref, [int((dur * ref_mat[i]).sum()) for i in range(n_ref)]
    pun = list(pmi)
    if n_hyp:
        for i, j in zip(*linear_sum_assignment(cost)):
            per[i], pfa[i], pmi[i], pun[i] = float(cost[i, j]), int(fa[i, j]), int(mi[i, j]), int(un[i, j])
    return JerBreakdown(ref_ids, per, pfa, pmi, pun)


def speaker_count(x):
    return len(x.speakers) if isinstance(x, Annotation) else int(x)


def counting_confusion(refs, hyps):
    """Confusion matrix indexed ``[predicted][reference]`` and counting accuracy.

    Items may be annotations (their distinct speakers are counted) or ints.
    """
    if len(refs) != len(hyps):
        raise ScoringError(f"{len(refs)} references but {len(hyps)} hypotheses")
    r = [speaker_count(x) for x in refs]
    h = [speaker_count(x) for x in hyps]
    size = max(r + h + [0]) + 1
    mat = np.zeros((size, size), dtype=np.int64)
    for pred, true in zip(h, r):
        mat[pred, true] += 1
    acc = float(np.trace(mat) / len(r)) if r else float("nan")
    return mat, acc


def format_confusion(mat):
    size = mat.shape[0]
    width = max(4, len(str(mat.max())) + 1)
    head = "pred\\ref" + "".join(f"{j:>{width}}" for j in range(size))
    rows = [f"{i:>8}" + "".join(f"{v:>{width}}" for v in mat[i]) for i in range(size)]
    return "\n".join([head] + rows)


def frame_der(ref, hyp, frame_period=1.0):
    """DER breakdown between two frame activity matrices (S, T) on the same grid, no collar."""
    ref = np.asarray(ref).reshape(-1, np.shape(ref)[-1])
    hyp = np.asarray(hyp).reshape(-1, np.shape(hyp)[-1])
    if ref.shape[1] != hyp.shape[1]:
        raise ScoringError(f"reference has {ref.shape[1]} frames, hypothesis {hyp.shape[1]}")
    if not ref.any():
        return DerBreakdown(false_alarm=int(hyp.sum()) * to_ticks(frame_period))
    r = segmentize(ActivityMatrix(ref, frame_period, [f"r{i}" for i in range(len(ref))]), "rec")
    h = segmentize(ActivityMatrix(hyp, frame_period, [f"h{i}" for i in range(len(hyp))]), "rec")
    return der(r, h, collar=0.0)
