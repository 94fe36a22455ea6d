"""Permutation-free diarization loss, attractor existence loss and their sum."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .autodiff import BCE_EPS, DimensionError, Tensor

EXHAUSTIVE_MAX_SPEAKERS = 6


@dataclass
class PermutationAssignment:
    """``perm[s]`` is the label row assigned to prediction row ``s``."""

    perm: tuple
    loss: float


@dataclass
class LossBreakdown:
    diar: object
    exist: object
    alpha: float
    total: object

    def as_floats(self):
        f = lambda v: float(v.data) if isinstance(v, Tensor) else float(v)  # noqa: E731
        return {"diar": f(self.diar), "exist": f(self.exist), "total": f(self.total)}


@lru_cache(maxsize=None)
def _permutations(n):
    return np.array(list(itertools.permutations(range(n))), dtype=np.int64).reshape(-1, n)


def pair_costs(y, p):
    """``cost[s, j]`` = summed BCE of prediction row s against label row j."""
    pc = np.clip(p, BCE_EPS, 1 - BCE_EPS)
    return -(np.log(pc) @ y.T + np.log1p(-pc) @ (1.0 - y).T)


def best_permutation(cost):
    """Minimizing assignment; lowest lexicographic permutation on ties when exhaustive."""
    n = cost.shape[0]
    if n <= EXHAUSTIVE_MAX_SPEAKERS:
        perms = _permutations(n)
        totals = cost[np.arange(n), perms].sum(axis=1)
        return tuple(int(i) for i in perms[int(np.argmin(totals))])
    rows, cols = linear_sum_assignment(cost)
    return tuple(int(c) for c in cols[np.argsort(rows)])


def pit_loss(y, p, exhaustive=None):
    """Mean BCE between posteriors ``p`` (S x T tensor) and the best row permutation of labels ``y``.

    ``exhaustive`` forces (True) or forbids (False) enumerating every
    permutation; by default enumeration is used up to six speakers and an
    optimal assignment beyond.  Both are exact because the objective is a
    sum of independent per-pair costs.
    """
    y = np.asarray(y, dtype=np.float64)
    p = ad.as_tensor(p)
    if y.shape != p.shape:
        raise DimensionError(f"labels {y.shape} and posteriors {p.shape} differ in shape")
    n_spk, n_frames = y.shape
    if n_spk == 0:
        return Tensor(0.0), PermutationAssignment((), 0.0)
    cost = pair_costs(y, p.data)
    if exhaustive is None:
        perm = best_permutation(cost)
    elif exhaustive:
        perms = _permutations(n_spk)
        perm = tuple(int(i) for i in perms[int(np.argmin(cost[np.arange(n_spk), perms].sum(axis=1)))])
    else:
        rows, cols = linear_sum_assignment(cost)
        perm = tuple(int(c) for c in cols[np.argsort(rows)])
    loss = ad.binary_cross_entropy(y[list(perm)], p) * (1.0 / (n_frames * n_spk))
    return loss, PermutationAssignment(perm, float(loss.data))


def existence_loss(q):
    """Mean BCE of S+1 existence probabilities against labels [1, ..., 1, 0]."""
    q = ad.as_tensor(q)
    n = q.shape[-1] if q.ndim else 0
    if n == 0:
        raise ValueError("existence loss needs at least one probability")
    labels = np.ones(q.shape)
    labels[..., -1] = 0.0
    return ad.binary_cross_entropy(labels, q) * (1.0 / n)


def total_loss(l_diar, l_exist, alpha=1.0):
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    return LossBreakdown(l_diar, l_exist, alpha, l_diar + l_exist * alpha)
