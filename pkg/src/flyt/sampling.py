"""Turning a score column into a training manifest.

Scores are treated as unnormalized log-probabilities.  Soft Cap Sampling draws
batches without replacement and lowers the score of every drawn example by a
fixed penalty; Hard Cap Sampling stops drawing an example once it reaches a
repetition limit; No-Cap sampling draws i.i.d.; threshold selection keeps the
top fraction once each.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidInputError
from .mixing import ScoreTable


@dataclass(frozen=True)
class SampleManifest:
    uids: tuple

    def __len__(self):
        return len(self.uids)

    def histogram(self) -> dict:
        return repetition_histogram(self)


def _scores(table, column=None):
    if isinstance(table, ScoreTable):
        if column is None:
            if len(table.names) != 1:
                raise InvalidInputError(f"score table has columns {table.names}; name the one to sample from")
            column = table.names[0]
        uids, scores = table.uids, table.column(column)
    else:
        uids, scores = table
        uids = tuple(str(u) for u in uids)
        scores = np.asarray(scores, dtype=np.float64)
    if len(uids) == 0:
        raise InvalidInputError("cannot sample from an empty table")
    if not np.all(np.isfinite(scores)):
        raise InvalidInputError("scores must be finite")
    return uids, scores.astype(np.float64, copy=True)


def _softmax(scores: np.ndarray) -> np.ndarray:
    e = np.exp(scores - scores.max())
    return e / e.sum()


def _check_n(n):
    if int(n) != n or n < 1:
        raise InvalidInputError(f"target size must be a positive integer, got {n}")
    return int(n)


def gumbel_top_k(scores: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """``k`` distinct indices drawn sequentially from ``softmax(scores)`` without replacement.

    The indices come back in draw order.
    """
    keys = scores + rng.gumbel(size=scores.shape[0])
    if k < scores.shape[0]:
        top = np.argpartition(-keys, k - 1)[:k]
    else:
        top = np.arange(scores.shape[0])
    return top[np.argsort(-keys[top], kind="stable")]


def scs_sample(table, alpha: float, n: int, batch_size: int, seed=0, column=None) -> SampleManifest:
    """Soft Cap Sampling.

    Repeatedly draws ``min(batch_size, n - drawn, M)`` distinct examples from the
    softmax of the current scores and subtracts ``alpha`` from each drawn
    example's score, until ``n`` examples have been drawn.
    """
    uids, scores = _scores(table, column)
    n = _check_n(n)
    if int(batch_size) != batch_size or batch_size < 1:
        raise InvalidInputError("batch_size must be a positive integer")
    if not (alpha >= 0 and math.isfinite(alpha)):
        raise InvalidInputError("alpha must be finite and nonnegative")
    rng = np.random.default_rng(seed)
    picked = []
    drawn = 0
    while drawn < n:
        k = min(int(batch_size), n - drawn, len(uids))
        idx = gumbel_top_k(scores, k, rng)
        picked.append(idx)
        scores[idx] -= alpha
        drawn += k
    order = np.concatenate(picked)
    return SampleManifest(tuple(uids[i] for i in order))


def hcs_sample(table, beta: int, n: int, seed=0, column=None) -> SampleManifest:
    """Hard Cap Sampling: i.i.d. draws, excluding examples that reached ``beta`` copies."""
    uids, scores = _scores(table, column)
    n = _check_n(n)
    if int(beta) != beta or beta < 1:
        raise InvalidInputError("beta must be a positive integer")
    beta = int(beta)
    m = len(uids)
    if n > beta * m:
        raise InvalidInputError(f"cannot draw {n} examples with at most {beta} copies of each of {m}")
    rng = np.random.default_rng(seed)
    counts = np.zeros(m, dtype=np.int64)
    order = []
    while len(order) < n:
        open_idx = np.flatnonzero(counts < beta)
        probs = _softmax(scores[open_idx])
        # draws of examples capped mid-block are rejected, which leaves the
        # accepted draws distributed as the renormalized softmax over open ones
        for i in open_idx[rng.choice(open_idx.shape[0], size=n - len(order), p=probs)]:
            if counts[i] < beta:
                counts[i] += 1
                order.append(i)
    return SampleManifest(tuple(uids[i] for i in order))


def nocap_sample(table, n: int, seed=0, column=None) -> SampleManifest:
    """``n`` i.i.d. draws from the softmax of the scores."""
    uids, scores = _scores(table, column)
    n = _check_n(n)
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(uids), size=n, p=_softmax(scores))
    return SampleManifest(tuple(uids[i] for i in idx))


def threshold_select(table, fraction: float, column=None) -> SampleManifest:
    """Top ``floor(fraction * M)`` examples by score, ties broken by ascending uid."""
    uids, scores = _scores(table, column)
    if not 0 < fraction <= 1:
        raise InvalidInputError("fraction must lie in (0, 1]")
    keep = int(math.floor(fraction * len(uids) + 1e-9))
    if keep == 0:
        raise InvalidInputError(f"fraction {fraction} of {len(uids)} examples selects nothing")
    order = np.lexsort((np.array(uids), -scores))
    return SampleManifest(tuple(uids[i] for i in order[:keep]))


def repetition_histogram(manifest) -> dict:
    """Map from repetition count to the number of distinct uids with that count."""
    uids = manifest.uids if isinstance(manifest, SampleManifest) else manifest
    per_uid = Counter(uids)
    return dict(sorted(Counter(per_uid.values()).items()))


def shuffle_manifest(manifest: SampleManifest, seed=0) -> SampleManifest:
    """Seeded permutation of a manifest, for consumers that need mixed batches."""
    order = np.random.default_rng(seed).permutation(len(manifest))
    return SampleManifest(tuple(manifest.uids[i] for i in order))
