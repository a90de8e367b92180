"""Ranking metrics: AUC by rank statistics and hit rate at k."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.stats import rankdata


class UndefinedMetricError(ValueError):
    pass


def auc(scores, labels=None) -> float:
    """P(random positive outscores random negative), ties counted as one half.

    Accepts parallel ``scores`` / ``labels`` arrays, or a single sequence of
    ``(score, label)`` pairs.
    """
    if labels is None:
        pairs = np.asarray(list(scores), dtype=np.float64).reshape(-1, 2)
        scores, labels = pairs[:, 0], pairs[:, 1]
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"AUC needs both classes, got {n_pos} positive / {n_neg} negative")
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def hit_rate_at_k(ranked_candidates: Sequence, positive, k: int = 10) -> int:
    """1 if ``positive`` sits in the first ``k`` of an already ranked candidate list."""
    ranked = list(ranked_candidates)
    if positive not in ranked:
        raise ValueError(f"positive {positive!r} is not among the candidates")
    return int(ranked.index(positive) < k)


def rank_candidates(ids: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Row-wise ranking: higher score first, ties to the smaller id."""
    order = np.lexsort((ids, -scores), axis=-1)
    return np.take_along_axis(ids, order, axis=-1)


def hit_rates(ids: np.ndarray, scores: np.ndarray, positive_col: int = 0, k: int = 10) -> np.ndarray:
    """Vectorised HR@k over [N, C] candidate grids whose positive sits in ``positive_col``."""
    ranked = rank_candidates(ids, scores)
    pos = ids[:, positive_col][:, None]
    return (ranked[:, :k] == pos).any(axis=1).astype(np.float64)
