"""Maximal-marginal-relevance re-ranking baseline."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import mmr_select, topk_rows
from .metrics import unit_item_vectors
from .ranking import InsufficientCandidatesError, RecommendationSet, topk_recommend


@dataclass(frozen=True)
class MmrConfig:
    theta: float = 0.9
    candidate_pool: int = 100
    K: int = 10

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        if self.K > self.candidate_pool:
            raise ValueError("K must not exceed candidate_pool")


def mmr_rerank(scores, item_vectors, cfg: MmrConfig, exclude=()) -> np.ndarray:
    """Re-rank one user's catalog.

    The pool is the ``cfg.candidate_pool`` highest ``scores`` (items in
    ``exclude`` masked).  Each step then takes the item maximising
    ``theta * score - (1 - theta) * max cosine to the already selected``;
    the first pick is the relevance argmax.  ``item_vectors`` is d x n_items.
    """
    scores = np.array(scores, dtype=np.float64)
    scores[np.asarray(list(exclude), dtype=np.int64)] = -np.inf
    if np.isfinite(scores).sum() < cfg.candidate_pool:
        raise InsufficientCandidatesError("candidate pool smaller than configured")
    pool = topk_rows(scores[None, :], cfg.candidate_pool)
    rel = scores[pool]
    return mmr_select(pool, rel, unit_item_vectors(item_vectors), cfg.theta, cfg.K)[0]


def mmr_recommend(f, ds, cfg: MmrConfig, users=None) -> RecommendationSet:
    """MMR lists for many users; relevance from the factor model with train
    positives masked, similarity from the item vectors of ``f.Q``."""
    pool = topk_recommend(f, ds, cfg.candidate_pool, users=users)
    lists = mmr_select(pool.lists, pool.scores, unit_item_vectors(f.Q), cfg.theta, cfg.K)
    return RecommendationSet(pool.users, lists)
