"""Top-K list generation from (possibly perturbed) latent factors."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .kernels import topk_rows

_logger = logging.getLogger(__name__)

USER_CHUNK = 1024


class InsufficientCandidatesError(ValueError):
    pass


@dataclass
class RecommendationSet:
    """Ordered top-K lists; row ``r`` belongs to user ``users[r]``."""

    users: np.ndarray
    lists: np.ndarray
    scores: np.ndarray | None = None

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.lists = np.asarray(self.lists, dtype=np.int64)
        if self.lists.ndim != 2 or len(self.lists) != len(self.users):
            raise ValueError("lists must be (n_users, K) and aligned with users")
        srt = np.sort(self.lists, axis=1)
        if (srt[:, 1:] == srt[:, :-1]).any():
            raise ValueError("duplicate item within a recommendation list")

    @property
    def K(self) -> int:
        return self.lists.shape[1]

    def __eq__(self, other):
        if not isinstance(other, RecommendationSet):
            return NotImplemented
        return np.array_equal(self.users, other.users) and np.array_equal(self.lists, other.lists)

    __hash__ = None


def maxabs_scale(Q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Divide each feature row by its maximum absolute value.

    Returns the scaled matrix and the per-row scale; all-zero rows keep
    scale 1.
    """
    Q = np.asarray(Q, dtype=np.float64)
    scale = np.abs(Q).max(axis=1) if Q.shape[1] else np.ones(Q.shape[0])
    zero = scale == 0
    if zero.any():
        _logger.warning("%d all-zero feature row(s); using scale 1", int(zero.sum()))
        scale = np.where(zero, 1.0, scale)
    return Q / scale[:, None], scale


def unscale(Q_scaled: np.ndarray, scale: np.ndarray) -> np.ndarray:
    return Q_scaled * scale[:, None]


def apply_perturbation(Q_scaled: np.ndarray, delta: np.ndarray) -> np.ndarray:
    if Q_scaled.shape != delta.shape:
        raise ValueError(f"shape mismatch {Q_scaled.shape} vs {delta.shape}")
    return Q_scaled + delta


def perturbed_item_matrix(Q: np.ndarray, delta: np.ndarray, scale: np.ndarray | None = None) -> np.ndarray:
    """Item matrix used for scoring after perturbing in max-abs scaled space.

    Algebraically ``unscale(apply_perturbation(Q / scale, delta), scale)``,
    written as ``Q + delta * scale`` so a zero ``delta`` returns ``Q`` bit for
    bit.
    """
    if Q.shape != delta.shape:
        raise ValueError(f"shape mismatch {Q.shape} vs {delta.shape}")
    if scale is None:
        scale = maxabs_scale(Q)[1]
    return Q + delta * scale[:, None]


def topk_recommend(f, ds, K: int, users=None, Q=None, exclude: str | None = "train") -> RecommendationSet:
    """Highest-scoring ``K`` items per user with the ``exclude`` split masked.

    ``f`` supplies ``P`` (and ``Q`` unless a replacement item matrix is
    given).  Ties go to the lower item index.
    """
    Q = f.Q if Q is None else Q
    users = np.arange(f.P.shape[1]) if users is None else np.asarray(users, dtype=np.int64)
    n_items = Q.shape[1]
    if exclude is not None:
        indptr, indices = ds.splits[exclude]
        counts = np.diff(indptr)[users]
        if len(users) and n_items - counts.max() < K:
            raise InsufficientCandidatesError(f"K={K} exceeds the unmasked candidates of some user")
    elif K > n_items:
        raise InsufficientCandidatesError(f"K={K} exceeds catalog size {n_items}")
    out = np.empty((len(users), K), dtype=np.int64)
    top_scores = np.empty((len(users), K), dtype=np.float64)
    P = f.P
    for start in range(0, len(users), USER_CHUNK):
        chunk = users[start : start + USER_CHUNK]
        scores = P[:, chunk].T @ Q
        if exclude is not None:
            c = np.diff(indptr)[chunk]
            rows = np.repeat(np.arange(len(chunk)), c)
            cols = np.concatenate([indices[indptr[u] : indptr[u + 1]] for u in chunk]) if len(rows) else rows
            scores[rows, cols] = -np.inf
        top = topk_rows(scores, K)
        out[start : start + len(chunk)] = top
        top_scores[start : start + len(chunk)] = np.take_along_axis(scores, top, axis=1)
    return RecommendationSet(users, out, top_scores)


def save_recommendations_csv(recs: RecommendationSet, path, user_ids=None, item_ids=None) -> None:
    """``user,rank,item,score`` rows (ranks start at 1)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user", "rank", "item", "score"])
        for r, u in enumerate(recs.users.tolist()):
            for rank, v in enumerate(recs.lists[r].tolist(), start=1):
                score = "" if recs.scores is None else repr(float(recs.scores[r, rank - 1]))
                w.writerow(
                    [
                        u if user_ids is None else user_ids[u],
                        rank,
                        v if item_ids is None else item_ids[v],
                        score,
                    ]
                )
