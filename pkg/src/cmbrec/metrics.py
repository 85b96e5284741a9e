"""Accuracy and diversity metrics for top-K lists.

Single-list functions take plain sequences and are written for clarity;
:func:`evaluate` computes the same quantities for a whole
:class:`~cmbrec.ranking.RecommendationSet` through the vectorised kernels.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .kernels import alpha_dcg_rows, csr_contains, ilad_rows

ACCURACY = ("recall", "ndcg")
DIVERSITY = ("alpha_ndcg", "sc", "pc", "ilad")
ALL_METRICS = ACCURACY + DIVERSITY
DEFAULT_ALPHA = 0.5


class UndefinedCosineError(ValueError):
    pass


def _topic_sets(subtopics, items):
    """Accepts a dense membership matrix or any ``item -> iterable`` map."""
    if isinstance(subtopics, np.ndarray):
        return [set(np.flatnonzero(subtopics[v]).tolist()) for v in items]
    return [set(subtopics[v]) for v in items]


def recall_at_k(rec_list, truth, K: int) -> float:
    truth = set(truth)
    return len(truth.intersection(list(rec_list)[:K])) / len(truth)


def ndcg_at_k(rec_list, truth, K: int) -> float:
    truth = set(truth)
    dcg = sum(1.0 / math.log2(k + 2) for k, v in enumerate(list(rec_list)[:K]) if v in truth)
    idcg = sum(1.0 / math.log2(k + 2) for k in range(min(K, len(truth))))
    return dcg / idcg


def alpha_dcg(rec_list, subtopics, alpha: float, K: int) -> float:
    cov: dict[int, int] = {}
    total = 0.0
    for k, topics in enumerate(_topic_sets(subtopics, list(rec_list)[:K])):
        gain = 0.0
        for s in topics:
            c = cov.get(s, 0)
            gain += (1.0 - alpha) ** c
            cov[s] = c + 1
        total += gain / math.log2(k + 2)
    return total


def alpha_ideal_list(subtopics, alpha: float, K: int, n_items: int | None = None) -> list[int]:
    """Greedy ideal ordering over the whole catalog: at every depth pick the
    item with the largest marginal gain (ties to the lower index)."""
    M = subtopics if isinstance(subtopics, np.ndarray) else None
    if M is None:
        n_items = len(subtopics) if n_items is None else n_items
        m = 1 + max((s for v in range(n_items) for s in subtopics[v]), default=-1)
        M = np.zeros((n_items, m), dtype=np.uint8)
        for v in range(n_items):
            for s in subtopics[v]:
                M[v, s] = 1
    M = M.astype(np.float64)
    cov = np.zeros(M.shape[1])
    available = np.ones(M.shape[0], dtype=bool)
    chosen = []
    for _ in range(min(K, M.shape[0])):
        gain = M @ (1.0 - alpha) ** cov
        gain[~available] = -np.inf
        v = int(np.argmax(gain))
        chosen.append(v)
        available[v] = False
        cov += M[v]
    return chosen


@lru_cache(maxsize=64)
def _cached_idcg(key, alpha, K):
    M = np.frombuffer(key[0], dtype=np.uint8).reshape(key[1])
    ideal = alpha_ideal_list(M, alpha, K)
    return alpha_dcg(ideal, M, alpha, K)


def alpha_idcg(item_topic_matrix: np.ndarray, alpha: float, K: int) -> float:
    M = np.ascontiguousarray(item_topic_matrix, dtype=np.uint8)
    return _cached_idcg((M.tobytes(), M.shape), float(alpha), int(K))


def alpha_ndcg_at_k(rec_list, subtopics, alpha: float = DEFAULT_ALPHA, K: int = 10, ideal: float | None = None) -> float:
    """Redundancy-aware subtopic nDCG; relevance is subtopic membership."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if ideal is None:
        if isinstance(subtopics, np.ndarray):
            ideal = alpha_idcg(subtopics, alpha, K)
        else:
            ideal = alpha_dcg(alpha_ideal_list(subtopics, alpha, K), subtopics, alpha, K)
    # the list itself also bounds the true ideal from below, so a list that
    # beats the greedy ordering scores exactly 1
    gain = alpha_dcg(rec_list, subtopics, alpha, K)
    return gain / max(ideal, gain) if ideal > 0 else 0.0


def sc_at_k(rec_list, subtopics, K: int, n_catalog_topics: int | None = None) -> float:
    covered = set().union(*_topic_sets(subtopics, list(rec_list)[:K]))
    if n_catalog_topics is None:
        items = range(len(subtopics))
        n_catalog_topics = len(set().union(*_topic_sets(subtopics, items)))
    return len(covered) / n_catalog_topics if n_catalog_topics else 0.0


def pc_at_k(all_lists, n_items: int, K: int | None = None) -> float:
    seen = set()
    for lst in all_lists:
        seen.update(list(lst)[:K] if K is not None else lst)
    return len(seen) / n_items


def unit_item_vectors(Q: np.ndarray) -> np.ndarray:
    """Rows are the L2-normalised item columns of ``Q``."""
    norms = np.linalg.norm(Q, axis=0)
    if (norms == 0).any():
        raise UndefinedCosineError("zero-norm item vector; cosine undefined")
    return np.ascontiguousarray((Q / norms).T)


def ilad_at_k(rec_list, Q_eval: np.ndarray, K: int) -> float:
    items = list(rec_list)[:K]
    if len(items) < 2:
        raise ValueError("ILAD needs at least two items")
    X = Q_eval[:, items]
    norms = np.linalg.norm(X, axis=0)
    if (norms == 0).any():
        raise UndefinedCosineError("zero-norm item vector; cosine undefined")
    C = (X.T @ X) / np.outer(norms, norms)
    iu = np.triu_indices(len(items), 1)
    return float(np.mean(1.0 - C[iu]))


# ---------------------------------------------------------------------------
# population-level evaluation
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    """Metric values keyed by ``(metric, K)``."""

    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def get(self, metric, K):
        return self.values[(metric, K)]

    def __eq__(self, other):
        if not isinstance(other, MetricReport):
            return NotImplemented
        return self.values == other.values

    def rows(self):
        order = {m: i for i, m in enumerate(ALL_METRICS)}
        return sorted(self.values.items(), key=lambda kv: (order.get(kv[0][0], 99), kv[0][1]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "K", "value"])
            for (m, K), v in self.rows():
                w.writerow([m, K, repr(v)])

    def to_dict(self) -> dict:
        out: dict = {}
        for (m, K), v in self.rows():
            out.setdefault(m, {})[str(K)] = v
        return out

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def from_csv(cls, path) -> "MetricReport":
        with open(path, newline="") as fh:
            return cls({(r["metric"], int(r["K"])): float(r["value"]) for r in csv.DictReader(fh)})


def _hits(recs, ds, split, K):
    indptr, indices = ds.splits[split]
    lists = recs.lists[:, :K]
    rows = np.repeat(recs.users, lists.shape[1])
    return csr_contains(indptr, indices, rows, lists.ravel(), ds.n_items).reshape(lists.shape)


def per_user_recall(recs, ds, split, K):
    """Recall per row of ``recs``; NaN for users with empty truth."""
    n_truth = np.diff(ds.splits[split][0])[recs.users].astype(np.float64)
    hits = _hits(recs, ds, split, K).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n_truth > 0, hits / n_truth, np.nan)


def per_user_ndcg(recs, ds, split, K):
    n_truth = np.diff(ds.splits[split][0])[recs.users]
    hits = _hits(recs, ds, split, K)
    disc = 1.0 / np.log2(np.arange(2, hits.shape[1] + 2, dtype=np.float64))
    dcg = (hits * disc).sum(axis=1)
    cum = np.concatenate([[0.0], np.cumsum(disc)])
    idcg = cum[np.minimum(n_truth, hits.shape[1])]
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n_truth > 0, dcg / idcg, np.nan)


def _nanmean(x):
    return float(np.mean(x[~np.isnan(x)])) if (~np.isnan(x)).any() else 0.0


def mean_recall(recs, ds, split, K):
    return _nanmean(per_user_recall(recs, ds, split, K))


def mean_ndcg(recs, ds, split, K):
    return _nanmean(per_user_ndcg(recs, ds, split, K))


def mean_alpha_ndcg(recs, ds, K, alpha=DEFAULT_ALPHA):
    M = ds.item_topic_matrix
    ideal = alpha_idcg(M, alpha, K)
    if ideal == 0:
        return 0.0
    gain = alpha_dcg_rows(recs.lists[:, :K], M, alpha)
    return float(np.mean(gain / np.maximum(gain, ideal)))


def mean_sc(recs, ds, K):
    M = ds.item_topic_matrix
    n_cat = int(M.any(axis=0).sum())
    if n_cat == 0:
        return 0.0
    covered = M[recs.lists[:, :K]].any(axis=1).sum(axis=1)
    return float(np.mean(covered / n_cat))


def global_pc(recs, n_items, K):
    return len(np.unique(recs.lists[:, :K])) / n_items


def mean_ilad(recs, unit_vectors, K):
    return float(np.mean(ilad_rows(recs.lists[:, :K], unit_vectors)))


def metric_value(name, recs, ds, K, split="test", unit_vectors=None, alpha=DEFAULT_ALPHA):
    if name == "recall":
        return mean_recall(recs, ds, split, K)
    if name == "ndcg":
        return mean_ndcg(recs, ds, split, K)
    if name == "alpha_ndcg":
        return mean_alpha_ndcg(recs, ds, K, alpha)
    if name == "sc":
        return mean_sc(recs, ds, K)
    if name == "pc":
        return global_pc(recs, ds.n_items, K)
    if name == "ilad":
        return mean_ilad(recs, unit_vectors, K)
    raise ValueError(f"unknown metric {name!r}")


def evaluate(recs, ds, Q_eval, Ks=(10, 20), split="test", alpha=DEFAULT_ALPHA, metrics=ALL_METRICS) -> MetricReport:
    """Full report over every metric and every ``K`` (each ``K <= recs.K``).

    Accuracy averages skip users with an empty ``split`` truth set; diversity
    averages use every row.  ILAD uses the item vectors of ``Q_eval``.
    """
    unit = unit_item_vectors(Q_eval) if "ilad" in metrics else None
    report = MetricReport()
    for K in Ks:
        if K > recs.K:
            raise ValueError(f"K={K} exceeds list length {recs.K}")
        for m in metrics:
            report.values[(m, K)] = metric_value(m, recs, ds, K, split, unit, alpha)
    return report
