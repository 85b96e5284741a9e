"""Feature-importance explanations extracted from a learned perturbation,
and the erasure experiment that validates them."""
from __future__ import annotations

import csv

import numpy as np

from .metrics import evaluate
from .ranking import perturbed_item_matrix, topk_recommend

STRATEGIES = ("individual", "shared")
MANNERS = ("top", "least", "random")


def shared_importance(delta: np.ndarray) -> np.ndarray:
    """Mean absolute perturbation of every latent feature across items."""
    return np.abs(delta).mean(axis=1)


def _rank(values: np.ndarray, descending: bool, axis: int = 0) -> np.ndarray:
    keys = -values if descending else values
    return np.argsort(keys, axis=axis, kind="stable")


def individual_top_features(delta: np.ndarray, F: int) -> np.ndarray:
    """``(n_items, F)`` feature indices per item, largest ``|delta|`` first
    (ties to the lower index)."""
    d = delta.shape[0]
    if not 1 <= F <= d:
        raise ValueError(f"F must lie in [1, {d}]")
    return _rank(np.abs(delta), descending=True, axis=0)[:F].T.copy()


def _choose(scores: np.ndarray, manner: str, F: int, rng, axis: int = 0) -> np.ndarray:
    if manner == "top":
        order = _rank(scores, True, axis)
    elif manner == "least":
        order = _rank(scores, False, axis)
    elif manner == "random":
        order = np.argsort(rng.random(scores.shape), axis=axis, kind="stable")
    else:
        raise ValueError(f"manner must be one of {MANNERS}")
    return order[:F]


def erase(delta: np.ndarray, strategy: str, manner: str, F: int, seed: int = 0) -> np.ndarray:
    """Zero ``F`` selected features of ``delta``.

    ``individual`` picks ``F`` entries of every item column by ``|delta|``;
    ``shared`` ranks features by :func:`shared_importance` and zeroes ``F``
    whole rows.  ``random`` draws from ``seed``.
    """
    d = delta.shape[0]
    if not 0 <= F <= d:
        raise ValueError(f"F must lie in [0, {d}]")
    out = np.array(delta, dtype=np.float64, copy=True)
    if F == 0:
        return out
    rng = np.random.default_rng(seed)
    if strategy == "individual":
        rows = _choose(np.abs(delta), manner, F, rng, axis=0)
        cols = np.broadcast_to(np.arange(delta.shape[1]), rows.shape)
        out[rows, cols] = 0.0
    elif strategy == "shared":
        out[_choose(shared_importance(delta), manner, F, rng)] = 0.0
    else:
        raise ValueError(f"strategy must be one of {STRATEGIES}")
    return out


def evaluate_erasure(model, ds, delta, Ks=(10, 20), split="test", alpha=0.5):
    """Metric report of the lists produced by ``model`` under ``delta``."""
    Q_tilde = perturbed_item_matrix(model.Q, delta)
    recs = topk_recommend(model, ds, max(Ks), Q=Q_tilde)
    return evaluate(recs, ds, model.Q, Ks, split=split, alpha=alpha)


def read_feature_names(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\r\n") for line in fh]


def export_importance_csv(delta, path, names=None) -> None:
    """``feature,score`` sorted by descending importance."""
    imp = shared_importance(delta)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feature", "score"])
        for r in _rank(imp, True):
            w.writerow([names[r] if names else int(r), repr(float(imp[r]))])


def export_item_explanations_csv(delta, F, path, names=None, item_ids=None) -> None:
    """``item,rank,feature,score`` with ``score = |delta|``."""
    top = individual_top_features(delta, F)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["item", "rank", "feature", "score"])
        for v in range(delta.shape[1]):
            for rank, r in enumerate(top[v].tolist(), start=1):
                w.writerow(
                    [
                        item_ids[v] if item_ids is not None else v,
                        rank,
                        names[r] if names else r,
                        repr(float(abs(delta[r, v]))),
                    ]
                )
