"""Small MovieLens-format corpora with genre structure, for tests, the
benchmark and desk-scale runs when the real data is unavailable."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def write_synthetic_movielens(
    directory,
    n_users: int = 300,
    n_items: int = 400,
    n_genres: int = 10,
    ratings_per_user: tuple[int, int] = (20, 80),
    seed: int = 0,
) -> tuple[Path, Path]:
    """Write ``ratings.dat`` and ``movies.dat`` under ``directory``.

    Users prefer one or two genres; items carry one to three genres and a
    long-tailed popularity.  Ratings rise with genre affinity, so roughly half
    of them land at 4 or above.
    """
    rng = np.random.default_rng(seed)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = [f"Genre{g:02d}" for g in range(n_genres)]

    item_genres = []
    for _ in range(n_items):
        k = rng.choice([1, 2, 3], p=[0.5, 0.35, 0.15])
        item_genres.append(np.sort(rng.choice(n_genres, size=k, replace=False)))
    popularity = rng.lognormal(0.0, 1.0, size=n_items)

    movies = directory / "movies.dat"
    with open(movies, "w", encoding="utf-8") as fh:
        for v, gs in enumerate(item_genres, start=1):
            fh.write(f"{v}::Movie {v} (2000)::{'|'.join(names[g] for g in gs)}\n")

    membership = np.zeros((n_items, n_genres))
    for v, gs in enumerate(item_genres):
        membership[v, gs] = 1.0 / len(gs)

    ratings = directory / "ratings.dat"
    ts = 978300000
    with open(ratings, "w", encoding="utf-8") as fh:
        for u in range(1, n_users + 1):
            pref = rng.dirichlet(np.full(n_genres, 0.3))
            affinity = membership @ pref
            weight = popularity * (0.05 + affinity)
            n = int(rng.integers(ratings_per_user[0], ratings_per_user[1] + 1))
            items = rng.choice(n_items, size=min(n, n_items), replace=False, p=weight / weight.sum())
            z = (affinity[items] - affinity.mean()) / (affinity.std() + 1e-12)
            stars = np.clip(np.rint(3.3 + 0.9 * z + rng.normal(0.0, 0.8, size=len(items))), 1, 5)
            for v, r in zip(items.tolist(), stars.tolist()):
                ts += int(rng.integers(1, 100))
                fh.write(f"{u}::{v + 1}::{int(r)}::{ts}\n")
    return ratings, movies
