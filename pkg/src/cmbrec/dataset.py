"""Rating ingestion, implicit-feedback binarisation, splitting and
negative sampling."""
from __future__ import annotations

import csv
import json
import logging
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np
import scipy.sparse as sp

from .kernels import csr_contains

_logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
CACHE_MAGIC = b"CMBD"
CACHE_VERSION = 1


class ParseError(ValueError):
    """A malformed input line; carries the file and 1-based line number."""

    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = str(path)
        self.lineno = lineno


class UnknownItemError(KeyError):
    """A rating references an item absent from the item metadata."""


class EmptyDatasetError(ValueError):
    """No interaction survived binarisation."""


@dataclass(frozen=True)
class RawInteraction:
    user_ext: int | str
    item_ext: int | str
    rating: float
    timestamp: int

    def __post_init__(self):
        if not 1.0 <= self.rating <= 5.0:
            raise ValueError(f"rating {self.rating} outside [1, 5]")


class TrainTriplet(NamedTuple):
    u: int
    i: int
    j: int


def _decode(raw: bytes) -> str:
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError:
        return raw.decode("latin-1")


def _lines(path) -> Iterable[tuple[int, str]]:
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = _decode(raw).rstrip("\r\n")
            if line.strip():
                yield lineno, line


def _parse_rating(path, lineno, user, item, rating, ts) -> RawInteraction:
    try:
        return RawInteraction(user, item, float(rating), int(float(ts)))
    except ValueError as exc:
        raise ParseError(path, lineno, str(exc)) from None


def load_movielens(ratings_path, movies_path):
    """Read MovieLens ``ratings.dat`` / ``movies.dat`` (``::``-delimited).

    Returns the raw interactions and a map from movie id to the set of genre
    indices; genres are indexed in first-seen order of ``movies_path``.
    """
    genres: dict[str, int] = {}
    item_topics: dict[int, frozenset[int]] = {}
    for lineno, line in _lines(movies_path):
        parts = line.split("::")
        if len(parts) != 3:
            raise ParseError(movies_path, lineno, "expected MovieID::Title::Genres")
        try:
            movie = int(parts[0])
        except ValueError:
            raise ParseError(movies_path, lineno, f"bad movie id {parts[0]!r}") from None
        idx = set()
        for g in parts[2].split("|"):
            g = g.strip()
            if g:
                idx.add(genres.setdefault(g, len(genres)))
        if not idx:
            raise ParseError(movies_path, lineno, "movie without genre")
        item_topics[movie] = frozenset(idx)

    raws = []
    for lineno, line in _lines(ratings_path):
        parts = line.split("::")
        if len(parts) != 4:
            raise ParseError(ratings_path, lineno, "expected UserID::MovieID::Rating::Timestamp")
        try:
            user, movie = int(parts[0]), int(parts[1])
        except ValueError:
            raise ParseError(ratings_path, lineno, "non-integer user or movie id") from None
        if movie not in item_topics:
            raise UnknownItemError(f"{ratings_path}:{lineno}: movie {movie} not in {movies_path}")
        raws.append(_parse_rating(ratings_path, lineno, user, movie, parts[2], parts[3]))
    return raws, item_topics


def load_csv(path, topics_path=None):
    """Generic ingestion: header ``user,item,rating,timestamp``.

    ``topics_path`` optionally names a CSV with header ``item,subtopic``
    (one row per item/subtopic pair); subtopic labels are indexed in
    first-seen order.
    """
    raws = []
    with open(path, newline="", encoding="utf-8", errors="replace") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return raws, {}
        if [h.strip() for h in header] != ["user", "item", "rating", "timestamp"]:
            raise ParseError(path, 1, "header must be user,item,rating,timestamp")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ParseError(path, lineno, f"expected 4 fields, got {len(row)}")
            raws.append(_parse_rating(path, lineno, row[0], row[1], row[2], row[3]))
    topics: dict[str, frozenset[int]] = {}
    if topics_path is not None:
        labels: dict[str, int] = {}
        acc: dict[str, set[int]] = {}
        with open(topics_path, newline="", encoding="utf-8", errors="replace") as fh:
            reader = csv.reader(fh)
            next(reader, None)
            for lineno, row in enumerate(reader, start=2):
                if len(row) != 2:
                    raise ParseError(topics_path, lineno, "expected item,subtopic")
                acc.setdefault(row[0], set()).add(labels.setdefault(row[1], len(labels)))
        topics = {k: frozenset(v) for k, v in acc.items()}
    return raws, topics


def load_amazon(ratings_path, meta_path, top_categories=30):
    """Amazon review dumps: headerless ``item,user,rating,timestamp`` CSV plus
    JSON-lines metadata with ``asin`` and ``category`` fields.

    Only the ``top_categories`` most frequent categories become subtopics;
    items outside all of them get an empty subtopic set.
    """
    raws = []
    with open(ratings_path, newline="", encoding="utf-8", errors="replace") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if len(row) != 4:
                raise ParseError(ratings_path, lineno, "expected item,user,rating,timestamp")
            raws.append(_parse_rating(ratings_path, lineno, row[1], row[0], row[2], row[3]))
    cats: dict[str, list[str]] = {}
    with open(meta_path, encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(meta_path, lineno, exc.msg) from None
            cats[rec["asin"]] = list(dict.fromkeys(rec.get("category") or []))
    freq = Counter(c for cs in cats.values() for c in cs)
    keep = {c: i for i, (c, _) in enumerate(sorted(freq.items(), key=lambda kv: (-kv[1], kv[0]))[:top_categories])}
    topics = {a: frozenset(keep[c] for c in cs if c in keep) for a, cs in cats.items()}
    return raws, topics


def _csr_from_lists(rows: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    indptr = np.zeros(len(rows) + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([len(r) for r in rows])
    indices = np.concatenate(rows).astype(np.int64) if rows else np.zeros(0, dtype=np.int64)
    return indptr, indices


def _freeze(*arrays):
    for a in arrays:
        a.setflags(write=False)


@dataclass(frozen=True, eq=False)
class InteractionDataset:
    """Indexed implicit-feedback data.

    Splits and subtopic assignments are CSR patterns: ``indptr`` of length
    ``n_rows + 1`` and sorted per-row ``indices``.
    """

    user_ids: np.ndarray
    item_ids: np.ndarray
    splits: dict[str, tuple[np.ndarray, np.ndarray]]
    topic_indptr: np.ndarray
    topic_indices: np.ndarray
    n_subtopics: int
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        _freeze(self.user_ids, self.item_ids, self.topic_indptr, self.topic_indices)
        for indptr, indices in self.splits.values():
            _freeze(indptr, indices)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def user_index(self) -> dict:
        return {u: i for i, u in enumerate(self.user_ids.tolist())}

    @property
    def item_index(self) -> dict:
        return {v: i for i, v in enumerate(self.item_ids.tolist())}

    def positives(self, split: str, u: int) -> np.ndarray:
        indptr, indices = self.splits[split]
        return indices[indptr[u] : indptr[u + 1]]

    def n_interactions(self, split: str | None = None) -> int:
        if split is None:
            return sum(len(self.splits[s][1]) for s in SPLITS)
        return len(self.splits[split][1])

    def matrix(self, split: str) -> sp.csr_matrix:
        """Binary user x item matrix of one split (cached)."""
        key = ("matrix", split)
        if key not in self._cache:
            indptr, indices = self.splits[split]
            data = np.ones(len(indices), dtype=np.float64)
            self._cache[key] = sp.csr_matrix((data, indices, indptr), shape=(self.n_users, self.n_items))
        return self._cache[key]

    def subtopics(self, v: int) -> np.ndarray:
        return self.topic_indices[self.topic_indptr[v] : self.topic_indptr[v + 1]]

    @property
    def item_topic_matrix(self) -> np.ndarray:
        """Dense ``n_items x n_subtopics`` membership matrix (uint8)."""
        if "topics" not in self._cache:
            out = np.zeros((self.n_items, self.n_subtopics), dtype=np.uint8)
            rows = np.repeat(np.arange(self.n_items), np.diff(self.topic_indptr))
            out[rows, self.topic_indices] = 1
            out.setflags(write=False)
            self._cache["topics"] = out
        return self._cache["topics"]

    def __eq__(self, other):
        if not isinstance(other, InteractionDataset):
            return NotImplemented
        same = (
            self.n_subtopics == other.n_subtopics
            and np.array_equal(self.user_ids, other.user_ids)
            and np.array_equal(self.item_ids, other.item_ids)
            and np.array_equal(self.topic_indptr, other.topic_indptr)
            and np.array_equal(self.topic_indices, other.topic_indices)
        )
        return same and all(
            np.array_equal(self.splits[s][0], other.splits[s][0])
            and np.array_equal(self.splits[s][1], other.splits[s][1])
            for s in SPLITS
        )

    __hash__ = None


def binarize_and_split(
    raw: list[RawInteraction],
    ratios=(0.8, 0.1, 0.1),
    seed: int = 0,
    item_topics: dict | None = None,
    threshold: float = 4.0,
) -> InteractionDataset:
    """Keep ratings ``>= threshold`` as positives and split each user's
    positives into train/test/valid by ``ratios`` (in that order).

    Test and valid sizes are floored, the remainder goes to train; users with
    fewer than three positives keep everything in train.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {ratios}")
    pos = {(r.user_ext, r.item_ext) for r in raw if r.rating >= threshold}
    # Users and items are defined by their surviving positives, so a single
    # pass reaches the zero-positive fixed point.
    if not pos:
        raise EmptyDatasetError("no interaction has rating >= %g" % threshold)
    user_ids = np.array(sorted({u for u, _ in pos}))
    item_ids = np.array(sorted({v for _, v in pos}))
    uidx = {u: i for i, u in enumerate(user_ids.tolist())}
    vidx = {v: i for i, v in enumerate(item_ids.tolist())}

    per_user: list[list[int]] = [[] for _ in range(len(user_ids))]
    for u, v in pos:
        per_user[uidx[u]].append(vidx[v])

    rng = np.random.default_rng(seed)
    parts = {s: [] for s in SPLITS}
    for items in per_user:
        items = np.array(sorted(items), dtype=np.int64)
        n = len(items)
        if n < 3:
            n_test = n_valid = 0
        else:
            n_test = int(np.floor(ratios[1] * n))
            n_valid = int(np.floor(ratios[2] * n))
        perm = rng.permutation(items)
        parts["test"].append(np.sort(perm[:n_test]))
        parts["valid"].append(np.sort(perm[n_test : n_test + n_valid]))
        parts["train"].append(np.sort(perm[n_test + n_valid :]))
    splits = {s: _csr_from_lists(parts[s]) for s in SPLITS}

    item_topics = item_topics or {}
    topic_rows = [np.array(sorted(item_topics.get(v, ())), dtype=np.int64) for v in item_ids.tolist()]
    t_indptr, t_indices = _csr_from_lists(topic_rows)
    all_topics = {t for ts in item_topics.values() for t in ts}
    n_sub = max(all_topics) + 1 if all_topics else 0
    return InteractionDataset(user_ids, item_ids, splits, t_indptr, t_indices, n_sub)


def sample_negatives(ds: InteractionDataset, n_neg: int = 3, seed: int | np.random.Generator = 0) -> np.ndarray:
    """Rejection-sample ``n_neg`` negatives per training positive.

    Returns an ``(N, 3)`` int64 array of ``(u, i, j)`` rows, grouped per
    positive in CSR order.  Users who interacted with every item are skipped.
    """
    if n_neg < 1:
        raise ValueError("n_neg must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    indptr, indices = ds.splits["train"]
    counts = np.diff(indptr)
    full = counts >= ds.n_items
    if full.any():
        _logger.warning("%d user(s) have no non-interacted item; skipped", int(full.sum()))
    users = np.repeat(np.arange(ds.n_users, dtype=np.int64), counts)
    keep = ~full[users]
    u = np.repeat(users[keep], n_neg)
    i = np.repeat(indices[keep], n_neg)
    j = rng.integers(ds.n_items, size=len(u), dtype=np.int64)
    bad = np.flatnonzero(csr_contains(indptr, indices, u, j, ds.n_items))
    while len(bad):
        j[bad] = rng.integers(ds.n_items, size=len(bad), dtype=np.int64)
        bad = bad[csr_contains(indptr, indices, u[bad], j[bad], ds.n_items)]
    return np.stack([u, i, j], axis=1)


# ---------------------------------------------------------------------------
# binary cache
# ---------------------------------------------------------------------------


def _write_ids(fh, ids: np.ndarray):
    if ids.dtype.kind in "iu":
        fh.write(struct.pack("<B", 0))
        fh.write(ids.astype("<i8").tobytes())
    else:
        fh.write(struct.pack("<B", 1))
        for s in ids.tolist():
            b = str(s).encode("utf-8")
            fh.write(struct.pack("<I", len(b)))
            fh.write(b)


def _read_ids(fh, n):
    (kind,) = struct.unpack("<B", fh.read(1))
    if kind == 0:
        return np.frombuffer(fh.read(8 * n), dtype="<i8").astype(np.int64)
    out = []
    for _ in range(n):
        (ln,) = struct.unpack("<I", fh.read(4))
        out.append(fh.read(ln).decode("utf-8"))
    return np.array(out)


def _write_csr(fh, indptr, indices):
    fh.write(struct.pack("<Q", len(indices)))
    fh.write(indptr.astype("<u8").tobytes())
    fh.write(indices.astype("<u4").tobytes())


def _read_csr(fh, n_rows):
    (nnz,) = struct.unpack("<Q", fh.read(8))
    indptr = np.frombuffer(fh.read(8 * (n_rows + 1)), dtype="<u8").astype(np.int64)
    indices = np.frombuffer(fh.read(4 * nnz), dtype="<u4").astype(np.int64)
    return indptr, indices


def save_dataset(ds: InteractionDataset, path) -> None:
    """Write the ``CMBD`` little-endian cache (layout in README)."""
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<IIII", CACHE_VERSION, ds.n_users, ds.n_items, ds.n_subtopics))
        _write_ids(fh, ds.user_ids)
        _write_ids(fh, ds.item_ids)
        for s in SPLITS:
            _write_csr(fh, *ds.splits[s])
        _write_csr(fh, ds.topic_indptr, ds.topic_indices)


def load_dataset(path) -> InteractionDataset:
    with open(path, "rb") as fh:
        if fh.read(4) != CACHE_MAGIC:
            raise ValueError(f"{path}: not a CMBD dataset cache")
        version, n_users, n_items, n_sub = struct.unpack("<IIII", fh.read(16))
        if version != CACHE_VERSION:
            raise ValueError(f"{path}: unsupported cache version {version}")
        user_ids = _read_ids(fh, n_users)
        item_ids = _read_ids(fh, n_items)
        splits = {s: _read_csr(fh, n_users) for s in SPLITS}
        t_indptr, t_indices = _read_csr(fh, n_items)
    return InteractionDataset(user_ids, item_ids, splits, t_indptr, t_indices, n_sub)


def dataset_stats(ds: InteractionDataset) -> dict:
    n = ds.n_interactions()
    return {
        "users": ds.n_users,
        "items": ds.n_items,
        "subtopics": ds.n_subtopics,
        "interactions": n,
        "density": n / (ds.n_users * ds.n_items),
    }


def from_arrays(train, valid=None, test=None, item_topics=None, n_items=None, n_subtopics=None) -> InteractionDataset:
    """Build a dataset directly from per-user index lists (fixtures, tests)."""
    n_users = len(train)
    valid = valid if valid is not None else [[] for _ in range(n_users)]
    test = test if test is not None else [[] for _ in range(n_users)]
    if n_items is None:
        n_items = 1 + max(max((max(r) for r in part if len(r)), default=-1) for part in (train, valid, test))
    splits = {
        name: _csr_from_lists([np.array(sorted(r), dtype=np.int64) for r in part])
        for name, part in (("train", train), ("valid", valid), ("test", test))
    }
    item_topics = item_topics if item_topics is not None else [[] for _ in range(n_items)]
    if len(item_topics) != n_items:
        raise ValueError(f"item_topics has {len(item_topics)} rows for {n_items} items")
    t_indptr, t_indices = _csr_from_lists([np.array(sorted(t), dtype=np.int64) for t in item_topics])
    if n_subtopics is None:
        n_subtopics = int(t_indices.max()) + 1 if len(t_indices) else 0
    return InteractionDataset(
        np.arange(n_users), np.arange(n_items), splits, t_indptr, t_indices, n_subtopics
    )
