import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmbrec.dataset import (
    EmptyDatasetError,
    ParseError,
    RawInteraction,
    UnknownItemError,
    binarize_and_split,
    from_arrays,
    load_csv,
    load_dataset,
    load_movielens,
    sample_negatives,
    save_dataset,
)


def _write(path, text, encoding="utf-8"):
    path.write_bytes(text.encode(encoding))
    return path


@pytest.fixture
def ml_files(tmp_path):
    movies = _write(tmp_path / "movies.dat", "1::A (1990)::Drama|Comedy\n2::B (1991)::Comedy\n3::C::Horror\n")
    ratings = _write(tmp_path / "ratings.dat", "1::1::5::100\n1::2::3::101\n2::3::4::102\n")
    return ratings, movies


def test_three_line_fixture_field_by_field(ml_files):
    raws, topics = load_movielens(*ml_files)
    assert raws == [
        RawInteraction(1, 1, 5.0, 100),
        RawInteraction(1, 2, 3.0, 101),
        RawInteraction(2, 3, 4.0, 102),
    ]
    # genre vocabulary in first-seen order
    assert topics == {1: frozenset({0, 1}), 2: frozenset({1}), 3: frozenset({2})}


def test_empty_ratings_file(tmp_path, ml_files):
    empty = _write(tmp_path / "empty.dat", "")
    raws, _ = load_movielens(empty, ml_files[1])
    assert raws == []


def test_malformed_line_reports_line_number(tmp_path, ml_files):
    bad = _write(tmp_path / "bad.dat", "1::1::5::100\n1::2::oops\n")
    with pytest.raises(ParseError) as exc:
        load_movielens(bad, ml_files[1])
    assert exc.value.lineno == 2 and "bad.dat:2" in str(exc.value)


def test_rating_out_of_range_is_parse_error(tmp_path, ml_files):
    bad = _write(tmp_path / "bad.dat", "1::1::7::100\n")
    with pytest.raises(ParseError):
        load_movielens(bad, ml_files[1])


def test_unknown_movie(tmp_path, ml_files):
    bad = _write(tmp_path / "r.dat", "1::99::5::100\n")
    with pytest.raises(UnknownItemError):
        load_movielens(bad, ml_files[1])


def test_latin1_tolerant(tmp_path):
    movies = _write(tmp_path / "m.dat", "1::Caf\xe9 (1990)::Drama\n", encoding="latin-1")
    ratings = _write(tmp_path / "r.dat", "1::1::4::1\n")
    raws, topics = load_movielens(ratings, movies)
    assert len(raws) == 1 and topics[1] == frozenset({0})


def test_load_csv_with_topics(tmp_path):
    r = _write(tmp_path / "r.csv", "user,item,rating,timestamp\nu1,a,5,1\nu2,b,4,2\n")
    t = _write(tmp_path / "t.csv", "item,subtopic\na,x\na,y\nb,y\n")
    raws, topics = load_csv(r, t)
    assert [x.item_ext for x in raws] == ["a", "b"]
    assert topics == {"a": frozenset({0, 1}), "b": frozenset({1})}
    ds = binarize_and_split(raws, item_topics=topics)
    assert ds.n_subtopics == 2


def test_load_csv_bad_header(tmp_path):
    r = _write(tmp_path / "r.csv", "a,b,c,d\n")
    with pytest.raises(ParseError):
        load_csv(r)


def test_raw_interaction_range():
    with pytest.raises(ValueError):
        RawInteraction(1, 1, 0.5, 0)


def test_user_with_only_threes_is_dropped():
    raw = [RawInteraction(1, 10, 5, 0), RawInteraction(2, 10, 3, 0), RawInteraction(2, 11, 3, 0)]
    ds = binarize_and_split(raw)
    assert list(ds.user_ids) == [1]
    assert list(ds.item_ids) == [10]


def test_no_survivors():
    with pytest.raises(EmptyDatasetError):
        binarize_and_split([RawInteraction(1, 1, 2, 0)])


def test_ratios_must_sum_to_one():
    with pytest.raises(ValueError):
        binarize_and_split([RawInteraction(1, 1, 5, 0)], ratios=(0.5, 0.1, 0.1))


def test_split_proportions_on_synthetic_corpus():
    rng = np.random.default_rng(0)
    raw = [
        RawInteraction(u, v, float(rng.integers(1, 6)), 0)
        for u in range(100)
        for v in rng.choice(50, size=int(rng.integers(15, 45)), replace=False)
    ]
    ds = binarize_and_split(raw, seed=1)
    checked = 0
    for u in range(ds.n_users):
        n = [len(ds.positives(s, u)) for s in ("train", "valid", "test")]
        if sum(n) >= 10:
            assert 0.7 <= n[0] / sum(n) <= 0.9
            checked += 1
    assert checked > 50


def test_split_invariants(synth_ds):
    ds = synth_ds
    for u in range(ds.n_users):
        tr, va, te = (set(ds.positives(s, u).tolist()) for s in ("train", "valid", "test"))
        assert tr, "every user keeps a training positive"
        assert not (tr & va or tr & te or va & te)
    seen = np.zeros(ds.n_items, dtype=bool)
    for s in ("train", "valid", "test"):
        seen[ds.splits[s][1]] = True
    assert seen.all()
    assert (ds.topic_indices < ds.n_subtopics).all()


def test_split_is_seed_deterministic(synth_files):
    raw, topics = load_movielens(*synth_files)
    a = binarize_and_split(raw, seed=3, item_topics=topics)
    b = binarize_and_split(raw, seed=3, item_topics=topics)
    assert a == b


def test_negatives_exhaustive(synth_ds):
    trip = sample_negatives(synth_ds, 3, seed=0)
    assert len(trip) == 3 * synth_ds.n_interactions("train")
    for u, i, j in trip[:: max(1, len(trip) // 3000)].tolist():
        pos = set(synth_ds.positives("train", u).tolist())
        assert i in pos and j not in pos
    # the full check, vectorised
    M = synth_ds.matrix("train").toarray().astype(bool)
    assert M[trip[:, 0], trip[:, 1]].all()
    assert not M[trip[:, 0], trip[:, 2]].any()


def test_negatives_deterministic(synth_ds):
    assert np.array_equal(sample_negatives(synth_ds, 3, 5), sample_negatives(synth_ds, 3, 5))


def test_single_admissible_negative():
    ds = from_arrays([list(range(9))], n_items=10)
    trip = sample_negatives(ds, 3, seed=0)
    assert len(trip) == 27 and (trip[:, 2] == 9).all()


def test_full_user_skipped(caplog):
    ds = from_arrays([list(range(4)), [0]], n_items=4)
    trip = sample_negatives(ds, 2, seed=0)
    assert (trip[:, 0] == 1).all() and len(trip) == 2
    assert "skipped" in caplog.text


def test_cache_round_trip(synth_ds, tmp_path):
    p = tmp_path / "ds.cmbd"
    save_dataset(synth_ds, p)
    assert p.read_bytes()[:4] == b"CMBD"
    assert load_dataset(p) == synth_ds


def test_cache_round_trip_string_ids(tmp_path):
    raw = [RawInteraction("alice", "x", 5, 0), RawInteraction("bob", "y", 4, 0)]
    ds = binarize_and_split(raw)
    save_dataset(ds, tmp_path / "c")
    back = load_dataset(tmp_path / "c")
    assert back == ds and list(back.user_ids) == ["alice", "bob"]


@settings(max_examples=40, deadline=None)
@given(
    st.lists(
        st.tuples(st.integers(0, 15), st.integers(0, 20), st.integers(1, 5)),
        min_size=1,
        max_size=200,
    ),
    st.integers(0, 2**16),
)
def test_split_property(rows, seed):
    raw = [RawInteraction(u, v, r, 0) for u, v, r in rows]
    if not any(r >= 4 for _, _, r in rows):
        with pytest.raises(EmptyDatasetError):
            binarize_and_split(raw, seed=seed)
        return
    ds = binarize_and_split(raw, seed=seed)
    pos = {(u, v) for u, v, r in rows if r >= 4}
    total = 0
    for u in range(ds.n_users):
        parts = [set(ds.positives(s, u).tolist()) for s in ("train", "valid", "test")]
        assert parts[0]
        assert sum(map(len, parts)) == len(set().union(*parts))
        total += sum(map(len, parts))
    assert total == len(pos)
