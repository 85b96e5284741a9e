import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from cmbrec.dataset import from_arrays
from cmbrec.metrics import (
    MetricReport,
    UndefinedCosineError,
    alpha_dcg,
    alpha_ideal_list,
    alpha_ndcg_at_k,
    evaluate,
    ilad_at_k,
    ndcg_at_k,
    pc_at_k,
    recall_at_k,
    sc_at_k,
    unit_item_vectors,
)
from cmbrec.ranking import RecommendationSet, topk_recommend


def _instance(rng, n_items=None, m=None, K=None):
    n_items = n_items or int(rng.integers(3, 21))
    m = m or int(rng.integers(1, 6))
    K = K or int(rng.integers(2, n_items + 1))
    lst = rng.permutation(n_items)[:K].tolist()
    truth = set(rng.choice(n_items, size=int(rng.integers(1, n_items + 1)), replace=False).tolist())
    topics = [set(rng.choice(m, size=int(rng.integers(0, m + 1)), replace=False).tolist()) for _ in range(n_items)]
    if not any(topics):
        topics[0] = {0}
    return n_items, m, K, lst, truth, topics


# --- hand-checked values ---------------------------------------------------


def test_recall_examples():
    assert recall_at_k([3, 1, 4], {1, 2}, 3) == 0.5
    assert recall_at_k([1, 2, 9], {1, 2}, 3) == 1.0
    assert recall_at_k([5, 6], {1, 2}, 2) == 0.0


def test_ndcg_examples():
    assert abs(ndcg_at_k([7, 3], {3}, 2) - (1 / math.log2(3)) / 1.0) < 1e-12
    assert abs(ndcg_at_k([7, 3], {3}, 2) - 0.6309297535714575) < 1e-12
    assert ndcg_at_k([1, 2, 3], {1, 2, 3, 4}, 3) == 1.0
    assert ndcg_at_k([5, 6], {1}, 2) == 0.0


def test_alpha_dcg_repeated_subtopic():
    topics = {0: {0}, 1: {0}}
    assert abs(alpha_dcg([0, 1], topics, 0.5, 2) - (1 + 0.5 / math.log2(3))) < 1e-12


def test_alpha_ndcg_single_position():
    topics = [{0}, {1}, {2}]
    assert alpha_ndcg_at_k([1], topics, 0.5, 1) == 1.0


def test_alpha_ndcg_empty_topics_zero_gain():
    topics = [set(), {0}]
    assert alpha_ndcg_at_k([0], topics, 0.5, 1) == 0.0


def test_alpha_range_checked():
    with pytest.raises(ValueError):
        alpha_ndcg_at_k([0], [{0}], 1.0, 1)


def test_sc_examples():
    topics = [{s} for s in range(18)] + [{0}, {0}]
    assert sc_at_k([0, 18, 19], topics, 3) == 1 / 18
    assert sc_at_k([0, 1, 2], [{0}, {1}, {0, 1}], 3) == 1.0


def test_pc_examples():
    assert pc_at_k([[0, 1], [1, 0], [0, 1]], 10, 2) == 0.2
    assert pc_at_k([[0, 1], [2, 3], [4]], 5) == 1.0


def test_ilad_examples():
    Q = np.array([[1.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    assert ilad_at_k([0, 1], Q, 2) == 0.0
    assert abs(ilad_at_k([0, 2], Q, 2) - 1.0) < 1e-15
    with pytest.raises(UndefinedCosineError):
        ilad_at_k([0, 1], np.array([[1.0, 0.0]]), 2)
    with pytest.raises(UndefinedCosineError):
        unit_item_vectors(np.array([[1.0, 0.0]]))


def test_ilad_four_random_vectors():
    rng = np.random.default_rng(0)
    Q = rng.normal(size=(5, 4))
    assert abs(ilad_at_k([0, 1, 2, 3], Q, 4) - oracles.ilad([0, 1, 2, 3], Q.T.tolist(), 4)) < 1e-12


# --- randomized oracle agreement --------------------------------------------


def test_oracles_on_200_instances():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        n, m, K, lst, truth, topics = _instance(rng)
        assert abs(recall_at_k(lst, truth, K) - oracles.recall(lst, truth, K)) < 1e-9
        assert abs(ndcg_at_k(lst, truth, K) - oracles.ndcg(lst, truth, K)) < 1e-9
        assert abs(sc_at_k(lst, topics, K) - oracles.sc(lst, topics, K)) < 1e-9
        assert abs(alpha_dcg(lst, topics, 0.5, K) - oracles.alpha_dcg(lst, topics, 0.5, K, m)) < 1e-9
        lists = [rng.permutation(n)[:K].tolist() for _ in range(3)]
        assert abs(pc_at_k(lists, n, K) - oracles.pc(lists, n, K)) < 1e-9
        Q = rng.normal(size=(4, n))
        assert abs(ilad_at_k(lst, Q, K) - oracles.ilad(lst, Q.T.tolist(), K)) < 1e-9


def test_alpha_ndcg_exhaustive_ideal():
    rng = np.random.default_rng(7)
    checked = 0
    for _ in range(200):
        n, m, K, lst, _, topics = _instance(rng, n_items=int(rng.integers(3, 7)))
        exhaustive = oracles.exhaustive_alpha_idcg(topics, 0.5, K, m)
        greedy = oracles.alpha_dcg(alpha_ideal_list(topics, 0.5, K), topics, 0.5, K, m)
        if abs(greedy - exhaustive) > 1e-12:
            continue
        checked += 1
        expect = oracles.alpha_dcg(lst, topics, 0.5, K, m) / exhaustive
        assert abs(alpha_ndcg_at_k(lst, topics, 0.5, K) - expect) < 1e-9
    assert checked > 100


def test_alpha_ndcg_small_alpha_degenerates_to_dcg():
    # one subtopic per item: every position contributes ~1 when alpha -> 0
    topics = [{0}, {0}, {1}, {1}, {0}]
    lst = [0, 1, 2, 3]
    direct = sum(1 / math.log2(k + 2) for k in range(4))
    assert abs(alpha_dcg(lst, topics, 1e-9, 4) - direct) < 1e-8
    assert abs(alpha_ndcg_at_k(lst, topics, 1e-9, 4) - 1.0) < 1e-8


def test_bounded_ranges_10k_fuzz():
    rng = np.random.default_rng(99)
    for _ in range(10_000):
        n, m, K, lst, truth, topics = _instance(rng, n_items=int(rng.integers(3, 9)))
        for val in (
            recall_at_k(lst, truth, K),
            ndcg_at_k(lst, truth, K),
            sc_at_k(lst, topics, K),
            pc_at_k([lst], n, K),
        ):
            assert 0.0 <= val <= 1.0 + 1e-12
        a = alpha_ndcg_at_k(lst, topics, 0.5, K)
        assert 0.0 <= a <= 1.0 + 1e-12
        Q = rng.normal(size=(3, n))
        assert -1e-12 <= ilad_at_k(lst, Q, K) <= 2.0 + 1e-12


# --- properties ---------------------------------------------------------------


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 5))
def test_recall_ndcg_ignore_tail(seed, K):
    rng = np.random.default_rng(seed)
    lst = rng.permutation(20).tolist()
    truth = set(rng.choice(20, size=4, replace=False).tolist())
    other = lst[:K] + [v for v in rng.permutation(20).tolist() if v not in lst[:K]]
    assert recall_at_k(lst, truth, K) == recall_at_k(other, truth, K)
    assert ndcg_at_k(lst, truth, K) == ndcg_at_k(other, truth, K)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ilad_rescaling_invariant(seed):
    rng = np.random.default_rng(seed)
    Q = rng.normal(size=(4, 6))
    s = rng.uniform(0.1, 10.0, size=6)
    a, b = ilad_at_k([0, 2, 4, 5], Q, 4), ilad_at_k([0, 2, 4, 5], Q * s, 4)
    assert abs(a - b) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_pc_user_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    lists = [rng.permutation(12)[:3].tolist() for _ in range(5)]
    perm = [lists[i] for i in rng.permutation(5)]
    assert pc_at_k(lists, 12, 3) == pc_at_k(perm, 12, 3)


# --- population evaluation ----------------------------------------------------


def test_evaluate_matches_single_list_functions(synth_ds, synth_model):
    ds, f = synth_ds, synth_model
    recs = topk_recommend(f, ds, 20)
    report = evaluate(recs, ds, f.Q, (10, 20))
    topics = [set(ds.subtopics(v).tolist()) for v in range(ds.n_items)]
    for K in (10, 20):
        recalls, ndcgs, alphas, scs, ilads = [], [], [], [], []
        for r, u in enumerate(recs.users.tolist()):
            lst = recs.lists[r].tolist()
            truth = set(ds.positives("test", u).tolist())
            if truth:
                recalls.append(oracles.recall(lst, truth, K))
                ndcgs.append(oracles.ndcg(lst, truth, K))
            alphas.append(alpha_ndcg_at_k(lst, topics, 0.5, K))
            scs.append(oracles.sc(lst, topics, K))
            ilads.append(ilad_at_k(lst, f.Q, K))
        assert abs(report.get("recall", K) - np.mean(recalls)) < 1e-9
        assert abs(report.get("ndcg", K) - np.mean(ndcgs)) < 1e-9
        assert abs(report.get("alpha_ndcg", K) - np.mean(alphas)) < 1e-9
        assert abs(report.get("sc", K) - np.mean(scs)) < 1e-9
        assert abs(report.get("ilad", K) - np.mean(ilads)) < 1e-9
        assert abs(report.get("pc", K) - oracles.pc(recs.lists.tolist(), ds.n_items, K)) < 1e-12


def test_empty_truth_users_excluded_from_accuracy():
    ds = from_arrays([[0], [1]], test=[[2], []], item_topics=[[0], [1], [0], []], n_items=4)
    recs = RecommendationSet([0, 1], [[2, 3], [3, 0]])
    rep = evaluate(recs, ds, np.eye(4) + 0.1, (2,))
    assert rep.get("recall", 2) == 1.0
    assert rep.get("sc", 2) == 0.5  # each list covers subtopic 0 of the two


def test_report_io(tmp_path):
    rep = MetricReport({("recall", 10): 0.25, ("ilad", 10): 0.5, ("recall", 20): 1 / 3})
    rep.to_csv(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "metric,K,value"
    assert MetricReport.from_csv(tmp_path / "r.csv") == rep
    rep.to_json(tmp_path / "r.json")
    assert '"recall"' in (tmp_path / "r.json").read_text()
