import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ttrec import evalrank as ev

import oracles


def test_rank_scores_examples():
    assert ev.rank_scores([2.0, 1.0]).tolist() == [0, 1]
    assert ev.rank_scores([1.0, 2.0]).tolist() == [1, 0]
    assert ev.rank_scores([0.5, 0.5, 0.5]).tolist() == [0, 1, 2]
    assert ev.rank_scores([3.0, 1.0, 2.0], exclude=[0, 2]).tolist() == [1]
    with pytest.raises(ValueError):
        ev.rank_scores([1.0, 2.0], exclude=[0, 1])


def test_recall_ndcg_examples():
    assert ev.recall_at_k([3, 1, 2], {1, 3}, 2) == 1.0
    assert ev.recall_at_k([3, 1, 2], {0}, 2) == 0.0
    assert ev.recall_at_k([3, 1, 2], {3, 2}, 2) == 0.5
    assert ev.ndcg_at_k([1, 3, 2], {1, 3}, 3) == pytest.approx(1.0)
    assert ev.ndcg_at_k([0, 5], {5}, 2) == pytest.approx(1 / math.log2(3))
    assert ev.ndcg_at_k([0, 5], {5}, 2) == pytest.approx(0.6309, abs=1e-4)
    assert ev.ndcg_at_k([0, 5], {7}, 2) == 0.0
    with pytest.raises(ValueError):
        ev.recall_at_k([1], set(), 1)


def random_instance(rng, n_users, n_items, tie_levels=None):
    if tie_levels:
        scores = rng.integers(0, tie_levels, (n_users, n_items)).astype(float)
    else:
        scores = rng.normal(size=(n_users, n_items))
    exclude = rng.random((n_users, n_items)) < 0.25
    exclude[:, 0] = False  # at least one candidate per user
    relevant = (rng.random((n_users, n_items)) < 0.35) & ~exclude
    if not relevant.any():
        relevant[0, 0] = True
    return scores, exclude, relevant


def brute(scores, exclude, relevant, ks):
    excl = [set(np.flatnonzero(r).tolist()) for r in exclude]
    rel = [set(np.flatnonzero(r).tolist()) for r in relevant]
    return oracles.brute_force_metrics(scores.tolist(), excl, rel, ks)


def assert_equal_metrics(got, want):
    for k, (r, n) in want.items():
        assert got.per_k[k] == (r, n)


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 6), st.integers(1, 10), st.integers(0, 10**6), st.sampled_from([None, 2, 3]))
def test_evaluate_scores_matches_brute_force(n_users, n_items, seed, ties):
    rng = np.random.default_rng(seed)
    scores, exclude, relevant = random_instance(rng, n_users, n_items, ties)
    ks = sorted({1, min(3, n_items), n_items, 10})
    got = ev.evaluate_scores(scores, exclude, relevant, ks)
    assert_equal_metrics(got, brute(scores, exclude, relevant, ks))
    assert got.users_evaluated == int(relevant.any(axis=1).sum())


def test_five_by_eight_toy():
    rng = np.random.default_rng(11)
    scores, exclude, relevant = random_instance(rng, 5, 8)
    assert_equal_metrics(ev.evaluate_scores(scores, exclude, relevant, (2, 5)),
                         brute(scores, exclude, relevant, (2, 5)))


def test_perfect_model_scores_one():
    relevant = np.array([[1, 0, 0, 1], [0, 1, 0, 0]], dtype=bool)
    scores = relevant.astype(float)
    m = ev.evaluate_scores(scores, np.zeros_like(relevant), relevant, (2, 3))
    assert m.per_k == {2: (1.0, 1.0), 3: (1.0, 1.0)}


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.floats(-100, 100))
def test_monotone_bounded_shift_invariant(seed, shift):
    rng = np.random.default_rng(seed)
    scores, exclude, relevant = random_instance(rng, 4, 9)
    ks = list(range(1, 10))
    m = ev.evaluate_scores(scores, exclude, relevant, ks)
    recalls = [m.recall(k) for k in ks]
    assert all(a <= b + 1e-15 for a, b in zip(recalls, recalls[1:]))
    assert all(0 <= m.recall(k) <= 1 and 0 <= m.ndcg(k) <= 1 + 1e-12 for k in ks)
    shifted = ev.evaluate_scores(scores + shift, exclude, relevant, ks)
    assert shifted.per_k == m.per_k


def test_users_without_relevant_items_skipped_and_errors():
    scores = np.array([[1.0, 0.0], [0.0, 1.0]])
    rel = np.array([[True, False], [False, False]])
    m = ev.evaluate_scores(scores, np.zeros((2, 2), bool), rel, (1,))
    assert m.users_evaluated == 1 and m.recall(1) == 1.0
    with pytest.raises(ValueError, match="no evaluable users"):
        ev.evaluate_scores(scores, np.zeros((2, 2), bool), np.zeros((2, 2), bool), (1,))
    with pytest.raises(ValueError):
        ev.evaluate_scores(scores, np.zeros((2, 2), bool), rel, (0,))


def test_metrics_json_layout():
    m = ev.RankingMetrics({10: (0.082, 0.5)}, 7)
    d = m.to_dict()
    assert d["10"]["recall"] == 0.082 and d["10"]["recall_pct"] == pytest.approx(8.2)
    assert d["users"] == 7 and d["split"] == "test_ood"
    assert m.to_json() == m.to_json()


def test_evaluate_uses_train_and_valid_as_exclusions(small_dataset, monkeypatch):
    ds = small_dataset
    scores = np.random.default_rng(0).normal(size=(ds.n_users, ds.n_items))
    monkeypatch.setattr(ev, "score_matrix", lambda model, inputs: scores)
    inter = ds.ood
    exclude = inter.positives("train", "valid").matrix(ds.n_users, ds.n_items) > 0
    relevant = inter.positives("test").matrix(ds.n_users, ds.n_items) > 0
    got = ev.evaluate(None, ds, "ood", "test", ks=(3, 5), inputs=object())
    assert_equal_metrics(got, brute(scores, exclude, relevant, (3, 5)))
    exclude_v = inter.positives("train").matrix(ds.n_users, ds.n_items) > 0
    relevant_v = inter.positives("valid").matrix(ds.n_users, ds.n_items) > 0
    got_v = ev.evaluate(None, ds, "ood", "valid", ks=(3,), inputs=object())
    assert_equal_metrics(got_v, brute(scores, exclude_v, relevant_v, (3,)))
