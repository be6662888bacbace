import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from onsetclust import evalkit, segmenter, ticc
from onsetclust.core import InputError
from onsetclust.segmenter import viterbi_path
from onsetclust.ticc import GlassoConfig

from oracles import brute_force_paths, path_total


def test_viterbi_beta_zero_is_argmin():
    costs = np.random.default_rng(0).random((30, 3))
    np.testing.assert_array_equal(viterbi_path(costs, 0.0), costs.argmin(axis=1))


def test_viterbi_huge_beta_is_constant_best_column():
    costs = np.random.default_rng(1).random((25, 3))
    beta = float(np.sum(costs.max(axis=1) - costs.min(axis=1))) + 1.0
    path = viterbi_path(costs, beta)
    assert np.all(path == costs.sum(axis=0).argmin())


def test_viterbi_single_cluster():
    costs = np.random.default_rng(2).random((10, 1))
    np.testing.assert_array_equal(viterbi_path(costs, 3.0), 0)
    assert segmenter.path_cost(costs, np.zeros(10, int), 3.0) == pytest.approx(costs.sum())


def test_viterbi_matches_brute_force_random():
    rng = np.random.default_rng(3)
    for _ in range(30):
        N, K = int(rng.integers(1, 9)), int(rng.integers(1, 4))
        costs = rng.random((N, K)) * 5
        beta = float(rng.uniform(0, 3))
        seqs, total = brute_force_paths(costs, beta)
        path = viterbi_path(costs, beta)
        np.testing.assert_array_equal(path, seqs[np.argmin(total)])


def test_viterbi_ties_stay_then_lower_id():
    np.testing.assert_array_equal(viterbi_path(np.zeros((5, 3)), 1.0), 0)
    # [0,0] and [0,1] both cost 3; the final tie goes to the lower id
    np.testing.assert_array_equal(viterbi_path([[0.0, 5.0], [3.0, 0.0]], 3.0), [0, 0])
    # [0,1] and [1,1] both cost 0; inside the recursion, staying wins
    np.testing.assert_array_equal(viterbi_path([[0.0, 0.0], [9.0, 0.0]], 0.0), [1, 1])


def test_viterbi_integer_costs_optimal_value():
    rng = np.random.default_rng(4)
    for _ in range(30):
        N, K = int(rng.integers(2, 8)), int(rng.integers(2, 4))
        costs = rng.integers(0, 3, (N, K)).astype(float)
        beta = float(rng.integers(0, 3))
        _, total = brute_force_paths(costs, beta)
        assert path_total(costs, viterbi_path(costs, beta), beta) == total.min()


@settings(max_examples=30, deadline=None)
@given(N=st.integers(2, 40), K=st.integers(2, 4), seed=st.integers(0, 10_000))
def test_switches_non_increasing_in_beta(N, K, seed):
    costs = np.random.default_rng(seed).random((N, K)) * 3
    counts = [np.count_nonzero(np.diff(viterbi_path(costs, b))) for b in (0, 1, 5, 10, 50, 1000)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_viterbi_rejects_bad_input():
    with pytest.raises(InputError):
        viterbi_path(np.zeros((0, 2)), 1.0)
    with pytest.raises(InputError):
        viterbi_path(np.zeros((3, 2)), -1.0)


def test_initialize_assignment():
    rng = np.random.default_rng(5)
    W = np.vstack([rng.normal(0, 0.1, (20, 2)), rng.normal(50, 0.1, (15, 2))])
    lab = segmenter.initialize_assignment(W, 2, seed=1).labels
    assert len(set(lab[:20])) == 1 and len(set(lab[20:])) == 1 and lab[0] != lab[-1]
    np.testing.assert_array_equal(segmenter.initialize_assignment(W, 1).labels, 0)
    np.testing.assert_array_equal(lab, segmenter.initialize_assignment(W, 2, seed=1).labels)
    with pytest.raises(InputError):
        segmenter.initialize_assignment(W, 36)


def test_em_single_gaussian_k1():
    X, _, _ = evalkit.generate_synthetic(evalkit.make_single_state(0, length=300))
    seg = segmenter.em_fit(X, 1, 10.0, GlassoConfig(lam=0.05))
    assert seg.converged and seg.n_iterations <= 2
    assert seg.subsequences == [(0, 0, 299)]
    assert seg.onsets == []


def test_em_recovers_mean_shifted_blocks():
    # clearly separated states: every window's cluster is obvious
    rng = np.random.default_rng(6)
    truth = np.repeat([0, 1, 0, 1], 60)
    X = rng.standard_normal((truth.size, 3)) * 0.3 + 4.0 * truth[:, None]
    seg = segmenter.em_fit(X, 2, 5.0, GlassoConfig(lam=0.05), seed=0)
    assert evalkit.acc_matched(truth, seg.assignment.labels, 2) == 1.0
    assert seg.converged
    tr = np.array(seg.objective_trace)
    assert np.all(np.diff(tr) <= 1e-6)
    assert [o["epoch"] for o in seg.onsets] == [60, 120, 180]
    assert seg.semantics[seg.assignment.labels[0]] == segmenter.NORMAL


def test_em_is_deterministic():
    X, _, _ = evalkit.generate_synthetic(evalkit.make_scenario_a(1))
    a = segmenter.em_fit(X[:400], 2, 5.0, GlassoConfig(lam=0.05), seed=3)
    b = segmenter.em_fit(X[:400], 2, 5.0, GlassoConfig(lam=0.05), seed=3)
    assert a.objective_trace == b.objective_trace
    np.testing.assert_array_equal(a.assignment.labels, b.assignment.labels)


def test_em_drops_cluster_that_keeps_emptying():
    X, _, _ = evalkit.generate_synthetic(evalkit.make_single_state(1, length=300))
    seg = segmenter.em_fit(X, 2, 1e4, GlassoConfig(lam=0.05))
    assert seg.k_reduced and len(seg.models) == 1
    assert len(seg.reseeds) == 3


def test_reseed_moves_worst_windows():
    costs = np.array([[1.0, 9], [5.0, 9], [2.0, 9], [7.0, 9]])
    labels = np.zeros(4, dtype=int)
    out = segmenter._reseed(labels, costs, np.array([1]), 2)
    np.testing.assert_array_equal(out, [0, 1, 0, 1])


def test_bic_table_and_failures():
    X, _, _ = evalkit.generate_synthetic(evalkit.make_single_state(2, length=300))
    best, table, failures = segmenter.bic_select(X, [1, 2, 400], 10.0, GlassoConfig(lam=0.05))
    assert len(table) == 3 - len(failures)
    assert failures and failures[0]["K"] == 400
    assert best == 1


def test_n_free_parameters_counts_distinct_entries():
    theta = np.array([[2.0, 0.5, 0.3, 0.0],
                      [0.5, 2.0, 0.0, 0.3],
                      [0.3, 0.0, 2.0, 0.5],
                      [0.0, 0.3, 0.5, 2.0]])
    m = ticc.ClusterModel(theta, np.zeros(4), 0.0, 1, 2, 2)
    # A0 upper triangle: 3 nonzero; A1: 2 nonzero; mean: 4
    assert segmenter.n_free_parameters(m) == 3 + 2 + 4


def test_extract_onsets_two_state():
    subs, events = segmenter.extract_onsets([0, 0, 1, 1, 0], 1, 2.0, {0: "normal", 1: "seizure"})
    assert subs == [(0, 0, 1), (1, 2, 3), (0, 4, 4)]
    assert [(e["type"], e["epoch"], e["time_s"]) for e in events] == [("SO", 2, 4.0), ("offset", 4, 8.0)]


def test_extract_onsets_constant_and_three_state():
    subs, events = segmenter.extract_onsets([1, 1, 1], 1, 1.0, {1: "normal"})
    assert subs == [(1, 0, 2)] and events == []
    sem = {0: "normal", 1: "seizure", 2: "preictal"}
    _, events = segmenter.extract_onsets([0, 2, 2, 1, 0], 1, 1.0, sem)
    assert [(e["type"], e["epoch"]) for e in events] == [("SPO", 1), ("seizure_start", 3), ("offset", 4)]
    with pytest.raises(InputError):
        segmenter.extract_onsets([0, 3], 1, 1.0, sem)


def test_window_attribution():
    np.testing.assert_array_equal(segmenter.window_to_epoch_labels([1, 0, 0], 3), [1, 1, 1, 0, 0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=60))
def test_run_lengths_reconstruct(labels):
    runs = segmenter.run_lengths(labels)
    rebuilt = [c for c, s, e in runs for _ in range(e - s + 1)]
    assert rebuilt == labels
    assert all(a[0] != b[0] for a, b in zip(runs, runs[1:]))
    assert all(a[2] + 1 == b[1] for a, b in zip(runs, runs[1:]))


def test_default_semantics_orders_by_mean():
    def model(mu):
        return ticc.ClusterModel(np.eye(2), np.full(2, mu), 0.0, 1, 1, 2)
    assert segmenter.default_semantics([model(0.9), model(0.1)]) == {1: "normal", 0: "seizure"}
    sem = segmenter.default_semantics([model(0.5), model(0.9), model(0.1)])
    assert sem == {2: "normal", 0: "preictal", 1: "seizure"}


def test_save_segmentation(tmp_path):
    rng = np.random.default_rng(7)
    truth = np.repeat([0, 1], 50)
    X = rng.standard_normal((100, 2)) * 0.2 + 3.0 * truth[:, None]
    seg = segmenter.em_fit(X, 2, 5.0, GlassoConfig(lam=0.05), stride_s=2.0)
    path = segmenter.save_segmentation(seg, tmp_path, 0.05, ["a", "b"])
    doc = json.loads(path.read_text())
    assert {"clusters", "subsequences", "onsets", "em", "epoch_labels"} <= set(doc)
    assert doc["onsets"][0]["time_s"] == 100.0
    for c in doc["clusters"]:
        assert (tmp_path / c["theta_file"]).exists()
        assert (tmp_path / c["theta_file"].replace(".bin", "_A0_adjacency.json")).exists()
