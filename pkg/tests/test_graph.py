import json
import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cgi_gcn.errors import GenerationError, GraphFormatError, ValidationError
from cgi_gcn.graph import (
    Graph, compute_transition_matrix, edge_dropout_sample, inject_cross_category_edges,
    load_graph, normalize_adjacency, round_half_away, save_graph,
)


def make_graph(edges, n, labels=None, L=None, **splits):
    labels = np.zeros(n, dtype=int) if labels is None else np.asarray(labels)
    return Graph.from_edges(edges, np.zeros((n, 2)), labels, num_classes=L, **splits)


def random_graph(n, p, seed, L=3):
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, 1)
    hit = rng.random(len(iu)) < p
    return make_graph(np.stack([iu[hit], ju[hit]], 1), n, rng.integers(0, L, n), L)


def write_files(tmp_path, edges="0 1\n1 2\n", features="1,0\n0,1\n1,1\n", labels="0\n1\n-1\n",
                splits=None):
    splits = splits or {"train": [0], "valid": [1], "test": [2]}
    (tmp_path / "e.txt").write_text(edges)
    (tmp_path / "f.csv").write_text(features)
    (tmp_path / "l.txt").write_text(labels)
    (tmp_path / "s.json").write_text(json.dumps(splits))
    return [tmp_path / x for x in ("e.txt", "f.csv", "l.txt", "s.json")]


def power_iteration_radius(m, iters=500, seed=0):
    v = np.random.default_rng(seed).normal(size=m.shape[0])
    lam = 0.0
    for _ in range(iters):
        w = m @ v
        lam = np.linalg.norm(w)
        if lam == 0:
            return 0.0
        v = w / lam
    return lam


class TestLoadGraph:
    def test_edges_stored_both_directions(self, tmp_path):
        g = load_graph(*write_files(tmp_path))
        coo = g.adjacency.tocoo()
        assert set(zip(coo.row.tolist(), coo.col.tolist())) == {(0, 1), (1, 0), (1, 2), (2, 1)}
        assert g.num_classes == 2
        assert g.labels.tolist() == [0, 1, -1]

    def test_self_loop_dropped_with_warning(self, tmp_path, caplog):
        with caplog.at_level(logging.WARNING):
            g = load_graph(*write_files(tmp_path, edges="0 0\n0 1\n"))
        assert g.num_edges == 1
        assert "dropped 1 " in caplog.text

    def test_duplicates_deduplicated(self, tmp_path):
        g = load_graph(*write_files(tmp_path, edges="0 1\n1 0\n0 1\n"))
        assert g.adjacency.nnz == 2

    def test_label_count_mismatch(self, tmp_path):
        with pytest.raises(ValidationError):
            load_graph(*write_files(tmp_path, labels="0\n1\n0\n1\n"))

    def test_malformed_edge_line_names_file_and_line(self, tmp_path):
        with pytest.raises(GraphFormatError, match=r"e\.txt:2"):
            load_graph(*write_files(tmp_path, edges="0 1\n1 x\n"))

    def test_malformed_feature_row(self, tmp_path):
        with pytest.raises(GraphFormatError, match=r"f\.csv:2"):
            load_graph(*write_files(tmp_path, features="1,0\n0\n1,1\n"))

    def test_label_out_of_range(self, tmp_path):
        with pytest.raises(ValidationError):
            load_graph(*write_files(tmp_path, labels="0\n-2\n1\n"))
        with pytest.raises(ValidationError):
            load_graph(*write_files(tmp_path, labels="0\n5\n1\n"), num_classes=2)

    def test_split_index_out_of_range(self, tmp_path):
        with pytest.raises(ValidationError):
            load_graph(*write_files(tmp_path, splits={"train": [0], "valid": [1], "test": [7]}))

    def test_unlabeled_training_node_rejected(self, tmp_path):
        with pytest.raises(ValidationError):
            load_graph(*write_files(tmp_path, splits={"train": [2], "valid": [], "test": []}))

    def test_overlapping_splits_rejected(self, tmp_path):
        with pytest.raises(ValidationError):
            load_graph(*write_files(tmp_path, splits={"train": [0], "valid": [0], "test": []}))

    def test_round_trip(self, tmp_path):
        g = random_graph(20, 0.2, 1)
        g = Graph.from_edges(g.edge_list(), np.arange(40.0).reshape(20, 2) / 7, g.labels, 3,
                             train=[0, 1], valid=[2], test=[3, 4])
        p = save_graph(g, tmp_path)
        h = load_graph(p["edges"], p["features"], p["labels"], p["splits"], num_classes=3)
        assert (h.adjacency != g.adjacency).nnz == 0
        np.testing.assert_array_equal(h.features, g.features)
        np.testing.assert_array_equal(h.test, g.test)


class TestNormalize:
    def test_single_node(self):
        a = normalize_adjacency(make_graph([], 1)).matrix.toarray()
        np.testing.assert_array_equal(a, [[1.0]])

    def test_two_nodes(self):
        a = normalize_adjacency(make_graph([(0, 1)], 2)).matrix.toarray()
        np.testing.assert_allclose(a, [[0.5, 0.5], [0.5, 0.5]], atol=1e-15)

    def test_path_graph(self):
        a = normalize_adjacency(make_graph([(0, 1), (1, 2)], 3)).matrix.toarray()
        assert a[1, 1] == pytest.approx(1 / 3, abs=1e-15)
        assert a[0, 1] == pytest.approx(1 / math.sqrt(6), abs=1e-15)

    def test_isolated_node_diagonal_one(self):
        a = normalize_adjacency(make_graph([(0, 1)], 3)).matrix.toarray()
        assert a[2, 2] == 1.0

    @settings(max_examples=100, deadline=None)
    @given(n=st.integers(1, 50), p=st.floats(0.0, 0.6), seed=st.integers(0, 10_000))
    def test_symmetric_and_spectral_radius(self, n, p, seed):
        a = normalize_adjacency(random_graph(n, p, seed)).matrix
        assert (abs(a - a.T) > 0).nnz == 0
        assert a.data.min() >= 0
        assert (a.diagonal() > 0).all()
        assert power_iteration_radius(a.toarray()) <= 1 + 1e-9


class TestEdgeDropout:
    def test_tau_zero_is_normalize(self):
        g = random_graph(30, 0.2, 3)
        a = edge_dropout_sample(g, 0.0, np.random.default_rng(0)).matrix
        b = normalize_adjacency(g).matrix
        np.testing.assert_array_equal(a.indptr, b.indptr)
        np.testing.assert_array_equal(a.indices, b.indices)
        np.testing.assert_array_equal(a.data, b.data)

    def test_deterministic_given_stream(self):
        g = random_graph(30, 0.2, 4)
        a = edge_dropout_sample(g, 0.15, np.random.default_rng(9)).matrix
        b = edge_dropout_sample(g, 0.15, np.random.default_rng(9)).matrix
        assert (a != b).nnz == 0

    def test_edges_removed_in_pairs_and_renormalized(self):
        g = random_graph(30, 0.3, 5)
        a = edge_dropout_sample(g, 0.5, np.random.default_rng(2)).matrix
        assert (abs(a - a.T) > 0).nnz == 0
        assert a.nnz < normalize_adjacency(g).matrix.nnz
        assert (a.diagonal() > 0).all()

    def test_bernoulli_survival_rate(self):
        # 3-sigma bound for Binomial(10000, 0.5) is 150
        g = make_graph([(0, 1)], 2)
        rng = np.random.default_rng(123)
        survived = sum(edge_dropout_sample(g, 0.5, rng).matrix.nnz == 4 for _ in range(10_000))
        assert abs(survived - 5000) <= 150


class TestTransitionMatrix:
    def test_hand_example(self):
        g = make_graph([(0, 1), (1, 2)], 3, [0, 0, 1], 2)
        np.testing.assert_allclose(compute_transition_matrix(g, [0, 1, 2]), [[0.5, 0.5], [1.0, 0.0]])

    def test_intra_only_identity(self):
        g = make_graph([(0, 1), (2, 3)], 4, [0, 0, 1, 1], 2)
        np.testing.assert_array_equal(compute_transition_matrix(g, range(4)), np.eye(2))

    def test_empty_category_uniform(self):
        g = make_graph([(0, 1)], 3, [0, 0, 2], 3)
        t = compute_transition_matrix(g, range(3))
        np.testing.assert_allclose(t[1], [1 / 3] * 3)
        np.testing.assert_allclose(t[2], [1 / 3] * 3)

    def test_only_labeled_edges_count(self):
        g = make_graph([(0, 1), (1, 2)], 3, [0, 0, 1], 2)
        np.testing.assert_allclose(compute_transition_matrix(g, [0, 1]), [[1.0, 0.0], [0.5, 0.5]])

    def test_unlabeled_rejected(self):
        g = make_graph([(0, 1)], 2, [0, -1], 2)
        with pytest.raises(ValidationError):
            compute_transition_matrix(g, [0, 1])

    @settings(max_examples=50, deadline=None)
    @given(n=st.integers(2, 40), p=st.floats(0.0, 0.5), seed=st.integers(0, 10_000))
    def test_rows_stochastic(self, n, p, seed):
        g = random_graph(n, p, seed, L=4)
        t = compute_transition_matrix(g, range(n))
        np.testing.assert_allclose(t.sum(1), 1.0, atol=1e-9)
        assert t.min() >= 0 and t.max() <= 1


class TestInjection:
    def base(self, seed=0, n=200, L=4):
        return random_graph(n, 0.05, seed, L)

    def test_rounding(self):
        assert round_half_away(2.5) == 3
        assert round_half_away(0.5) == 1
        assert round_half_away(-2.5) == -3
        assert round_half_away(10.0) == 10

    def test_exact_count_for_100_edges(self):
        rng = np.random.default_rng(0)
        iu, ju = np.triu_indices(60, 1)
        pick = rng.choice(len(iu), 100, replace=False)
        g = make_graph(np.stack([iu[pick], ju[pick]], 1), 60, rng.integers(0, 3, 60), 3)
        assert g.num_edges == 100
        h = inject_cross_category_edges(g, 0.10, 0.5, seed=1)
        assert h.num_edges == 110

    @pytest.mark.parametrize("ratio", [0.1, 0.3, 0.5])
    def test_added_edges_cross_and_restricted(self, ratio):
        g = self.base()
        h = inject_cross_category_edges(g, ratio, 0.5, seed=7)
        assert h.num_edges == g.num_edges + round_half_away(ratio * g.num_edges)
        old = {tuple(e) for e in g.edge_list().tolist()}
        new = [tuple(e) for e in h.edge_list().tolist() if tuple(e) not in old]
        assert len(new) == h.num_edges - g.num_edges
        rng = np.random.default_rng(7)
        selected = set(rng.choice(g.n, size=round_half_away(0.5 * g.n), replace=False).tolist())
        for u, v in new:
            assert g.labels[u] != g.labels[v]
            assert u in selected and v in selected
        assert old <= {tuple(e) for e in h.edge_list().tolist()}
        np.testing.assert_array_equal(h.features, g.features)
        np.testing.assert_array_equal(h.labels, g.labels)

    def test_one_endpoint_mode(self):
        g = self.base(1)
        h = inject_cross_category_edges(g, 0.5, 0.1, seed=3, both_endpoints=False)
        assert h.num_edges == g.num_edges + round_half_away(0.5 * g.num_edges)

    def test_single_category_fails(self):
        g = make_graph([(0, 1), (1, 2), (2, 3)], 10, np.zeros(10, int), 1)
        with pytest.raises(GenerationError, match="shortfall"):
            inject_cross_category_edges(g, 0.5, 0.5, seed=0)

    def test_deterministic(self):
        g = self.base(2)
        a = inject_cross_category_edges(g, 0.3, 0.5, seed=11)
        b = inject_cross_category_edges(g, 0.3, 0.5, seed=11)
        assert (a.adjacency != b.adjacency).nnz == 0
