import numpy as np
import pytest

from cgi_gcn.appnp import FULL, AppnpModel, PredictionBundle, forward, predict_bundle
from cgi_gcn.cgi import (
    FACTOR_NAMES, ChoiceDataset, ChoiceModel, build_choice_dataset, cgi_predict, choice_decision,
    ensemble_predict, estimate_causal_uncertainty, extract_factors, factor_matrix, lway_baseline,
    lway_inputs, lway_loss_and_grad, mc_streams, stratified_folds, train_choice_model,
)
from cgi_gcn.errors import DatasetSparsityError, TrainingError, ValidationError
from cgi_gcn.graph import Graph
from cgi_gcn.nn import MlpParams, finite_difference_check, mlp_forward

from oracles import replay_uncertainty


def small_setup(n=25, seed=0, p=0.2):
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, 1)
    hit = rng.random(len(iu)) < p
    labels = rng.integers(0, 3, n)
    g = Graph.from_edges(np.stack([iu[hit], ju[hit]], 1), rng.normal(size=(n, 4)), labels, 3)
    model = AppnpModel(MlpParams.init(4, 6, 3, rng), 0.1, 10, 0.5)
    return g, model


def bundle_of(y_hat, y_self):
    return PredictionBundle.from_predictions(np.asarray(y_hat, float), np.asarray(y_self, float))


class TestUncertainty:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_dense_replay(self, seed):
        g, model = small_setup(seed=seed)
        v, gv = estimate_causal_uncertainty(model, g, k_mc=20, tau=0.3, master_seed=seed + 10)
        _, logits, _ = mlp_forward(model.mlp, g.features)
        z_hat = np.argmax(forward(model, g, FULL), axis=1)
        edges = [tuple(e) for e in g.edge_list().tolist()]
        rv, rgv = replay_uncertainty(logits, edges, 0.1, 10, 0.3, seed + 10, 20, z_hat)
        np.testing.assert_allclose(v, rv, atol=1e-12, rtol=0)
        np.testing.assert_allclose(gv, rgv, atol=1e-12, rtol=0)

    def test_tau_zero_gives_zero_variance(self):
        g, model = small_setup()
        v, gv = estimate_causal_uncertainty(model, g, k_mc=10, tau=0.0, master_seed=3)
        np.testing.assert_array_equal(v, 0.0)
        np.testing.assert_array_equal(gv, 0.0)

    def test_workers_do_not_change_result(self):
        g, model = small_setup()
        a = estimate_causal_uncertainty(model, g, k_mc=12, master_seed=5, workers=1)[0]
        b = estimate_causal_uncertainty(model, g, k_mc=12, master_seed=5, workers=4)[0]
        np.testing.assert_array_equal(a, b)

    def test_streams_independent_of_count(self):
        a = [r.random() for r in mc_streams(7, 3)]
        b = [r.random() for r in mc_streams(7, 5)][:3]
        assert a == b

    def test_kmc_too_small(self):
        g, model = small_setup()
        with pytest.raises(ValidationError):
            estimate_causal_uncertainty(model, g, k_mc=1)


class TestFactors:
    def setup_method(self):
        self.bundle = bundle_of([[0.7, 0.2, 0.1], [0.1, 0.1, 0.8]], [[0.3, 0.6, 0.1], [0.2, 0.1, 0.7]])
        self.t = np.array([[0.6, 0.3, 0.1], [0.2, 0.7, 0.1], [0.25, 0.25, 0.5]])
        self.gv = np.array([0.01, 0.002])

    def test_hand_example(self):
        f = extract_factors(self.bundle, self.gv, self.t, 0)
        np.testing.assert_allclose(f.as_array(), [0.01, 0.7, 0.6, 0.6, 0.7, 0.3, 0.2])

    def test_agreeing_node_uses_diagonal(self):
        f = extract_factors(self.bundle, self.gv, self.t, 1)
        assert f.self_self == f.neighbor_neighbor == f.self_neighbor == f.neighbor_self == 0.5

    def test_matrix_matches_per_node(self):
        m = factor_matrix(self.bundle, self.gv, self.t)
        assert m.shape == (2, len(FACTOR_NAMES))
        for i in range(2):
            np.testing.assert_array_equal(m[i], extract_factors(self.bundle, self.gv, self.t, i).as_array())


class TestChoiceDataset:
    def setup_method(self):
        # node: 0 graph right, 1 self right, 2 both wrong, 3 agree right, 4 agree wrong
        self.bundle = bundle_of(
            [[0.8, 0.1, 0.1], [0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.8, 0.1, 0.1], [0.8, 0.1, 0.1]],
            [[0.1, 0.8, 0.1], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8], [0.8, 0.1, 0.1], [0.8, 0.1, 0.1]],
        )
        self.labels = np.array([0, 1, 0, 0, 1])
        self.factors = np.arange(35.0).reshape(5, 7)

    def test_conflict_only(self):
        d = build_choice_dataset(self.bundle, self.factors, self.labels, range(5))
        assert d.nodes.tolist() == [0, 1] and d.p.tolist() == [1, -1]
        np.testing.assert_array_equal(d.factors, self.factors[[0, 1]])

    def test_literal(self):
        d = build_choice_dataset(self.bundle, self.factors, self.labels, range(5), mode="literal")
        assert d.nodes.tolist() == [0, 1, 3] and d.p.tolist() == [1, -1, 1]

    def test_empty_raises(self):
        with pytest.raises(DatasetSparsityError):
            build_choice_dataset(self.bundle, self.factors, self.labels, [2, 4])

    def test_unlabeled_rejected(self):
        with pytest.raises(ValidationError):
            build_choice_dataset(self.bundle, self.factors, np.array([0, -1, 0, 0, 1]), range(5))

    def test_drop(self):
        d = build_choice_dataset(self.bundle, self.factors, self.labels, range(5)).drop(["graph_var"])
        assert d.factors.shape == (2, 6) and "graph_var" not in d.feature_names


def separable_choice_data(n=60, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 7))
    p = np.where(x[:, 0] + 0.5 * x[:, 2] > 0, 1, -1)
    return ChoiceDataset(x, p, np.arange(n))


class TestChoiceModel:
    def test_learns_linear_rule(self):
        data = separable_choice_data()
        m = train_choice_model(data, seed=0)
        test = separable_choice_data(200, seed=1)
        pred = np.where(m.decision_function(test.factors) >= 0, 1, -1)
        assert np.mean(pred == test.p) > 0.85
        assert len(m.cv_table) == 16

    def test_tie_break_prefers_small_c_then_gamma(self):
        data = separable_choice_data()
        m = train_choice_model(data, c_grid=(10.0, 1.0), gamma_grid=(1e-9, 2e-9), seed=0)
        accs = {(r["c"], r["gamma"]): r["accuracy"] for r in m.cv_table}
        best = max(accs.values())
        first = min(k for k, a in accs.items() if a == best)
        assert (m.c_penalty, m.gamma) == first

    def test_deterministic(self):
        data = separable_choice_data()
        a, b = train_choice_model(data, seed=3), train_choice_model(data, seed=3)
        assert a.to_dict() == b.to_dict()

    def test_single_class_rejected(self):
        d = ChoiceDataset(np.zeros((4, 7)), np.ones(4, int), np.arange(4))
        with pytest.raises(TrainingError):
            train_choice_model(d)

    def test_one_minority_row_falls_back_to_training_accuracy(self):
        x = np.random.default_rng(0).normal(size=(6, 7))
        m = train_choice_model(ChoiceDataset(x, np.array([1, 1, 1, 1, 1, -1]), np.arange(6)))
        assert len(m.cv_table) == 16

    def test_stratified_folds_balanced(self):
        p = np.array([1] * 10 + [-1] * 5)
        f = stratified_folds(p, 5, np.random.default_rng(0))
        for k in range(5):
            assert (p[f == k] == 1).sum() == 2 and (p[f == k] == -1).sum() == 1

    def test_save_load(self, tmp_path):
        m = train_choice_model(separable_choice_data(), seed=0)
        m.save(tmp_path / "cm.json")
        m2 = ChoiceModel.load(tmp_path / "cm.json")
        x = np.random.default_rng(5).normal(size=(10, 7))
        np.testing.assert_array_equal(m.decision_function(x), m2.decision_function(x))
        assert choice_decision(m, x[0]) == m.decision_function(x[:1])[0]


def constant_model(value, names=FACTOR_NAMES):
    k = len(names)
    return ChoiceModel(np.zeros((1, k)), np.zeros(1), value, 1.0, 1.0, np.zeros(k), np.ones(k), tuple(names))


class TestCgiPredict:
    def setup_method(self):
        self.bundle = bundle_of([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]], [[0.1, 0.9], [0.3, 0.7], [0.3, 0.7]])
        self.factors = np.zeros((3, 7))

    def test_positive_keeps_graph(self):
        assert cgi_predict(self.bundle, self.factors, constant_model(1.0)).tolist() == [0, 1, 0]

    def test_negative_takes_self(self):
        assert cgi_predict(self.bundle, self.factors, constant_model(-1.0)).tolist() == [1, 1, 1]

    def test_boundary_keeps_graph(self):
        assert cgi_predict(self.bundle, self.factors, constant_model(0.0)).tolist() == [0, 1, 0]

    def test_no_model_returns_graph(self):
        assert cgi_predict(self.bundle, self.factors, None).tolist() == [0, 1, 0]

    def test_reduced_feature_model(self):
        m = constant_model(-1.0, FACTOR_NAMES[1:])
        assert cgi_predict(self.bundle, self.factors, m).tolist() == [1, 1, 1]

    def test_ensemble(self):
        assert ensemble_predict(self.bundle).tolist() == [0, 1, 1]


class TestLWay:
    def test_gradient(self):
        rng = np.random.default_rng(0)
        b = bundle_of(rng.dirichlet(np.ones(3), 12), rng.dirichlet(np.ones(3), 12))
        x = lway_inputs(b)
        assert x.shape == (12, 9)
        labels = rng.integers(0, 3, 12)
        omega = {"w": rng.normal(size=(9, 3)), "b": rng.normal(size=3)}
        _, g = lway_loss_and_grad(omega, x, labels, range(8), 0.01)
        err = finite_difference_check(lambda o: lway_loss_and_grad(o, x, labels, range(8), 0.01)[0], omega, g)
        assert err < 1e-6

    def test_learns_to_trust_self(self):
        rng = np.random.default_rng(1)
        labels = rng.integers(0, 3, 100)
        y_self = np.full((100, 3), 0.1)
        y_self[np.arange(100), labels] = 0.8
        b = bundle_of(rng.dirichlet(np.ones(3), 100), y_self)
        _, pred = lway_baseline(b, labels, range(100), epochs=300, lr=0.05)
        assert np.mean(pred == labels) == 1.0


def test_bundle_on_trained_like_model_is_consistent():
    g, model = small_setup()
    b = predict_bundle(model, g)
    assert set(cgi_predict(b, np.zeros((g.n, 7)), constant_model(-1.0)).tolist()) <= set(range(3))
