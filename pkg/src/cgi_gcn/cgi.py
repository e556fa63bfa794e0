"""Causal GCN inference: choose per node between the graph and the neighbor-blocked prediction.

The choice is made by an RBF-kernel SVM over seven low-dimensional factors
(Monte-Carlo uncertainty of the neighbor effect, two confidences, four
category-transition lookups), trained on nodes whose two classifications
disagree and where exactly one of them is right.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .appnp import FULL, AppnpModel, PredictionBundle, forward, forward_logits
from .errors import DatasetSparsityError, TrainingError, ValidationError
from .graph import Graph, edge_dropout_sample
from .nn import OptState, adam_step, softmax, softmax_cross_entropy
from .svm import rbf_kernel, smo_solve

log = logging.getLogger(__name__)

FACTOR_NAMES = (
    "graph_var",
    "self_conf",
    "neighbor_conf",
    "self_self",
    "neighbor_neighbor",
    "self_neighbor",
    "neighbor_self",
)


@dataclass(frozen=True)
class FactorVector:
    graph_var: float
    # confidence of the graph prediction at its own argmax
    self_conf: float
    # confidence of the neighbor-blocked prediction at its own argmax
    neighbor_conf: float
    self_self: float
    neighbor_neighbor: float
    self_neighbor: float
    neighbor_self: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in FACTOR_NAMES])


def mc_streams(master_seed: int, k: int) -> list[np.random.Generator]:
    """Independent per-sample generators derived from one seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(master_seed).spawn(k)]


def estimate_causal_uncertainty(model: AppnpModel, g: Graph, k_mc: int = 50, tau: float = 0.15,
                                master_seed: int = 0, workers: int = 1,
                                z_hat: np.ndarray | None = None):
    """Per-class population variance of predictions over ``k_mc`` edge-dropout samples.

    Returns ``(v, graph_var)`` where ``graph_var[i] = v[i, z_hat[i]]``. The blocked
    prediction is fixed per node, so this is also the variance of the causal effect.
    Sample ``k`` always uses stream ``k`` of :func:`mc_streams`, whatever ``workers`` is.
    """
    if k_mc < 2:
        raise ValidationError(f"k_mc must be >= 2, got {k_mc}")
    streams = mc_streams(master_seed, k_mc)
    x = g.features

    def sample(rng):
        a_hat = edge_dropout_sample(g, tau, rng)
        return softmax(forward_logits(model, x, a_hat))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            probs = list(pool.map(sample, streams))
    else:
        probs = [sample(r) for r in streams]
    # shifted by the first sample so identical samples give exactly zero
    d = np.stack(probs) - probs[0]
    v = np.maximum((d * d).mean(axis=0) - d.mean(axis=0) ** 2, 0.0)
    if z_hat is None:
        z_hat = np.argmax(forward(model, g, FULL), axis=1)
    return v, v[np.arange(g.n), z_hat]


def factor_matrix(bundle: PredictionBundle, graph_var: np.ndarray, t_matrix: np.ndarray) -> np.ndarray:
    """All nodes' factors as an (n, 7) array, columns in ``FACTOR_NAMES`` order."""
    n = len(bundle.z_hat)
    zh, zs = bundle.z_hat, bundle.z_self
    rows = np.arange(n)
    return np.column_stack([
        graph_var,
        bundle.y_hat[rows, zh],
        bundle.y_self[rows, zs],
        t_matrix[zh, zh],
        t_matrix[zs, zs],
        t_matrix[zh, zs],
        t_matrix[zs, zh],
    ])


def extract_factors(bundle: PredictionBundle, graph_var: np.ndarray, t_matrix: np.ndarray,
                    node: int) -> FactorVector:
    zh, zs = int(bundle.z_hat[node]), int(bundle.z_self[node])
    return FactorVector(
        graph_var=float(graph_var[node]),
        self_conf=float(bundle.y_hat[node, zh]),
        neighbor_conf=float(bundle.y_self[node, zs]),
        self_self=float(t_matrix[zh, zh]),
        neighbor_neighbor=float(t_matrix[zs, zs]),
        self_neighbor=float(t_matrix[zh, zs]),
        neighbor_self=float(t_matrix[zs, zh]),
    )


@dataclass
class ChoiceDataset:
    """Rows ``(factors[i], p[i], nodes[i])``; ``p = +1`` iff the graph prediction is correct."""

    factors: np.ndarray
    p: np.ndarray
    nodes: np.ndarray
    feature_names: tuple = FACTOR_NAMES

    def __len__(self):
        return len(self.p)

    def drop(self, names) -> "ChoiceDataset":
        keep = [i for i, k in enumerate(self.feature_names) if k not in set(names)]
        if not keep:
            raise ValidationError("cannot drop every factor")
        return ChoiceDataset(self.factors[:, keep], self.p, self.nodes,
                             tuple(self.feature_names[i] for i in keep))


def build_choice_dataset(bundle: PredictionBundle, factors: np.ndarray, true_labels: np.ndarray,
                         candidate_set, mode: str = "conflict_only") -> ChoiceDataset:
    """Select nodes where at least one classification is right.

    ``conflict_only`` additionally requires the two classifications to differ;
    ``literal`` keeps agreeing nodes too.
    """
    idx = np.asarray(candidate_set, dtype=np.int64)
    z = true_labels[idx]
    if (z < 0).any():
        raise ValidationError("candidate set contains unlabeled nodes")
    zh, zs = bundle.z_hat[idx], bundle.z_self[idx]
    keep = (zh == z) | (zs == z)
    if mode == "conflict_only":
        keep &= zh != zs
    elif mode != "literal":
        raise ValidationError(f"unknown dataset mode {mode!r}")
    if not keep.any():
        raise DatasetSparsityError("no node qualifies for the choice dataset; fall back to the graph prediction")
    sel = idx[keep]
    return ChoiceDataset(factors[sel], np.where(zh[keep] == z[keep], 1, -1), sel)


@dataclass
class ChoiceModel:
    support_vectors: np.ndarray
    dual_coefs: np.ndarray
    bias: float
    gamma: float
    c_penalty: float
    mean: np.ndarray
    scale: np.ndarray
    feature_names: tuple = FACTOR_NAMES
    cv_table: list = field(default_factory=list)

    def decision_function(self, factors: np.ndarray) -> np.ndarray:
        x = (np.atleast_2d(factors) - self.mean) / self.scale
        return rbf_kernel(x, self.support_vectors, self.gamma) @ self.dual_coefs + self.bias

    def to_dict(self) -> dict:
        return {
            "format": "cgi-gcn-choice-model",
            "version": 1,
            "feature_names": list(self.feature_names),
            "standardization": {"mean": self.mean.tolist(), "scale": self.scale.tolist()},
            "support_vectors": self.support_vectors.tolist(),
            "dual_coefs": self.dual_coefs.tolist(),
            "bias": self.bias,
            "c": self.c_penalty,
            "gamma": self.gamma,
            "cv_table": self.cv_table,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChoiceModel":
        if d.get("format") != "cgi-gcn-choice-model":
            raise ValidationError("not a choice-model checkpoint")
        n_feat = len(d["feature_names"])
        return cls(
            support_vectors=np.asarray(d["support_vectors"], dtype=np.float64).reshape(-1, n_feat),
            dual_coefs=np.asarray(d["dual_coefs"], dtype=np.float64),
            bias=float(d["bias"]),
            gamma=float(d["gamma"]),
            c_penalty=float(d["c"]),
            mean=np.asarray(d["standardization"]["mean"]),
            scale=np.asarray(d["standardization"]["scale"]),
            feature_names=tuple(d["feature_names"]),
            cv_table=d.get("cv_table", []),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "ChoiceModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def choice_decision(model: ChoiceModel, factors) -> float:
    if isinstance(factors, FactorVector):
        factors = factors.as_array()
    return float(model.decision_function(np.asarray(factors, dtype=np.float64))[0])


def _fit_svm(x: np.ndarray, p: np.ndarray, c: float, gamma: float, tol: float, max_iter: int):
    K = rbf_kernel(x, x, gamma)
    res = smo_solve(K, p, c, tol=tol, max_iter=max_iter)
    sv = res.alpha > 0
    return x[sv], res.alpha[sv] * p[sv], res.bias


def stratified_folds(p: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Fold id per row, each class dealt round-robin after a seeded shuffle."""
    fold = np.empty(len(p), dtype=np.int64)
    for cls in (-1, 1):
        idx = np.flatnonzero(p == cls)
        idx = idx[rng.permutation(len(idx))]
        fold[idx] = np.arange(len(idx)) % k
    return fold


def train_choice_model(data: ChoiceDataset, c_grid=(0.1, 1.0, 10.0, 100.0),
                       gamma_grid=(0.01, 0.1, 1.0, 10.0), folds: int = 5, seed: int = 0,
                       tol: float = 1e-3, max_iter: int = 100_000) -> ChoiceModel:
    """Grid-search (C, gamma) by stratified k-fold accuracy, then refit on all rows.

    Ties prefer smaller C, then smaller gamma. Factors are standardized with the
    statistics of ``data``. With fewer than two rows in the minority class the grid
    is ranked by training accuracy instead.
    """
    p = np.asarray(data.p, dtype=np.float64)
    counts = [(p == -1).sum(), (p == 1).sum()]
    if min(counts) == 0:
        raise TrainingError("choice dataset has a single class")
    mean = data.factors.mean(axis=0)
    scale = data.factors.std(axis=0)
    scale = np.where(scale > 1e-12, scale, 1.0)
    x = (data.factors - mean) / scale
    k = min(folds, int(min(counts)))
    fold = stratified_folds(p, k, np.random.default_rng(seed)) if k >= 2 else None

    table, best = [], None
    for c in sorted(c_grid):
        for gamma in sorted(gamma_grid):
            if fold is None:
                sv, coef, b = _fit_svm(x, p, c, gamma, tol, max_iter)
                pred = rbf_kernel(x, sv, gamma) @ coef + b
                acc = float(np.mean(np.where(pred >= 0, 1, -1) == p))
            else:
                correct = 0
                for f in range(k):
                    tr, te = fold != f, fold == f
                    sv, coef, b = _fit_svm(x[tr], p[tr], c, gamma, tol, max_iter)
                    pred = rbf_kernel(x[te], sv, gamma) @ coef + b
                    correct += int(np.sum(np.where(pred >= 0, 1, -1) == p[te]))
                acc = correct / len(p)
            table.append({"c": c, "gamma": gamma, "accuracy": acc})
            if best is None or acc > best[0]:
                best = (acc, c, gamma)
    _, c, gamma = best
    sv, coef, b = _fit_svm(x, p, c, gamma, tol, max_iter)
    log.info("choice model: C=%g gamma=%g cv-acc=%.4f, %d/%d support vectors",
             c, gamma, best[0], len(sv), len(p))
    return ChoiceModel(sv, coef, float(b), gamma, c, mean, scale, tuple(data.feature_names), table)


def cgi_predict(bundle: PredictionBundle, factors: np.ndarray, model: ChoiceModel | None,
                t: float = 0.0) -> np.ndarray:
    """Keep ``z_hat`` where the decision value is >= t, else take ``z_self``.

    Nodes whose two classifications agree never consult the model. ``model=None``
    (too little choice data) returns ``z_hat`` unchanged.
    """
    out = bundle.z_hat.copy()
    conflict = np.flatnonzero(bundle.conflict)
    if model is None or len(conflict) == 0:
        return out
    cols = [FACTOR_NAMES.index(k) for k in model.feature_names]
    p_hat = model.decision_function(factors[np.ix_(conflict, cols)])
    out[conflict] = np.where(p_hat >= t, bundle.z_hat[conflict], bundle.z_self[conflict])
    return out


def ensemble_predict(bundle: PredictionBundle) -> np.ndarray:
    return np.argmax((bundle.y_hat + bundle.y_self) / 2.0, axis=1)


@dataclass
class LWayModel:
    """Linear softmax head over ``[y_hat, y_self, effect]``."""

    w: np.ndarray
    b: np.ndarray

    def predict_proba(self, inputs: np.ndarray) -> np.ndarray:
        return softmax(inputs @ self.w + self.b)


def lway_inputs(bundle: PredictionBundle) -> np.ndarray:
    return np.hstack([bundle.y_hat, bundle.y_self, bundle.effect])


def lway_loss_and_grad(omega: dict, inputs: np.ndarray, labels: np.ndarray, idx, reg_alpha: float):
    logits = inputs @ omega["w"] + omega["b"]
    ce, d = softmax_cross_entropy(logits, labels, idx)
    loss = ce + reg_alpha * (np.sum(omega["w"] ** 2) + np.sum(omega["b"] ** 2))
    grads = {
        "w": inputs.T @ d + 2.0 * reg_alpha * omega["w"],
        "b": d.sum(axis=0) + 2.0 * reg_alpha * omega["b"],
    }
    return float(loss), grads


def lway_baseline(bundle: PredictionBundle, true_labels: np.ndarray, train_set, reg_alpha: float = 5e-4,
                  epochs: int = 300, lr: float = 0.01):
    """Fit the L-way head on ``train_set`` with Adam; returns ``(model, predicted classes)``."""
    inputs = lway_inputs(bundle)
    L = bundle.y_hat.shape[1]
    omega = {"w": np.zeros((3 * L, L)), "b": np.zeros(L)}
    state = OptState.for_params(omega)
    for epoch in range(epochs):
        loss, grads = lway_loss_and_grad(omega, inputs, true_labels, train_set, reg_alpha)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite L-way loss at epoch {epoch}")
        omega, state = adam_step(omega, grads, state, lr=lr)
    model = LWayModel(omega["w"], omega["b"])
    return model, np.argmax(inputs @ model.w + model.b, axis=1)


__all__ = [
    "FACTOR_NAMES", "FactorVector", "ChoiceDataset", "ChoiceModel", "LWayModel",
    "estimate_causal_uncertainty", "factor_matrix", "extract_factors", "build_choice_dataset",
    "train_choice_model", "choice_decision", "cgi_predict", "ensemble_predict", "lway_baseline",
    "lway_loss_and_grad", "lway_inputs", "mc_streams", "stratified_folds",
]
