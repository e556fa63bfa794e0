"""APPNP: an MLP followed by personalized-PageRank propagation of its logits.

Besides the usual full-graph inference this module provides the neighbor-blocked
("self") prediction, where every node is treated as if it had no neighbors, and
a sampled mode that propagates over a random edge-dropout subgraph.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .errors import NumericalError, TrainingError, ValidationError
from .graph import Graph, NormalizedAdjacency, edge_dropout_sample, normalize_adjacency
from .nn import (
    MlpParams, OptState, adam_step, l2_penalty, load_params, mlp_backward, mlp_forward,
    save_params, softmax, softmax_cross_entropy,
)

log = logging.getLogger(__name__)

FULL, SELF, SAMPLED = "full", "self", "sampled"


@dataclass
class AppnpModel:
    mlp: MlpParams
    alpha: float = 0.1
    k_prop: int = 10
    dropout: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValidationError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.k_prop < 1:
            raise ValidationError(f"k_prop must be >= 1, got {self.k_prop}")


@dataclass
class PredictionBundle:
    """Original and neighbor-blocked predictions for every node.

    ``effect`` is ``y_hat - y_self``; ``z_hat``/``z_self`` are argmax classes with
    ties going to the smallest index.
    """

    y_hat: np.ndarray
    y_self: np.ndarray
    effect: np.ndarray
    z_hat: np.ndarray
    z_self: np.ndarray

    @classmethod
    def from_predictions(cls, y_hat, y_self) -> "PredictionBundle":
        return cls(y_hat, y_self, y_hat - y_self, np.argmax(y_hat, axis=1), np.argmax(y_self, axis=1))

    @property
    def conflict(self) -> np.ndarray:
        return self.z_hat != self.z_self


@dataclass
class TrainResult:
    model: AppnpModel
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0


def propagate(h: np.ndarray, a_hat, alpha: float, k: int) -> np.ndarray:
    """k steps of ``z <- (1 - alpha) * A_hat @ z + alpha * h`` starting from ``z = h``."""
    z = h
    for _ in range(k):
        z = (1.0 - alpha) * (a_hat @ z) + alpha * h
    return z


def _adjacency_for(g: Graph, mode: str, tau: float | None, rng) -> NormalizedAdjacency | None:
    if mode == FULL:
        return normalize_adjacency(g)
    if mode == SELF:
        return None
    if mode == SAMPLED:
        if tau is None or rng is None:
            raise ValidationError("sampled mode needs tau and an rng")
        return edge_dropout_sample(g, tau, rng)
    raise ValidationError(f"unknown inference mode {mode!r}")


def forward_logits(model: AppnpModel, x: np.ndarray, a_hat: NormalizedAdjacency | None,
                   train: bool = False, rng=None) -> np.ndarray:
    """Propagated logits; ``a_hat=None`` means the neighbor-blocked (identity) case."""
    _, logits, _ = mlp_forward(model.mlp, x, model.dropout, train=train, rng=rng)
    if a_hat is None:
        # identity adjacency is a fixed point of the propagation
        return logits
    return propagate(logits, a_hat, model.alpha, model.k_prop)


def forward(model: AppnpModel, g: Graph, mode: str = FULL, tau: float | None = None,
            rng: np.random.Generator | None = None, train: bool = False,
            a_hat: NormalizedAdjacency | None = None) -> np.ndarray:
    """Class probabilities under ``mode`` in {"full", "self", "sampled"}.

    ``a_hat`` may be passed to reuse a precomputed normalization in full mode.
    """
    if a_hat is None or mode != FULL:
        a_hat = _adjacency_for(g, mode, tau, rng)
    return softmax(forward_logits(model, g.features, a_hat, train=train, rng=rng))


def predict_bundle(model: AppnpModel, g: Graph) -> PredictionBundle:
    return PredictionBundle.from_predictions(forward(model, g, FULL), forward(model, g, SELF))


def appnp_loss_and_grad(params: MlpParams, x, labels, index_set, a_hat, alpha, k,
                        l2_lambda=0.0, l2_blocks=("w1",), dropout=0.0, rng=None):
    """Training objective and its gradient for one full-batch step."""
    _, logits, cache = mlp_forward(params, x, dropout, train=dropout > 0, rng=rng)
    z = propagate(logits, a_hat, alpha, k) if a_hat is not None else logits
    ce, dz = softmax_cross_entropy(z, labels, index_set)
    # the propagation operator is a polynomial in the symmetric A_hat, hence self-adjoint
    dlogits = propagate(dz, a_hat, alpha, k) if a_hat is not None else dz
    grads = mlp_backward(params, cache, dlogits, l2_lambda, l2_blocks)
    return ce + l2_penalty(params, l2_lambda, l2_blocks), ce, grads


def train(g: Graph, config: RunConfig, alpha: float | None = None) -> TrainResult:
    """Full-batch Adam on the train split with early stopping on validation loss.

    The returned model holds the parameters from the epoch with the lowest
    validation loss. Each history entry has ``epoch``, ``train_loss`` (cross-entropy
    with dropout) and ``val_loss``.
    """
    if len(g.train) == 0:
        raise TrainingError("empty train split")
    alpha = config.alpha if alpha is None else alpha
    rng = np.random.default_rng(config.seed)
    params = MlpParams.init(g.features.shape[1], config.hidden, g.num_classes, rng)
    state = OptState.for_params(params)
    fit_graph = g.without_node_edges(g.test) if config.setting == "inductive" else g
    a_hat = normalize_adjacency(fit_graph)
    monitor = g.valid if len(g.valid) else g.train
    x = g.features

    best_loss, best_params, best_epoch, since = np.inf, params.copy(), 0, 0
    history = []
    for epoch in range(config.epochs):
        total, ce, grads = appnp_loss_and_grad(
            params, x, g.labels, g.train, a_hat, alpha, config.k_prop,
            config.l2_lambda, tuple(config.l2_blocks), config.dropout, rng,
        )
        if not np.isfinite(total):
            raise TrainingError(f"non-finite training loss at epoch {epoch}")
        try:
            params, state = adam_step(params, grads, state, lr=config.lr)
        except NumericalError as exc:
            raise TrainingError(f"epoch {epoch}: {exc}") from exc
        z = forward_logits(AppnpModel(params, alpha, config.k_prop, config.dropout), x, a_hat)
        val_loss, _ = softmax_cross_entropy(z, g.labels, monitor)
        if not np.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        history.append({"epoch": epoch, "train_loss": ce, "val_loss": val_loss})
        if val_loss < best_loss:
            best_loss, best_params, best_epoch, since = val_loss, params.copy(), epoch, 0
        else:
            since += 1
            if since >= config.patience:
                break
    log.info("trained APPNP (alpha=%g): best epoch %d, val loss %.4f, %d epochs run",
             alpha, best_epoch, best_loss, len(history))
    return TrainResult(AppnpModel(best_params, alpha, config.k_prop, config.dropout), history, best_epoch)


def accuracy(pred: np.ndarray, labels: np.ndarray, idx) -> float:
    idx = np.asarray(idx, dtype=np.int64)
    if len(idx) == 0:
        return float("nan")
    return float(np.mean(pred[idx] == labels[idx]))


def train_with_alpha_grid(g: Graph, config: RunConfig) -> TrainResult:
    """Train once per teleport weight in ``config.alpha_grid``; keep the best on validation accuracy."""
    grid = config.alpha_grid or [config.alpha]
    best = None
    for a in grid:
        res = train(g, config, alpha=a)
        acc = accuracy(np.argmax(forward(res.model, g, FULL), axis=1), g.labels, g.valid)
        if best is None or acc > best[0]:
            best = (acc, res)
    return best[1]


def save_model(model: AppnpModel, path, seed: int | None = None, extra: dict | None = None) -> None:
    header = {"alpha": model.alpha, "k_prop": model.k_prop, "dropout": model.dropout, "seed": seed}
    save_params(model.mlp, path, {"model": "appnp", **header, **(extra or {})})


def load_model(path) -> AppnpModel:
    params, meta = load_params(path)
    return AppnpModel(params, meta["alpha"], meta["k_prop"], meta["dropout"])
