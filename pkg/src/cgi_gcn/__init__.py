"""Causal GCN inference on top of an APPNP node classifier."""

from .appnp import AppnpModel, PredictionBundle, forward, predict_bundle, propagate, train
from .cgi import (
    FACTOR_NAMES, ChoiceDataset, ChoiceModel, FactorVector, build_choice_dataset, cgi_predict,
    choice_decision, ensemble_predict, estimate_causal_uncertainty, extract_factors, factor_matrix,
    lway_baseline, train_choice_model,
)
from .config import RunConfig, SvmConfig
from .graph import (
    Graph, NormalizedAdjacency, compute_transition_matrix, edge_dropout_sample,
    inject_cross_category_edges, load_graph, normalize_adjacency, save_graph,
)
from .harness import emit_report, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "AppnpModel", "PredictionBundle", "forward", "predict_bundle", "propagate", "train",
    "FACTOR_NAMES", "ChoiceDataset", "ChoiceModel", "FactorVector", "build_choice_dataset", "cgi_predict",
    "choice_decision", "ensemble_predict", "estimate_causal_uncertainty", "extract_factors", "factor_matrix",
    "lway_baseline", "train_choice_model", "RunConfig", "SvmConfig", "Graph", "NormalizedAdjacency",
    "compute_transition_matrix", "edge_dropout_sample", "inject_cross_category_edges", "load_graph",
    "normalize_adjacency", "save_graph", "emit_report", "run_pipeline",
]
