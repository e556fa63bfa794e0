"""End-to-end experiment driver and the analyses built on top of it."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .appnp import FULL, PredictionBundle, accuracy, forward, predict_bundle, train, train_with_alpha_grid
from .cgi import (
    FACTOR_NAMES, ChoiceDataset, ChoiceModel, build_choice_dataset, cgi_predict, ensemble_predict,
    estimate_causal_uncertainty, factor_matrix, lway_baseline, train_choice_model,
)
from .config import RunConfig
from .errors import CGIError, DatasetSparsityError, ValidationError
from .graph import Graph, compute_transition_matrix, inject_cross_category_edges, load_graph
from .synthetic import planted_partition

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class StageError(CGIError):
    """A pipeline stage failed; the message carries the stage name."""


def _stage(name):
    class _Ctx:
        def __enter__(self):
            self.t0 = time.perf_counter()
            return self

        def __exit__(self, exc_type, exc, tb):
            self.elapsed = time.perf_counter() - self.t0
            if exc is not None and isinstance(exc, CGIError) and not isinstance(exc, StageError):
                raise StageError(f"[{name}] {exc}") from exc
            return False
    return _Ctx()


# --
# Analyses

def decile_order(scores, order: str = "asc", node_ids=None) -> np.ndarray:
    """Positions sorted by score (stable, ties by node id); ``desc`` flips the score only."""
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValidationError("scores must be finite")
    ids = np.arange(len(scores)) if node_ids is None else np.asarray(node_ids)
    if order == "asc":
        key = scores
    elif order == "desc":
        key = -scores
    else:
        raise ValidationError(f"order must be 'asc' or 'desc', got {order!r}")
    return np.lexsort((ids, key))


def decile_analysis(scores, correctness, groups: int = 10, order: str = "asc", node_ids=None) -> np.ndarray:
    """Accuracy within each of ``groups`` equal-size score groups.

    Remainder nodes go to the earliest groups.
    """
    correctness = np.asarray(correctness, dtype=bool)
    if len(correctness) < groups:
        raise ValidationError(f"{len(correctness)} nodes cannot form {groups} groups")
    perm = decile_order(scores, order, node_ids)
    return np.array([correctness[g].mean() for g in np.array_split(perm, groups)])


def overlap_matrix(rank_a, rank_b, groups: int = 10) -> np.ndarray:
    """Share of group ``i`` under ranking ``a`` that falls in group ``j`` under ranking ``b``."""
    rank_a, rank_b = np.asarray(rank_a), np.asarray(rank_b)
    if len(rank_a) != len(rank_b) or not np.array_equal(np.sort(rank_a), np.sort(rank_b)):
        raise ValidationError("rankings cover different node sets")
    if len(np.unique(rank_a)) != len(rank_a):
        raise ValidationError("rankings must be permutations")
    ga = np.array_split(rank_a, groups)
    group_b = {}
    for j, grp in enumerate(np.array_split(rank_b, groups)):
        for node in grp:
            group_b[node] = j
    out = np.zeros((groups, groups))
    for i, grp in enumerate(ga):
        for node in grp:
            out[i, group_b[node]] += 1
        out[i] /= max(len(grp), 1)
    return out


def oracle_bound(bundle: PredictionBundle, true_labels, eval_set) -> float:
    """Accuracy if every node took whichever of its two classifications is right."""
    idx = np.asarray(eval_set, dtype=np.int64)
    z = np.asarray(true_labels)[idx]
    return float(np.mean((bundle.z_hat[idx] == z) | (bundle.z_self[idx] == z)))


def choice_accuracy(model: ChoiceModel, data: ChoiceDataset) -> float:
    cols = [data.feature_names.index(k) for k in model.feature_names]
    pred = np.where(model.decision_function(data.factors[:, cols]) >= 0, 1, -1)
    return float(np.mean(pred == data.p))


def ablate_factors(data: ChoiceDataset, drop=FACTOR_NAMES, eval_data: ChoiceDataset | None = None,
                   c_grid=(0.1, 1.0, 10.0, 100.0), gamma_grid=(0.01, 0.1, 1.0, 10.0), folds: int = 5,
                   seed: int = 0) -> dict:
    """Choice accuracy with every factor, without each factor in ``drop`` and for the majority rule.

    Accuracy is measured on ``eval_data`` when given, else it is the best
    cross-validated accuracy on ``data``. ``majority`` always keeps the graph
    prediction, i.e. the share of rows with ``p = +1``.
    """
    drop = [drop] if isinstance(drop, str) else list(drop)
    unknown = set(drop) - set(data.feature_names)
    if unknown:
        raise ValidationError(f"unknown factors {sorted(unknown)}")
    if set(drop) >= set(data.feature_names) and len(data.feature_names) == 1:
        raise ValidationError("cannot drop every factor")

    def score(d: ChoiceDataset) -> float:
        model = train_choice_model(d, c_grid, gamma_grid, folds, seed)
        if eval_data is None:
            return max(r["accuracy"] for r in model.cv_table)
        return choice_accuracy(model, eval_data.drop(set(eval_data.feature_names) - set(d.feature_names)))

    ref = eval_data if eval_data is not None else data
    out = {"all": score(data), "majority": float(np.mean(ref.p == 1))}
    for name in drop:
        out[f"-{name}"] = score(data.drop([name]))
    return out


# --
# Pipeline

@dataclass
class PipelineResult:
    report: dict
    graph: Graph
    bundle: PredictionBundle
    graph_var: np.ndarray
    factors: np.ndarray
    predictions: dict
    history: list
    choice_model: ChoiceModel | None = None
    choice_data: ChoiceDataset | None = None
    extra_losses: dict = field(default_factory=dict)


def _split_of(g: Graph) -> np.ndarray:
    split = np.full(g.n, "", dtype=object)
    for name in ("train", "valid", "test"):
        split[getattr(g, name)] = name
    return split


def graph_from_config(config: RunConfig) -> Graph:
    p = config.paths
    missing = [k for k in ("edges", "features", "labels", "splits") if k not in p]
    if missing:
        raise ValidationError(f"config.paths lacks {missing}")
    return load_graph(p["edges"], p["features"], p["labels"], p["splits"])


def run_pipeline(config: RunConfig, graph: Graph | None = None) -> PipelineResult:
    """Train APPNP, fit the choice model and score every inference mechanism on the test split."""
    timing = {}
    with _stage("load") as st:
        g = graph if graph is not None else graph_from_config(config)
    timing["load"] = st.elapsed
    with _stage("train") as st:
        res = train_with_alpha_grid(g, config)
    timing["train"] = st.elapsed
    model = res.model

    with _stage("intervention") as st:
        bundle = predict_bundle(model, g)
        _, graph_var = estimate_causal_uncertainty(model, g, config.k_mc, config.tau, config.seed,
                                                   workers=config.mc_workers, z_hat=bundle.z_hat)
        labeled = g.train if config.transition_nodes == "train" else np.union1d(g.train, g.valid)
        t_matrix = compute_transition_matrix(g, labeled)
        factors = factor_matrix(bundle, graph_var, t_matrix)
    timing["intervention"] = st.elapsed

    choice_set = g.valid if config.choice_nodes == "valid" else np.union1d(g.train, g.valid)
    choice_info: dict = {}
    choice_model = data = None
    with _stage("choice") as st:
        try:
            data = build_choice_dataset(bundle, factors, g.labels, choice_set, config.dataset_mode)
        except DatasetSparsityError:
            data = None
        n_rows = 0 if data is None else len(data)
        n_pos = 0 if data is None else int(np.sum(data.p == 1))
        choice_info["rows"] = n_rows
        if n_rows < config.min_choice_rows or n_pos in (0, n_rows):
            choice_info["status"] = "fallback"
            choice_info["reason"] = (f"{n_rows} choice rows ({n_pos} positive); "
                                     f"need >= {config.min_choice_rows} with both classes")
            log.warning("choice model skipped: %s", choice_info["reason"])
        else:
            svm = config.svm
            choice_model = train_choice_model(data, svm.c_grid, svm.gamma_grid, svm.folds,
                                              config.seed, svm.tol, svm.max_iter)
            choice_info.update({
                "status": "trained",
                "positive_rows": n_pos,
                "c": choice_model.c_penalty,
                "gamma": choice_model.gamma,
                "n_support": int(len(choice_model.dual_coefs)),
                "cv_table": choice_model.cv_table,
            })
        z_cgi = cgi_predict(bundle, factors, choice_model)
    timing["choice"] = st.elapsed

    with _stage("baselines") as st:
        z_ens = ensemble_predict(bundle)
        _, z_lway = lway_baseline(bundle, g.labels, choice_set, config.lway_alpha, config.lway_epochs, config.lr)
    timing["baselines"] = st.elapsed

    test = g.test
    y = g.labels
    acc = {
        "appnp": accuracy(bundle.z_hat, y, test),
        "self": accuracy(bundle.z_self, y, test),
        "ensemble": accuracy(z_ens, y, test),
        "lway": accuracy(z_lway, y, test),
        "cgi": accuracy(z_cgi, y, test),
        "oracle": oracle_bound(bundle, y, test),
    }
    conflict = test[bundle.conflict[test]]
    decidable = conflict[(bundle.z_hat[conflict] == y[conflict]) | (bundle.z_self[conflict] == y[conflict])]
    conflict_info = {
        "test_size": int(len(test)),
        "count": int(len(conflict)),
        "decidable": int(len(decidable)),
    }
    if len(decidable):
        conflict_info["choice_accuracy"] = float(np.mean(z_cgi[decidable] == y[decidable]))
        conflict_info["majority_accuracy"] = float(np.mean(bundle.z_hat[decidable] == y[decidable]))

    report = {
        "schema_version": SCHEMA_VERSION,
        "seed": config.seed,
        "config": config.to_dict(),
        "graph": {"n": g.n, "edges": g.num_edges, "classes": g.num_classes,
                  "train": int(len(g.train)), "valid": int(len(g.valid)), "test": int(len(test))},
        "training": {"alpha": model.alpha, "best_epoch": res.best_epoch, "epochs_run": len(res.history)},
        "accuracy": acc,
        "ri": {
            "over_appnp": (acc["cgi"] - acc["appnp"]) / acc["appnp"] if acc["appnp"] else None,
            "over_ensemble": (acc["cgi"] - acc["ensemble"]) / acc["ensemble"] if acc["ensemble"] else None,
        },
        "conflict": conflict_info,
        "choice_model": choice_info,
    }
    report["ri"] = {k: v for k, v in report["ri"].items() if v is not None}

    if len(test) >= 10:
        correct = bundle.z_hat[test] == y[test]
        by_var = decile_analysis(graph_var[test], correct, 10, "asc", test)
        by_conf = decile_analysis(factors[test, 2], correct, 10, "desc", test)
        deciles = {"graph_var_asc": by_var.tolist(), "neighbor_conf_desc": by_conf.tolist()}
        if np.ptp(by_var) > 0:
            deciles["spearman_graph_var"] = float(spearmanr(np.arange(10), by_var).statistic)
        if np.ptp(by_conf) > 0:
            deciles["spearman_neighbor_conf"] = float(spearmanr(np.arange(10), by_conf).statistic)
        report["deciles"] = deciles
        order_a = test[decile_order(graph_var[test], "asc", test)]
        order_b = test[decile_order(factors[test, 2], "desc", test)]
        report["overlap"] = overlap_matrix(order_a, order_b, 10).tolist()

    report["timing"] = timing
    preds = {"cgi": z_cgi, "ensemble": z_ens, "lway": z_lway}
    return PipelineResult(report, g, bundle, graph_var, factors, preds, res.history, choice_model, data)


# --
# Output

def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def write_prediction_dump(result: PipelineResult, path, probabilities: bool = False) -> None:
    g, b = result.graph, result.bundle
    split = _split_of(g)
    header = ["node", "split", "label", "z_hat", "z_self", "z_cgi", "z_ensemble", "z_lway"]
    L = g.num_classes
    if probabilities:
        header += [f"y_hat_{c}" for c in range(L)] + [f"y_self_{c}" for c in range(L)]
    rows = []
    for i in range(g.n):
        row = [i, split[i], int(g.labels[i]), int(b.z_hat[i]), int(b.z_self[i]),
               int(result.predictions["cgi"][i]), int(result.predictions["ensemble"][i]),
               int(result.predictions["lway"][i])]
        if probabilities:
            row += list(b.y_hat[i]) + list(b.y_self[i])
        rows.append(row)
    _write_csv(Path(path), header, rows)


def write_factor_dump(result: PipelineResult, path) -> None:
    g, b = result.graph, result.bundle
    split = _split_of(g)
    rows = []
    for i in range(g.n):
        z = int(g.labels[i])
        p = ""
        if z >= 0 and (b.z_hat[i] == z or b.z_self[i] == z):
            p = 1 if b.z_hat[i] == z else -1
        rows.append([i, split[i], z, int(b.z_hat[i]), int(b.z_self[i]), *result.factors[i], p])
    _write_csv(Path(path), ["node", "split", "label", "z_hat", "z_self", *FACTOR_NAMES, "p"], rows)


def read_factor_dump(path) -> dict:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return {
        "node": np.array([int(r["node"]) for r in rows]),
        "split": np.array([r["split"] for r in rows]),
        "label": np.array([int(r["label"]) for r in rows]),
        "z_hat": np.array([int(r["z_hat"]) for r in rows]),
        "z_self": np.array([int(r["z_self"]) for r in rows]),
        "factors": np.array([[float(r[k]) for k in FACTOR_NAMES] for r in rows]).reshape(len(rows), 7),
        # 0 where neither classification is right or the label is unknown
        "p": np.array([int(r["p"]) if r["p"] else 0 for r in rows]),
    }


def emit_report(result: PipelineResult, out_dir, probabilities: bool = False) -> dict:
    """Write metrics.json, predictions.csv, factors.csv, deciles.csv, overlap.csv and losses.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rep = result.report
    paths = {}
    paths["metrics"] = out / "metrics.json"
    with open(paths["metrics"], "w") as fh:
        json.dump(rep, fh, indent=2, sort_keys=True)
        fh.write("\n")
    paths["predictions"] = out / "predictions.csv"
    write_prediction_dump(result, paths["predictions"], probabilities)
    paths["factors"] = out / "factors.csv"
    write_factor_dump(result, paths["factors"])
    if "deciles" in rep:
        paths["deciles"] = out / "deciles.csv"
        d = rep["deciles"]
        _write_csv(paths["deciles"], ["group", "graph_var_asc", "neighbor_conf_desc"],
                   [[i, a, c] for i, (a, c) in enumerate(zip(d["graph_var_asc"], d["neighbor_conf_desc"]))])
    if "overlap" in rep:
        paths["overlap"] = out / "overlap.csv"
        m = rep["overlap"]
        _write_csv(paths["overlap"], ["group"] + [f"g{j}" for j in range(len(m))],
                   [[i, *row] for i, row in enumerate(m)])
    paths["losses"] = out / "losses.csv"
    loss_rows = [["appnp", h["epoch"], h["train_loss"], h["val_loss"]] for h in result.history]
    for run, hist in result.extra_losses.items():
        loss_rows += [[run, h["epoch"], h["train_loss"], h["val_loss"]] for h in hist]
    _write_csv(paths["losses"], ["run", "epoch", "train_loss", "val_loss"], loss_rows)
    if result.choice_model is not None:
        paths["choice_model"] = out / "choice_model.json"
        result.choice_model.save(paths["choice_model"])
    return {k: str(v) for k, v in paths.items()}


def strip_timing(report: dict) -> dict:
    return {k: v for k, v in report.items() if k != "timing"}


# --
# Experiments

def aggregate(reports: list[dict]) -> dict:
    """Mean and standard deviation of each accuracy and RI across runs."""
    out = {"runs": len(reports), "seeds": [r.get("seed") for r in reports]}
    for section in ("accuracy", "ri"):
        keys = sorted(set().union(*(r.get(section, {}).keys() for r in reports)))
        out[section] = {}
        for k in keys:
            vals = np.array([r[section][k] for r in reports if k in r.get(section, {})], dtype=float)
            out[section][k] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out


def run_seeds(config: RunConfig, seeds, graph: Graph | None = None) -> dict:
    reports = [run_pipeline(config.replace(seed=s), graph).report for s in seeds]
    return {"reports": reports, "summary": aggregate(reports)}


def discrepancy_study(ratios=(0.1, 0.3, 0.5), seeds=range(5), node_fraction: float = 0.5,
                      config: RunConfig | None = None, graph_kwargs: dict | None = None,
                      keep_results: bool = False) -> dict:
    """Cross-category injection sweep on planted-partition graphs.

    For each seed a base graph is drawn once and perturbed at every ratio, so
    runs are paired across ratios. ``keep_results`` adds the full
    :class:`PipelineResult` objects under ``"results"``.
    """
    config = config or RunConfig()
    graph_kwargs = graph_kwargs or {}
    reports = {r: [] for r in ratios}
    kept = {r: [] for r in ratios}
    for s in seeds:
        base = planted_partition(seed=s, **graph_kwargs)
        for r in ratios:
            g = inject_cross_category_edges(base, r, node_fraction, seed=s)
            res = run_pipeline(config.replace(seed=s), g)
            reports[r].append(res.report)
            if keep_results:
                kept[r].append(res)
    out = {"reports": reports, "summary": {r: aggregate(reps) for r, reps in reports.items()}}
    if keep_results:
        out["results"] = kept
    return out


def trust_feature_experiment(g: Graph, config: RunConfig, trust_nodes: str = "labeled",
                             zero_trust: bool = False) -> dict:
    """Retrain with a per-node trust column and compare against the plain model and the oracle.

    The trust value is +1 where the graph classification is right and the
    blocked one is not, -1 for the reverse, 0 where they agree or where the node's
    label is unavailable (``trust_nodes="labeled"`` uses train+valid labels only,
    ``"all"`` uses every known label).
    """
    plain = train(g, config)
    bundle = predict_bundle(plain.model, g)
    if trust_nodes == "labeled":
        known = np.union1d(g.train, g.valid)
    elif trust_nodes == "all":
        known = np.flatnonzero(g.labels >= 0)
    else:
        raise ValidationError(f"trust_nodes must be 'labeled' or 'all', got {trust_nodes!r}")
    trust = np.zeros(g.n)
    if not zero_trust:
        z = g.labels[known]
        conflict = bundle.z_hat[known] != bundle.z_self[known]
        trust[known] = np.where(conflict, np.where(bundle.z_hat[known] == z, 1.0, -1.0), 0.0)
        trust[known[conflict & (bundle.z_hat[known] != z) & (bundle.z_self[known] != z)]] = 0.0
    g_trust = g.with_features(np.hstack([g.features, trust[:, None]]))
    trusted = train(g_trust, config)
    z_trust = np.argmax(forward(trusted.model, g_trust, FULL), axis=1)
    return {
        "plain": accuracy(bundle.z_hat, g.labels, g.test),
        "trust": accuracy(z_trust, g.labels, g.test),
        "bound": oracle_bound(bundle, g.labels, g.test),
        "trust_nonzero": int(np.count_nonzero(trust)),
        "losses": {"plain": plain.history, "trust": trusted.history},
    }


__all__ = [
    "PipelineResult", "StageError", "run_pipeline", "emit_report", "decile_analysis", "decile_order",
    "overlap_matrix", "oracle_bound", "ablate_factors", "choice_accuracy", "trust_feature_experiment",
    "discrepancy_study", "run_seeds", "aggregate", "strip_timing", "read_factor_dump",
    "write_prediction_dump", "write_factor_dump", "graph_from_config",
]
