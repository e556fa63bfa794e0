"""Command-line entry point: ``cgi-gcn <command> --seed N [--config run.json] [overrides]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .appnp import FULL, accuracy, forward, predict_bundle, save_model, train_with_alpha_grid
from .cgi import ChoiceDataset
from .config import RunConfig
from .errors import CGIError, ValidationError
from .graph import Graph, inject_cross_category_edges, load_graph, save_graph
from .synthetic import planted_partition

log = logging.getLogger("cgi_gcn")

# flag name -> config key
OVERRIDES = {
    "hidden": int, "dropout": float, "lr": float, "l2_lambda": float, "alpha": float, "k_prop": int,
    "epochs": int, "patience": int, "tau": float, "k_mc": int, "choice_nodes": str,
    "dataset_mode": str, "transition_nodes": str, "setting": str, "mc_workers": int,
}


def _common(p: argparse.ArgumentParser, graph: bool = True):
    p.add_argument("--seed", type=int, required=True, help="master seed (required)")
    p.add_argument("--config", type=Path, help="run configuration JSON")
    p.add_argument("--set", action="append", default=[], metavar="KEY=JSON",
                   help="override any config key, value parsed as JSON")
    for name, typ in OVERRIDES.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)
    p.add_argument("-v", "--verbose", action="store_true")
    if graph:
        g = p.add_argument_group("graph input (one of)")
        g.add_argument("--graph", type=Path, help="directory with edges.txt, features.csv, labels.txt, splits.json")
        g.add_argument("--synthetic", action="store_true", help="use a planted-partition graph drawn with --seed")
        g.add_argument("--edges", type=Path)
        g.add_argument("--features", type=Path)
        g.add_argument("--labels", type=Path)
        g.add_argument("--splits", type=Path)
        g.add_argument("--num-classes", type=int)


def build_config(args) -> RunConfig:
    raw = {}
    if args.config is not None:
        with open(args.config) as fh:
            raw = json.load(fh)
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValidationError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            raw[key] = json.loads(value)
        except json.JSONDecodeError:
            raw[key] = value
    for name in OVERRIDES:
        if getattr(args, name, None) is not None:
            raw[name] = getattr(args, name)
    raw["seed"] = args.seed
    return RunConfig.from_dict(raw)


def load_input_graph(args, config: RunConfig) -> Graph:
    if getattr(args, "synthetic", False):
        return planted_partition(seed=args.seed)
    if args.graph is not None:
        d = args.graph
        return load_graph(d / "edges.txt", d / "features.csv", d / "labels.txt", d / "splits.json",
                          args.num_classes)
    explicit = [args.edges, args.features, args.labels, args.splits]
    if all(p is not None for p in explicit):
        return load_graph(*explicit, args.num_classes)
    if any(p is not None for p in explicit):
        raise ValidationError("--edges, --features, --labels and --splits must be given together")
    return harness.graph_from_config(config)


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_train(args, config):
    g = load_input_graph(args, config)
    res = train_with_alpha_grid(g, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(res.model, out / "model", seed=config.seed, extra={"best_epoch": res.best_epoch})
    bundle = predict_bundle(res.model, g)
    harness._write_csv(out / "losses.csv", ["run", "epoch", "train_loss", "val_loss"],
                       [["appnp", h["epoch"], h["train_loss"], h["val_loss"]] for h in res.history])
    split = harness._split_of(g)
    harness._write_csv(out / "predictions.csv", ["node", "split", "label", "z_hat", "z_self"],
                       [[i, split[i], int(g.labels[i]), int(bundle.z_hat[i]), int(bundle.z_self[i])]
                        for i in range(g.n)])
    metrics = {
        "schema_version": harness.SCHEMA_VERSION,
        "seed": config.seed,
        "config": config.to_dict(),
        "training": {"alpha": res.model.alpha, "best_epoch": res.best_epoch, "epochs_run": len(res.history)},
        "accuracy": {
            "appnp": accuracy(bundle.z_hat, g.labels, g.test),
            "self": accuracy(bundle.z_self, g.labels, g.test),
            "valid": accuracy(np.argmax(forward(res.model, g, FULL), axis=1), g.labels, g.valid),
        },
    }
    _write_json(out / "metrics.json", metrics)
    print(json.dumps(metrics["accuracy"], sort_keys=True))


def cmd_perturb(args, config):
    g = load_input_graph(args, config)
    h = inject_cross_category_edges(g, args.ratio, args.node_fraction, seed=config.seed,
                                    both_endpoints=not args.one_endpoint)
    save_graph(h, args.out)
    print(f"{g.num_edges} -> {h.num_edges} edges written to {args.out}")


def cmd_cgi(args, config):
    g = load_input_graph(args, config)
    result = harness.run_pipeline(config, g)
    harness.emit_report(result, args.out, probabilities=args.probabilities)
    print(json.dumps(result.report["accuracy"], sort_keys=True))


def cmd_analyze(args, config):
    dump = harness.read_factor_dump(Path(args.run) / "factors.csv")
    out = Path(args.out or args.run)
    out.mkdir(parents=True, exist_ok=True)
    test = np.flatnonzero(dump["split"] == "test")
    nodes = dump["node"][test]
    correct = dump["z_hat"][test] == dump["label"][test]
    gv, conf = dump["factors"][test, 0], dump["factors"][test, 2]
    by_var = harness.decile_analysis(gv, correct, args.groups, "asc", nodes)
    by_conf = harness.decile_analysis(conf, correct, args.groups, "desc", nodes)
    overlap = harness.overlap_matrix(nodes[harness.decile_order(gv, "asc", nodes)],
                                     nodes[harness.decile_order(conf, "desc", nodes)], args.groups)
    result = {"seed": config.seed, "deciles": {"graph_var_asc": by_var.tolist(),
                                                "neighbor_conf_desc": by_conf.tolist()},
              "overlap": overlap.tolist()}
    harness._write_csv(out / "deciles.csv", ["group", "graph_var_asc", "neighbor_conf_desc"],
                       [[i, a, c] for i, (a, c) in enumerate(zip(by_var, by_conf))])
    harness._write_csv(out / "overlap.csv", ["group"] + [f"g{j}" for j in range(args.groups)],
                       [[i, *row] for i, row in enumerate(overlap)])

    choice_split = {"valid": ["valid"], "train_valid": ["train", "valid"]}[config.choice_nodes]
    rows = np.isin(dump["split"], choice_split) & (dump["p"] != 0)
    if config.dataset_mode == "conflict_only":
        rows &= dump["z_hat"] != dump["z_self"]
    data = ChoiceDataset(dump["factors"][rows], dump["p"][rows], dump["node"][rows])
    n_pos = int(np.sum(data.p == 1))
    if len(data) >= config.min_choice_rows and 0 < n_pos < len(data):
        svm = config.svm
        drop = args.drop or list(data.feature_names)
        abl = harness.ablate_factors(data, drop, None, svm.c_grid, svm.gamma_grid, svm.folds, config.seed)
        result["ablation"] = abl
        harness._write_csv(out / "ablation.csv", ["variant", "choice_accuracy"], list(abl.items()))
    else:
        log.warning("ablation skipped: %d choice rows (%d positive)", len(data), n_pos)
    _write_json(out / "analysis.json", result)
    print(json.dumps({k: v for k, v in result.items() if k != "overlap"}, sort_keys=True))


def cmd_pilot(args, config):
    g = load_input_graph(args, config)
    res = harness.trust_feature_experiment(g, config, args.trust_nodes, args.zero_trust)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {k: v for k, v in res.items() if k != "losses"}
    _write_json(out / "pilot.json", {"seed": config.seed, "config": config.to_dict(), **summary})
    rows = [[run, h["epoch"], h["train_loss"], h["val_loss"]] for run, hist in res["losses"].items() for h in hist]
    harness._write_csv(out / "losses.csv", ["run", "epoch", "train_loss", "val_loss"], rows)
    print(json.dumps(summary, sort_keys=True))


def cmd_report(args, config):
    reports = []
    for p in args.runs:
        p = Path(p)
        with open(p / "metrics.json" if p.is_dir() else p) as fh:
            reports.append(json.load(fh))
    if not reports:
        raise ValidationError("no metrics files given")
    summary = harness.aggregate(reports)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "summary.json", summary)
        rows = [[sec, k, v["mean"], v["std"]] for sec in ("accuracy", "ri") for k, v in summary[sec].items()]
        harness._write_csv(out / "summary.csv", ["section", "metric", "mean", "std"], rows)
    print(json.dumps(summary, indent=2, sort_keys=True))


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cgi-gcn", description="Causal GCN inference experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train APPNP and dump original and neighbor-blocked predictions")
    _common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("perturb", help="inject cross-category edges and write the new graph")
    _common(p)
    p.add_argument("--ratio", type=float, required=True, help="added edges as a fraction of existing edges")
    p.add_argument("--node-fraction", type=float, default=0.5)
    p.add_argument("--one-endpoint", action="store_true", help="require only one endpoint in the selected subset")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("cgi", help="full pipeline: train, intervene, fit the choice model, report")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--probabilities", action="store_true", help="include class probabilities in predictions.csv")
    p.set_defaults(func=cmd_cgi)

    p = sub.add_parser("analyze", help="deciles, overlap and factor ablation from a cgi run directory")
    _common(p, graph=False)
    p.add_argument("--run", required=True, help="output directory of a cgi run")
    p.add_argument("--out", help="defaults to the run directory")
    p.add_argument("--groups", type=int, default=10)
    p.add_argument("--drop", nargs="*", help="factors to ablate (default: each in turn)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("pilot", help="oracle bound and trust-feature retraining")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--trust-nodes", choices=("labeled", "all"), default="labeled")
    p.add_argument("--zero-trust", action="store_true", help="use an all-zero trust column")
    p.set_defaults(func=cmd_pilot)

    p = sub.add_parser("report", help="aggregate metrics.json files across runs")
    _common(p, graph=False)
    p.add_argument("runs", nargs="+", help="run directories or metrics.json files")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = build_config(args)
        args.func(args, config)
    except CGIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
