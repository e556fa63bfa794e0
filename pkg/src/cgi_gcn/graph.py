"""Graph container, file I/O, adjacency normalization and structural sampling."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import GenerationError, GraphFormatError, ValidationError

log = logging.getLogger(__name__)


def round_half_away(x: float) -> int:
    """Round to the nearest integer, halves away from zero."""
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def _symmetric_csr(rows: np.ndarray, cols: np.ndarray, n: int) -> sp.csr_matrix:
    """Canonical symmetric 0/1 CSR from undirected edge endpoints (u < v)."""
    r = np.concatenate([rows, cols]).astype(np.int64)
    c = np.concatenate([cols, rows]).astype(np.int64)
    adj = sp.csr_matrix((np.ones(len(r)), (r, c)), shape=(n, n))
    adj.sum_duplicates()
    adj.sort_indices()
    adj.data[:] = 1.0
    return adj


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected attributed graph with node labels and train/valid/test splits.

    ``labels`` uses -1 for unlabeled nodes. ``adjacency`` stores every edge in
    both directions, sorted, without self-loops or duplicates.
    """

    adjacency: sp.csr_matrix
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    train: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    valid: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    test: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        n = self.features.shape[0]
        if self.features.ndim != 2:
            raise ValidationError("features must be a 2-d matrix")
        if self.adjacency.shape != (n, n):
            raise ValidationError(f"adjacency shape {self.adjacency.shape} does not match {n} nodes")
        if self.labels.shape != (n,):
            raise ValidationError(f"{len(self.labels)} labels for {n} nodes")
        if self.num_classes < 1:
            raise ValidationError("num_classes must be positive")
        if n and (self.labels.min() < -1 or self.labels.max() >= self.num_classes):
            raise ValidationError(f"labels must lie in [-1, {self.num_classes})")
        adj = self.adjacency
        if adj.diagonal().any():
            raise ValidationError("adjacency contains self-loops")
        if (adj != adj.T).nnz:
            raise ValidationError("adjacency is not symmetric")
        for name in ("train", "valid", "test"):
            idx = getattr(self, name)
            if len(idx) and (idx.min() < 0 or idx.max() >= n):
                raise ValidationError(f"{name} split index out of range")
            if len(np.unique(idx)) != len(idx):
                raise ValidationError(f"{name} split has repeated indices")
        if len(np.intersect1d(self.train, self.valid)) or len(np.intersect1d(self.train, self.test)) \
                or len(np.intersect1d(self.valid, self.test)):
            raise ValidationError("split sets overlap")
        for name in ("train", "valid"):
            if (self.labels[getattr(self, name)] < 0).any():
                raise ValidationError(f"{name} split contains unlabeled nodes")
        for arr in (self.features, self.labels, self.train, self.valid, self.test):
            arr.flags.writeable = False

    @classmethod
    def from_edges(cls, edges, features, labels, num_classes=None, train=(), valid=(), test=()):
        """Build a graph from an iterable of (u, v) pairs, dropping loops and duplicates."""
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        n = features.shape[0]
        edges = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges,
                           dtype=np.int64).reshape(-1, 2)
        if len(edges) and (edges.min() < 0 or edges.max() >= n):
            raise ValidationError(f"edge endpoint out of range for {n} nodes")
        loops = edges[:, 0] == edges[:, 1]
        e = np.sort(edges[~loops], axis=1)
        e = np.unique(e, axis=0) if len(e) else e
        if num_classes is None:
            num_classes = int(labels.max()) + 1 if len(labels) else 1
        return cls(
            adjacency=_symmetric_csr(e[:, 0], e[:, 1], n),
            features=features,
            labels=labels,
            num_classes=int(num_classes),
            train=np.asarray(train, dtype=np.int64),
            valid=np.asarray(valid, dtype=np.int64),
            test=np.asarray(test, dtype=np.int64),
        )

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def num_edges(self) -> int:
        """Undirected edge count."""
        return self.adjacency.nnz // 2

    def edge_list(self) -> np.ndarray:
        """Undirected edges as an (m, 2) array with u < v, in CSR order."""
        coo = self.adjacency.tocoo()
        keep = coo.row < coo.col
        return np.stack([coo.row[keep], coo.col[keep]], axis=1).astype(np.int64)

    def with_edges(self, edges: np.ndarray) -> "Graph":
        return Graph(
            adjacency=_symmetric_csr(edges[:, 0], edges[:, 1], self.n),
            features=self.features, labels=self.labels, num_classes=self.num_classes,
            train=self.train, valid=self.valid, test=self.test,
        )

    def with_features(self, features: np.ndarray) -> "Graph":
        return Graph(
            adjacency=self.adjacency, features=np.asarray(features, dtype=np.float64),
            labels=self.labels, num_classes=self.num_classes,
            train=self.train, valid=self.valid, test=self.test,
        )

    def without_node_edges(self, nodes) -> "Graph":
        """Copy with every edge touching ``nodes`` removed (nodes stay, isolated)."""
        drop = np.zeros(self.n, dtype=bool)
        drop[np.asarray(nodes, dtype=np.int64)] = True
        e = self.edge_list()
        return self.with_edges(e[~(drop[e[:, 0]] | drop[e[:, 1]])])


@dataclass(frozen=True, eq=False)
class NormalizedAdjacency:
    """D^-1/2 (A + I) D^-1/2 as a sparse matrix."""

    matrix: sp.csr_matrix

    def __matmul__(self, other):
        return self.matrix @ other

    @classmethod
    def identity(cls, n: int) -> "NormalizedAdjacency":
        return cls(sp.identity(n, format="csr", dtype=np.float64))


def _normalize(adj: sp.csr_matrix) -> NormalizedAdjacency:
    n = adj.shape[0]
    a = (adj + sp.identity(n, format="csr")).tocsr()
    a.sort_indices()
    deg = np.asarray(a.sum(axis=1)).ravel()
    dinv = 1.0 / np.sqrt(deg)
    coo = a.tocoo()
    data = dinv[coo.row] * coo.data * dinv[coo.col]
    out = sp.csr_matrix((data, (coo.row, coo.col)), shape=(n, n))
    out.sort_indices()
    return NormalizedAdjacency(out)


def normalize_adjacency(g: Graph) -> NormalizedAdjacency:
    return _normalize(g.adjacency)


def edge_dropout_sample(g: Graph, tau: float, rng: np.random.Generator) -> NormalizedAdjacency:
    """Drop each undirected edge independently with probability ``tau`` and renormalize.

    Draws exactly one uniform per undirected edge, in ``g.edge_list()`` order.
    """
    if not 0.0 <= tau < 1.0:
        raise ValidationError(f"tau must lie in [0, 1), got {tau}")
    e = g.edge_list()
    keep = rng.random(len(e)) >= tau
    e = e[keep]
    return _normalize(_symmetric_csr(e[:, 0], e[:, 1], g.n))


def compute_transition_matrix(g: Graph, labeled_set) -> np.ndarray:
    """Row-normalized category-to-category edge counts over labeled endpoints.

    Rows for categories that touch no labeled edge fall back to uniform.
    """
    labeled_set = np.asarray(labeled_set, dtype=np.int64)
    if (g.labels[labeled_set] < 0).any():
        raise ValidationError("labeled_set contains unlabeled nodes")
    L = g.num_classes
    mask = np.zeros(g.n, dtype=bool)
    mask[labeled_set] = True
    e = g.edge_list()
    e = e[mask[e[:, 0]] & mask[e[:, 1]]]
    a, b = g.labels[e[:, 0]], g.labels[e[:, 1]]
    counts = np.zeros((L, L))
    np.add.at(counts, (a, b), 1.0)
    cross = a != b
    np.add.at(counts, (b[cross], a[cross]), 1.0)
    rows = counts.sum(axis=1)
    t = np.full((L, L), 1.0 / L)
    nz = rows > 0
    t[nz] = counts[nz] / rows[nz, None]
    return t


def inject_cross_category_edges(g: Graph, ratio: float, node_fraction: float, seed: int,
                                both_endpoints: bool = True) -> Graph:
    """Add ``round(ratio * |E|)`` new cross-category edges among a random node subset.

    With ``both_endpoints`` every new edge joins two selected nodes; otherwise only
    one endpoint has to be selected.
    """
    if not 0.0 < ratio <= 1.0:
        raise ValidationError(f"ratio must lie in (0, 1], got {ratio}")
    if not 0.0 < node_fraction <= 1.0:
        raise ValidationError(f"node_fraction must lie in (0, 1], got {node_fraction}")
    rng = np.random.default_rng(seed)
    n = g.n
    selected = np.sort(rng.choice(n, size=round_half_away(node_fraction * n), replace=False))
    if (g.labels[selected] < 0).any():
        raise ValidationError("cross-category injection needs labels for every selected node")
    need = round_half_away(ratio * g.num_edges)

    if both_endpoints:
        iu, ju = np.triu_indices(len(selected), k=1)
        u, v = selected[iu], selected[ju]
    else:
        if (g.labels < 0).any():
            raise ValidationError("cross-category injection needs labels for every node")
        u = np.repeat(selected, n)
        v = np.tile(np.arange(n), len(selected))
        u, v = np.minimum(u, v), np.maximum(u, v)
        keep = u != v
        codes = np.unique(u[keep] * n + v[keep])
        u, v = codes // n, codes % n
    cross = g.labels[u] != g.labels[v]
    u, v = u[cross], v[cross]
    existing = g.edge_list()
    taken = np.isin(u * n + v, existing[:, 0] * n + existing[:, 1])
    u, v = u[~taken], v[~taken]
    if len(u) < need:
        raise GenerationError(
            f"need {need} cross-category edges but only {len(u)} legal pairs exist "
            f"(shortfall {need - len(u)})"
        )
    pick = np.sort(rng.choice(len(u), size=need, replace=False))
    added = np.stack([u[pick], v[pick]], axis=1)
    return g.with_edges(np.concatenate([existing, added]))


def _parse_error(path, lineno, msg):
    return GraphFormatError(f"{path}:{lineno}: {msg}")


def read_edges(path) -> np.ndarray:
    edges = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) != 2:
                raise _parse_error(path, lineno, f"expected two node ids, got {line.strip()!r}")
            try:
                edges.append((int(parts[0]), int(parts[1])))
            except ValueError:
                raise _parse_error(path, lineno, f"non-integer node id in {line.strip()!r}") from None
    return np.asarray(edges, dtype=np.int64).reshape(-1, 2)


def read_features(path) -> np.ndarray:
    rows = []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = [float(x) for x in line.split(",")]
            except ValueError:
                raise _parse_error(path, lineno, "non-numeric feature value") from None
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise _parse_error(path, lineno, f"expected {width} columns, got {len(row)}")
            rows.append(row)
    return np.asarray(rows, dtype=np.float64).reshape(len(rows), width or 0)


def read_labels(path) -> np.ndarray:
    labels = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                labels.append(int(line))
            except ValueError:
                raise _parse_error(path, lineno, f"non-integer label {line!r}") from None
    return np.asarray(labels, dtype=np.int64)


def read_splits(path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise _parse_error(path, exc.lineno, exc.msg) from None
    out = {}
    for key in ("train", "valid", "test"):
        vals = raw.get(key, [])
        if not isinstance(vals, list) or not all(isinstance(v, int) for v in vals):
            raise GraphFormatError(f"{path}: '{key}' must be an array of integers")
        out[key] = np.asarray(vals, dtype=np.int64)
    return out


def load_graph(edge_path, feature_path, label_path, split_path, num_classes=None) -> Graph:
    """Read a graph from the four-file on-disk format.

    Self-loops and duplicate edges are dropped; the number dropped is logged.
    """
    edges = read_edges(edge_path)
    features = read_features(feature_path)
    labels = read_labels(label_path)
    splits = read_splits(split_path)
    n = features.shape[0]
    if len(labels) != n:
        raise ValidationError(f"{label_path}: {len(labels)} labels but {feature_path} has {n} rows")
    if len(edges) and (edges.min() < 0 or edges.max() >= n):
        raise ValidationError(f"{edge_path}: node id out of range for {n} nodes")
    if num_classes is not None and len(labels) and labels.max() >= num_classes:
        raise ValidationError(f"{label_path}: label {labels.max()} out of range [-1, {num_classes})")
    if len(labels) and labels.min() < -1:
        raise ValidationError(f"{label_path}: label {labels.min()} out of range")
    for key, idx in splits.items():
        if len(idx) and (idx.min() < 0 or idx.max() >= n):
            raise ValidationError(f"{split_path}: {key} index out of range for {n} nodes")
    g = Graph.from_edges(edges, features, labels, num_classes=num_classes, **splits)
    dropped = len(edges) - g.num_edges
    if dropped:
        log.warning("dropped %d self-loop or duplicate edges from %s", dropped, edge_path)
    return g


def save_graph(g: Graph, directory) -> dict:
    """Write ``g`` in the four-file format; returns the paths written."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {
        "edges": d / "edges.txt",
        "features": d / "features.csv",
        "labels": d / "labels.txt",
        "splits": d / "splits.json",
    }
    np.savetxt(paths["edges"], g.edge_list(), fmt="%d")
    np.savetxt(paths["features"], g.features, delimiter=",", fmt="%.17g")
    np.savetxt(paths["labels"], g.labels, fmt="%d")
    with open(paths["splits"], "w") as fh:
        json.dump({k: getattr(g, k).tolist() for k in ("train", "valid", "test")}, fh)
    return {k: str(v) for k, v in paths.items()}
