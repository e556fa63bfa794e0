"""Planted-partition graphs with class-correlated Gaussian features."""

from __future__ import annotations

import numpy as np

from .graph import Graph


def planted_partition(n: int = 1500, num_classes: int = 6, avg_degree: float = 1.5,
                      homophily: float = 0.85, feature_dim: int = 32, feature_signal: float = 0.5,
                      train_per_class: int = 20, n_valid: int = 500, seed: int = 0) -> Graph:
    """Stochastic block model with equal-size blocks.

    Edge probabilities are set so that the expected degree is ``avg_degree`` and an
    expected ``homophily`` fraction of edges is intra-class. Node features are
    ``signal * mu[label] + N(0, I)`` with class means ``mu ~ N(0, I)``. The split is
    ``train_per_class`` labeled nodes per class, ``n_valid`` validation nodes and
    the rest as test; every node keeps its true label.
    """
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % num_classes)
    size = n / num_classes
    p_in = homophily * avg_degree / (size - 1)
    p_out = (1.0 - homophily) * avg_degree / (n - size)

    iu, ju = np.triu_indices(n, k=1)
    same = labels[iu] == labels[ju]
    prob = np.where(same, p_in, p_out)
    hit = rng.random(len(iu)) < prob
    edges = np.stack([iu[hit], ju[hit]], axis=1)

    means = rng.normal(size=(num_classes, feature_dim))
    features = feature_signal * means[labels] + rng.normal(size=(n, feature_dim))

    train = np.concatenate([
        rng.choice(np.flatnonzero(labels == c), size=train_per_class, replace=False)
        for c in range(num_classes)
    ])
    rest = np.setdiff1d(np.arange(n), train)
    rest = rest[rng.permutation(len(rest))]
    valid, test = np.sort(rest[:n_valid]), np.sort(rest[n_valid:])
    return Graph.from_edges(edges, features, labels, num_classes=num_classes,
                            train=np.sort(train), valid=valid, test=test)
