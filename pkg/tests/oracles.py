"""Independent reference computations used by the tests.

These deliberately avoid the package's sparse code paths: everything here is dense
numpy written from the definitions.
"""

import numpy as np


def dense_normalized(n, edges):
    a = np.eye(n)
    for u, v in edges:
        a[u, v] = a[v, u] = 1.0
    d = a.sum(1) ** -0.5
    return d[:, None] * a * d[None, :]


def dense_softmax(z):
    e = np.exp(z - z.max(1, keepdims=True))
    return e / e.sum(1, keepdims=True)


def dense_appnp_probs(logits, a_hat, alpha, k):
    z = logits.copy()
    for _ in range(k):
        z = (1 - alpha) * a_hat @ z + alpha * logits
    return dense_softmax(z)


def replay_uncertainty(logits, edges, alpha, k, tau, master_seed, k_mc, z_hat):
    """Recreate each edge-dropout sample from its own spawned stream and take the variance directly.

    ``edges`` must be listed in the order the sampler draws them (u < v, row-major).
    """
    n = logits.shape[0]
    seqs = np.random.SeedSequence(master_seed).spawn(k_mc)
    probs = []
    for s in seqs:
        keep = np.random.default_rng(s).random(len(edges)) >= tau
        kept = [e for e, m in zip(edges, keep) if m]
        probs.append(dense_appnp_probs(logits, dense_normalized(n, kept), alpha, k))
    probs = np.array(probs)
    mean = probs.sum(0) / k_mc
    var = ((probs - mean) ** 2).sum(0) / k_mc
    return var, var[np.arange(n), z_hat]


def _project(v, y, C):
    # Euclidean projection onto {0 <= a <= C, y'a = 0}: bisection on the multiplier
    lo, hi = -1.0, 1.0
    g = lambda mu: y @ np.clip(v - mu * y, 0, C)
    while g(lo) < 0:
        lo *= 2
    while g(hi) > 0:
        hi *= 2
    for _ in range(60):
        mid = (lo + hi) / 2
        if g(mid) > 0:
            lo = mid
        else:
            hi = mid
    return np.clip(v - (lo + hi) / 2 * y, 0, C)


def pg_dual(K, y, C, iters=1500):
    """Accelerated projected gradient on the SVM dual; returns (alpha, objective)."""
    Q = (y[:, None] * y[None, :]) * K
    step = 1.0 / np.linalg.eigvalsh(Q).max()
    a = np.zeros(len(y))
    z, t = a.copy(), 1.0
    for _ in range(iters):
        a_next = _project(z - step * (Q @ z - 1.0), y, C)
        t_next = (1 + np.sqrt(1 + 4 * t * t)) / 2
        z = a_next + (t - 1) / t_next * (a_next - a)
        a, t = a_next, t_next
    return a, 0.5 * a @ Q @ a - a.sum()
