"""Kernel SVM dual solved by sequential minimal optimization.

The dual is ``min 1/2 a'Qa - sum(a)`` s.t. ``0 <= a <= C`` and ``y'a = 0`` with
``Q = (y y') * K``. Working pairs are picked with the second-order rule of Fan,
Chen and Lin (2005); iteration stops once the maximal violating pair gap drops
below ``tol``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SolverError, ValidationError


def rbf_kernel(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.exp(-gamma * np.maximum(sq, 0.0))


@dataclass
class SmoResult:
    alpha: np.ndarray
    bias: float
    iterations: int
    gap: float


def smo_solve(K: np.ndarray, y: np.ndarray, C: float, tol: float = 1e-3,
              max_iter: int = 100_000) -> SmoResult:
    y = np.asarray(y, dtype=np.float64)
    if set(np.unique(y)) - {-1.0, 1.0}:
        raise ValidationError("labels must be +1/-1")
    if C <= 0:
        raise ValidationError("C must be positive")
    n = len(y)
    alpha = np.zeros(n)
    grad = -np.ones(n)
    diag = np.diag(K).copy()
    pos = y > 0
    gap = np.inf
    for it in range(max_iter):
        # F_t = -y_t * grad_t; optimal iff max over I_up <= min over I_low
        F = -y * grad
        up = np.where(pos, alpha < C, alpha > 0)
        low = np.where(pos, alpha > 0, alpha < C)
        if not up.any() or not low.any():
            gap = 0.0
            break
        i = int(np.flatnonzero(up)[np.argmax(F[up])])
        m_up = F[i]
        m_low = F[low].min()
        gap = m_up - m_low
        if gap < tol:
            break
        cand = low & (F < m_up)
        b = m_up - F
        a = diag[i] + diag - 2.0 * K[i]
        a = np.where(a > 1e-12, a, 1e-12)
        score = np.full(n, np.inf)
        score[cand] = -(b[cand] ** 2) / a[cand]
        j = int(np.argmin(score))
        # move a_i by +y_i*lam and a_j by -y_j*lam, keeping y'a fixed
        lam = b[j] / a[j]
        lim_i = C - alpha[i] if y[i] > 0 else alpha[i]
        lim_j = alpha[j] if y[j] > 0 else C - alpha[j]
        lam = min(lam, lim_i, lim_j)
        ai = alpha[i] + y[i] * lam
        aj = alpha[j] - y[j] * lam
        if lam == lim_i:
            ai = C if y[i] > 0 else 0.0
        if lam == lim_j:
            aj = 0.0 if y[j] > 0 else C
        di, dj = ai - alpha[i], aj - alpha[j]
        alpha[i], alpha[j] = ai, aj
        grad += y * (K[:, i] * (y[i] * di) + K[:, j] * (y[j] * dj))
    else:
        raise SolverError(f"SMO did not converge in {max_iter} iterations (gap {gap:.3g}, tol {tol})")
    F = -y * grad
    free = (alpha > 0) & (alpha < C)
    if free.any():
        bias = float(F[free].mean())
    else:
        up = np.where(pos, alpha < C, alpha > 0)
        low = np.where(pos, alpha > 0, alpha < C)
        hi = F[up].max() if up.any() else F[low].min()
        lo = F[low].min() if low.any() else hi
        bias = float((hi + lo) / 2.0)
    return SmoResult(alpha, bias, it, float(gap))


def dual_objective(alpha: np.ndarray, K: np.ndarray, y: np.ndarray) -> float:
    ay = alpha * y
    return float(0.5 * ay @ K @ ay - alpha.sum())


def kkt_violations(alpha: np.ndarray, K: np.ndarray, y: np.ndarray, bias: float, C: float,
                   atol: float = 1e-12) -> np.ndarray:
    """Per-point violation of the margin conditions for the given solution."""
    yf = y * (K @ (alpha * y) + bias)
    at_zero = alpha <= atol
    at_c = alpha >= C - atol
    v = np.abs(yf - 1.0)
    v[at_zero] = np.maximum(0.0, 1.0 - yf[at_zero])
    v[at_c] = np.maximum(0.0, yf[at_c] - 1.0)
    return v
