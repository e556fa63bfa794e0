"""Two-layer perceptron, softmax cross-entropy, Adam and gradient checking in numpy."""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import NumericalError, ValidationError

BLOCKS = ("w1", "b1", "w2", "b2")
CHECKPOINT_VERSION = 1


@dataclass
class MlpParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, d_in: int, hidden: int, d_out: int, rng: np.random.Generator) -> "MlpParams":
        """Glorot-uniform weights, zero biases."""
        def glorot(fan_in, fan_out):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-limit, limit, size=(fan_in, fan_out))
        return cls(glorot(d_in, hidden), np.zeros(hidden), glorot(hidden, d_out), np.zeros(d_out))

    @classmethod
    def zeros_like(cls, other: "MlpParams") -> "MlpParams":
        return cls(*(np.zeros_like(getattr(other, k)) for k in BLOCKS))

    def blocks(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "MlpParams":
        return MlpParams(*(getattr(self, k).copy() for k in BLOCKS))

    @property
    def shapes(self):
        return {k: list(v.shape) for k, v in self.blocks().items()}


@dataclass
class OptState:
    """Adam moments, shaped like the parameters (an MlpParams or a dict of arrays)."""

    m: MlpParams | dict
    v: MlpParams | dict
    step: int = 0

    @classmethod
    def for_params(cls, params) -> "OptState":
        if isinstance(params, MlpParams):
            return cls(MlpParams.zeros_like(params), MlpParams.zeros_like(params), 0)
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()}, 0)


@dataclass
class ForwardCache:
    x: np.ndarray
    input_mask: np.ndarray | None
    pre: np.ndarray
    hidden_mask: np.ndarray | None
    hidden: np.ndarray


def _dropout_mask(shape, rate, rng):
    if rate <= 0.0:
        return None
    return (rng.random(shape) >= rate) / (1.0 - rate)


def mlp_forward(params: MlpParams, x: np.ndarray, dropout_rate: float = 0.0, train: bool = False,
                rng: np.random.Generator | None = None):
    """Return ``(hidden, logits, cache)``.

    In train mode inverted dropout is applied to the input and to the hidden
    layer; eval mode is deterministic.
    """
    if x.ndim != 2 or x.shape[1] != params.w1.shape[0]:
        raise ValidationError(f"input has shape {x.shape}, expected (n, {params.w1.shape[0]})")
    if not 0.0 <= dropout_rate < 1.0:
        raise ValidationError(f"dropout_rate must lie in [0, 1), got {dropout_rate}")
    in_mask = hid_mask = None
    if train and dropout_rate > 0.0:
        if rng is None:
            raise ValidationError("train-mode dropout needs an rng")
        in_mask = _dropout_mask(x.shape, dropout_rate, rng)
    xd = x * in_mask if in_mask is not None else x
    pre = xd @ params.w1 + params.b1
    hidden = np.maximum(pre, 0.0)
    if train and dropout_rate > 0.0:
        hid_mask = _dropout_mask(hidden.shape, dropout_rate, rng)
    hd = hidden * hid_mask if hid_mask is not None else hidden
    logits = hd @ params.w2 + params.b2
    return hidden, logits, ForwardCache(xd, in_mask, pre, hid_mask, hd)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray, index_set) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over ``index_set`` and its gradient w.r.t. ``logits``."""
    idx = np.asarray(index_set, dtype=np.int64)
    if len(idx) == 0:
        raise ValidationError("cross-entropy over an empty index set")
    y = labels[idx]
    if (y < 0).any():
        raise ValidationError("cross-entropy index set contains unlabeled nodes")
    logp = log_softmax(logits[idx])
    loss = -logp[np.arange(len(idx)), y].mean()
    d = np.zeros_like(logits)
    g = np.exp(logp)
    g[np.arange(len(idx)), y] -= 1.0
    d[idx] = g / len(idx)
    return float(loss), d


def l2_penalty(params: MlpParams, l2_lambda: float, l2_blocks=("w1",)) -> float:
    return float(l2_lambda * sum(np.sum(getattr(params, k) ** 2) for k in l2_blocks))


def mlp_backward(params: MlpParams, cache: ForwardCache, dlogits: np.ndarray,
                 l2_lambda: float = 0.0, l2_blocks=("w1",)) -> MlpParams:
    """Gradient of ``loss + l2_lambda * sum ||block||_F^2`` given dLoss/dLogits."""
    if dlogits.shape != (cache.hidden.shape[0], params.w2.shape[1]):
        raise ValidationError(f"dlogits has shape {dlogits.shape}, cache expects "
                              f"({cache.hidden.shape[0]}, {params.w2.shape[1]})")
    gw2 = cache.hidden.T @ dlogits
    gb2 = dlogits.sum(axis=0)
    dh = dlogits @ params.w2.T
    if cache.hidden_mask is not None:
        dh = dh * cache.hidden_mask
    dpre = dh * (cache.pre > 0)
    gw1 = cache.x.T @ dpre
    gb1 = dpre.sum(axis=0)
    grads = MlpParams(gw1, gb1, gw2, gb2)
    for k in l2_blocks:
        setattr(grads, k, getattr(grads, k) + 2.0 * l2_lambda * getattr(params, k))
    return grads


def adam_step(params, grads, state: OptState, lr: float = 0.01, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns ``(params, state)`` as new objects.

    Works on :class:`MlpParams` or on a dict of arrays.
    """
    p, g, m0, v0 = (_as_blocks(o) for o in (params, grads, state.m, state.v))
    for k, arr in g.items():
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"non-finite gradient in block '{k}'")
    t = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    for k in p:
        m = beta1 * m0[k] + (1.0 - beta1) * g[k]
        v = beta2 * v0[k] + (1.0 - beta2) * g[k] * g[k]
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        new_p[k] = p[k] - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[k], new_v[k] = m, v
    if isinstance(params, MlpParams):
        return MlpParams(**new_p), OptState(MlpParams(**new_m), MlpParams(**new_v), t)
    return new_p, OptState(new_m, new_v, t)


def _as_blocks(p):
    if isinstance(p, np.ndarray):
        return {"p": p}
    if isinstance(p, MlpParams):
        return p.blocks()
    return dict(p)


def finite_difference_check(loss_fn, params, grads, epsilon: float = 1e-6, n_coords: int = 200,
                            seed: int = 0) -> float:
    """Max relative error between ``grads`` and central differences of ``loss_fn``.

    ``params`` may be an ndarray, an :class:`MlpParams` or a dict of arrays; ``grads``
    must have the same structure. ``loss_fn`` is called with perturbed copies of
    ``params`` in that structure. At most ``n_coords`` coordinates are checked (all
    of them when there are fewer), drawn uniformly without replacement.
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in _as_blocks(params).items()}
    gblocks = _as_blocks(grads)
    coords = [(k, i) for k, v in base.items() for i in range(v.size)]
    rng = np.random.default_rng(seed)
    if len(coords) > n_coords:
        coords = [coords[j] for j in np.sort(rng.choice(len(coords), n_coords, replace=False))]

    def rebuild(blocks):
        if isinstance(params, np.ndarray):
            return blocks["p"]
        if isinstance(params, MlpParams):
            return MlpParams(**blocks)
        return blocks

    worst = 0.0
    for k, i in coords:
        flat = base[k].reshape(-1)
        old = flat[i]
        flat[i] = old + epsilon
        up = loss_fn(rebuild({b: a.copy() for b, a in base.items()}))
        flat[i] = old - epsilon
        down = loss_fn(rebuild({b: a.copy() for b, a in base.items()}))
        flat[i] = old
        g_n = (up - down) / (2.0 * epsilon)
        g_a = float(np.asarray(gblocks[k]).reshape(-1)[i])
        err = abs(g_a - g_n) / max(abs(g_a), abs(g_n), 1e-8)
        worst = max(worst, err)
    return worst


def save_params(params: MlpParams, path, header: dict | None = None) -> None:
    """Write ``<path>.json`` (header with shapes/offsets) and ``<path>.bin`` (float64 LE, row-major)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    offsets, off = {}, 0
    with open(path.with_suffix(".bin"), "wb") as fh:
        for k in BLOCKS:
            a = np.ascontiguousarray(getattr(params, k), dtype="<f8")
            fh.write(a.tobytes(order="C"))
            offsets[k] = off
            off += a.size
    meta = {
        "format": "cgi-gcn-mlp",
        "version": CHECKPOINT_VERSION,
        "dtype": "float64-le",
        "shapes": params.shapes,
        "offsets": offsets,
        "binary": path.with_suffix(".bin").name,
        **(header or {}),
    }
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_params(path) -> tuple[MlpParams, dict]:
    path = Path(path)
    with open(path.with_suffix(".json")) as fh:
        meta = json.load(fh)
    if meta.get("format") != "cgi-gcn-mlp" or meta.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint format/version")
    raw = np.fromfile(path.parent / meta["binary"], dtype="<f8")
    blocks = {}
    for k in BLOCKS:
        shape = tuple(meta["shapes"][k])
        size = int(np.prod(shape))
        blocks[k] = raw[meta["offsets"][k]:meta["offsets"][k] + size].reshape(shape).astype(np.float64)
    return MlpParams(**blocks), meta


__all__ = [
    "MlpParams", "OptState", "ForwardCache", "mlp_forward", "mlp_backward", "softmax",
    "log_softmax", "softmax_cross_entropy", "l2_penalty", "adam_step", "finite_difference_check",
    "save_params", "load_params",
]
