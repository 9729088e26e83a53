"""Watermark network: residual MLP, hand-written backward pass, losses, and output transforms."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import Embedding, InvalidArgument, WatermarkLogits

SHAPE_KINDS = ("tanh_k2", "linear", "tanh10_linear", "cubic")


@dataclass(frozen=True)
class LossConfig:
    k1: float = 20.0
    k2: float = 1000.0
    lambda1: float = 10.0
    lambda2: float = 0.1
    R: float = 0.1
    gamma: float = 0.5
    include_self_pairs: bool = False

    def __post_init__(self):
        if self.k1 <= 0 or self.k2 <= 0:
            raise InvalidArgument("k1 and k2 must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise InvalidArgument("lambda1 and lambda2 must be non-negative")
        if not 0.0 < self.gamma < 1.0:
            raise InvalidArgument(f"gamma must lie in (0, 1), got {self.gamma}")


@dataclass(eq=False)
class NetParams:
    """Weights in layer order: input (d->h), residual blocks (h->h), output (h->out).

    Each layer is stored as ``(W, b)`` with ``W`` shaped ``(fan_in, fan_out)``.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or len(self.weights) < 2:
            raise InvalidArgument("need at least input and output layers")
        h = self.weights[0].shape[1]
        for W, b in zip(self.weights, self.biases):
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise InvalidArgument("inconsistent layer shapes")
        for W in self.weights[1:-1]:
            if W.shape != (h, h):
                raise InvalidArgument("residual blocks must be square in the hidden dim")
        if self.weights[-1].shape[0] != h:
            raise InvalidArgument("output layer fan-in must equal hidden dim")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def arrays(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    @classmethod
    def from_arrays(cls, arrays: list[np.ndarray]) -> "NetParams":
        return cls(list(arrays[0::2]), list(arrays[1::2]))

    def copy(self) -> "NetParams":
        return NetParams([W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> "NetParams":
        return NetParams([np.zeros_like(W) for W in self.weights], [np.zeros_like(b) for b in self.biases])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec: np.ndarray) -> "NetParams":
        out, i = [], 0
        for a in self.arrays():
            out.append(np.asarray(vec[i : i + a.size], dtype=np.float64).reshape(a.shape))
            i += a.size
        return NetParams.from_arrays(out)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


def init_params(
    input_dim: int,
    out_dim: int,
    hidden_dim: Optional[int] = None,
    num_layers: int = 4,
    seed: int = 0,
) -> NetParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for every weight and bias."""
    if num_layers < 2:
        raise InvalidArgument("num_layers must be >= 2")
    hidden_dim = hidden_dim or input_dim
    rng = np.random.Generator(np.random.PCG64(seed))
    dims = [(input_dim, hidden_dim)] + [(hidden_dim, hidden_dim)] * (num_layers - 2) + [(hidden_dim, out_dim)]
    Ws, bs = [], []
    for fan_in, fan_out in dims:
        bound = 1.0 / np.sqrt(fan_in)
        Ws.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        bs.append(rng.uniform(-bound, bound, size=fan_out))
    return NetParams(Ws, bs)


def zero_params(input_dim: int, out_dim: int, hidden_dim: Optional[int] = None, num_layers: int = 4) -> NetParams:
    hidden_dim = hidden_dim or input_dim
    dims = [(input_dim, hidden_dim)] + [(hidden_dim, hidden_dim)] * (num_layers - 2) + [(hidden_dim, out_dim)]
    return NetParams([np.zeros(d) for d in dims], [np.zeros(d[1]) for d in dims])


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------


def _as_batch(params: NetParams, x) -> tuple[np.ndarray, bool]:
    if isinstance(x, Embedding):
        x = x.values
    elif isinstance(x, (list, tuple)) and x and isinstance(x[0], Embedding):
        x = np.stack([e.values for e in x])
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != params.input_dim:
        raise InvalidArgument(f"embedding dim {X.shape[-1]} does not match network input dim {params.input_dim}")
    return X, single


def forward_batch(params: NetParams, X: np.ndarray) -> tuple[np.ndarray, list]:
    cache = []
    h = X @ params.weights[0] + params.biases[0]
    cache.append(X)
    for W, b in zip(params.weights[1:-1], params.biases[1:-1]):
        a = h @ W + b
        cache.append((h, a))
        h = np.maximum(a, 0.0) + h
    cache.append(h)
    Y = h @ params.weights[-1] + params.biases[-1]
    return Y, cache


def _forward_vec(params: NetParams, x: np.ndarray) -> np.ndarray:
    h = x @ params.weights[0] + params.biases[0]
    for W, b in zip(params.weights[1:-1], params.biases[1:-1]):
        h = np.maximum(h @ W + b, 0.0) + h
    return h @ params.weights[-1] + params.biases[-1]


def forward(params: NetParams, e) -> np.ndarray:
    """Raw watermark-network outputs for one embedding (1-D) or a batch (2-D).

    Rows are evaluated one at a time so a row's output never depends on what
    else is in the batch (generation and detection must agree bit for bit).
    Training uses :func:`forward_batch` instead.
    """
    X, single = _as_batch(params, e)
    if single:
        return _forward_vec(params, X[0])
    return np.stack([_forward_vec(params, x) for x in X]) if len(X) else np.zeros((0, params.out_dim))


def backward_batch(params: NetParams, cache: list, dY: np.ndarray) -> NetParams:
    n = params.num_layers
    gW: list = [None] * n
    gb: list = [None] * n
    h_last = cache[-1]
    gW[-1] = h_last.T @ dY
    gb[-1] = dY.sum(axis=0)
    dh = dY @ params.weights[-1].T
    for k in range(n - 2, 0, -1):
        h_prev, a = cache[k]
        da = dh * (a > 0)
        gW[k] = h_prev.T @ da
        gb[k] = da.sum(axis=0)
        dh = dh + da @ params.weights[k].T
    X = cache[0]
    gW[0] = X.T @ dh
    gb[0] = dh.sum(axis=0)
    return NetParams(gW, gb)


# --------------------------------------------------------------------------
# output transforms
# --------------------------------------------------------------------------


def tanh_scale(raw, k2: float = 1000.0) -> WatermarkLogits:
    return WatermarkLogits(np.tanh(k2 * np.asarray(raw, dtype=np.float64)), "tanh_k2")


def linear_rank_scale(raw) -> np.ndarray:
    x = np.asarray(raw, dtype=np.float64)
    n = x.shape[-1]
    if n < 2:
        raise InvalidArgument("linear rank scaling needs at least two entries")
    ranks = np.argsort(np.argsort(x, axis=-1, kind="stable"), axis=-1, kind="stable")
    return -1.0 + 2.0 * ranks / (n - 1)


def shape_transform(raw, kind: str, k2: float = 1000.0) -> np.ndarray:
    """Map raw outputs to watermark logits with max |value| (approximately) 1.

    Works row-wise on 2-D input.
    """
    x = np.asarray(raw, dtype=np.float64)
    if kind == "tanh_k2":
        return np.tanh(k2 * x)
    if kind == "linear":
        return linear_rank_scale(x)
    if kind == "tanh10_linear":
        return np.tanh(10.0 * linear_rank_scale(x))
    if kind == "cubic":
        return linear_rank_scale(x) ** 3
    if kind == "raw":
        return x
    raise InvalidArgument(f"unknown transform kind {kind!r}")


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def target_similarity(sim, mean_sim, k1: float = 20.0):
    return np.tanh(k1 * (np.asarray(sim) - mean_sim))


def gamma_scale(v, gamma: float) -> np.ndarray:
    if not 0.0 < gamma < 1.0:
        raise InvalidArgument(f"gamma must lie in (0, 1), got {gamma}")
    v = np.asarray(v, dtype=np.float64)
    return np.where(v > 0, (1.0 - gamma) / gamma * v, v)


def _gamma_slope(v: np.ndarray, gamma: float) -> np.ndarray:
    return np.where(v > 0, (1.0 - gamma) / gamma, 1.0)


def _unit_rows(M: np.ndarray, what: str, strict: bool) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(M, axis=1)
    if strict and np.any(norms == 0):
        raise InvalidArgument(f"zero-norm {what} in batch")
    safe = np.where(norms > 0, norms, 1.0)
    return M / safe[:, None], safe


def cosine_matrix(M: np.ndarray) -> np.ndarray:
    U, _ = _unit_rows(np.asarray(M, dtype=np.float64), "vector", strict=False)
    return U @ U.T


def pair_mask(n: int, include_self: bool) -> np.ndarray:
    return np.ones((n, n)) if include_self else 1.0 - np.eye(n)


def mean_similarity(E: np.ndarray, include_self: bool = False) -> float:
    C = cosine_matrix(E)
    mask = pair_mask(len(C), include_self)
    return float((C * mask).sum() / mask.sum())


def similarity_loss_on_outputs(
    Y: np.ndarray, E: np.ndarray, mean_sim: Optional[float], cfg: LossConfig
) -> tuple[float, np.ndarray]:
    """Similarity loss as a function of the raw output batch; returns (loss, dL/dY)."""
    if len(E) < 2:
        raise InvalidArgument("similarity loss needs a batch of at least two embeddings")
    En, _ = _unit_rows(np.asarray(E, dtype=np.float64), "embedding", strict=True)
    sims = En @ En.T
    mask = pair_mask(len(E), cfg.include_self_pairs)
    if mean_sim is None:
        mean_sim = float((sims * mask).sum() / mask.sum())
    target = target_similarity(sims, mean_sim, cfg.k1)

    V = gamma_scale(Y, cfg.gamma) if cfg.gamma != 0.5 else Y
    Vn, vnorm = _unit_rows(V, "output", strict=False)
    C = Vn @ Vn.T
    D = (C - target) * mask
    loss = float(np.abs(D).sum())

    dC = np.sign(D)
    dVn = (dC + dC.T) @ Vn
    dV = (dVn - np.sum(dVn * Vn, axis=1, keepdims=True) * Vn) / vnorm[:, None]
    dY = dV * _gamma_slope(Y, cfg.gamma) if cfg.gamma != 0.5 else dV
    return loss, dY


def normalization_loss_on_outputs(Y: np.ndarray, cfg: LossConfig) -> tuple[float, np.ndarray]:
    V = gamma_scale(Y, cfg.gamma) if cfg.gamma != 0.5 else Y
    row = V.sum(axis=1)
    col = V.sum(axis=0)
    mag = cfg.R - np.abs(Y)
    loss = float(np.abs(row).sum() + np.abs(col).sum() + cfg.lambda1 * np.abs(mag).sum())
    dV = np.sign(row)[:, None] + np.sign(col)[None, :]
    dY = dV * _gamma_slope(Y, cfg.gamma) - cfg.lambda1 * np.sign(mag) * np.sign(Y)
    return loss, dY


def _embedding_batch(batch) -> np.ndarray:
    if isinstance(batch, np.ndarray):
        return np.asarray(batch, dtype=np.float64)
    return np.stack([e.values if isinstance(e, Embedding) else np.asarray(e, dtype=np.float64) for e in batch])


def similarity_loss(params: NetParams, batch, mean_sim: Optional[float], cfg: LossConfig) -> tuple[float, NetParams]:
    E = _embedding_batch(batch)
    X, _ = _as_batch(params, E)
    Y, cache = forward_batch(params, X)
    loss, dY = similarity_loss_on_outputs(Y, X, mean_sim, cfg)
    return loss, backward_batch(params, cache, dY)


def normalization_loss(params: NetParams, batch, cfg: LossConfig) -> tuple[float, NetParams]:
    E = _embedding_batch(batch)
    X, _ = _as_batch(params, E)
    Y, cache = forward_batch(params, X)
    loss, dY = normalization_loss_on_outputs(Y, cfg)
    return loss, backward_batch(params, cache, dY)


@dataclass
class LossParts:
    similarity: float
    normalization: float
    total: float = field(init=False)
    lambda2: float = 0.1

    def __post_init__(self):
        self.total = self.similarity + self.lambda2 * self.normalization


def total_loss_parts(
    params: NetParams, batch, mean_sim: Optional[float], cfg: LossConfig
) -> tuple[LossParts, NetParams]:
    E = _embedding_batch(batch)
    X, _ = _as_batch(params, E)
    Y, cache = forward_batch(params, X)
    ls, dYs = similarity_loss_on_outputs(Y, X, mean_sim, cfg)
    ln, dYn = normalization_loss_on_outputs(Y, cfg)
    grads = backward_batch(params, cache, dYs + cfg.lambda2 * dYn)
    return LossParts(ls, ln, cfg.lambda2), grads


def total_loss(params: NetParams, batch, mean_sim: Optional[float], cfg: LossConfig) -> tuple[float, NetParams]:
    parts, grads = total_loss_parts(params, batch, mean_sim, cfg)
    return parts.total, grads
