"""Adam training loop for the watermark network and the binary checkpoint format."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .core import MASK64, DimMap, InvalidArgument, build_dim_map
from .net import LossConfig, NetParams, forward, gamma_scale, init_params, mean_similarity, shape_transform, target_similarity, total_loss_parts

log = logging.getLogger(__name__)

MAGIC = b"SIRW"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagic(CheckpointError):
    pass


class UnknownVersion(CheckpointError):
    pass


class TruncatedCheckpoint(CheckpointError):
    pass


class ChecksumMismatch(CheckpointError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-5
    lr_schedule: str = "constant"  # constant | cosine
    lr_min: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    hidden_dim: Optional[int] = None
    num_layers: int = 4
    out_dim: int = 1000
    vocab_size: int = 1000
    dim_map_seed: int = 0
    heldout_frac: float = 0.1
    mean_sim: str = "batch"  # batch | corpus
    corpus_path: Optional[str] = None

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if self.batch_size < 2:
            raise InvalidArgument("batch_size must be >= 2")
        if self.lr < 0:
            raise InvalidArgument("lr must be non-negative")
        if self.lr_schedule not in ("constant", "cosine"):
            raise InvalidArgument("lr_schedule must be 'constant' or 'cosine'")
        if self.mean_sim not in ("batch", "corpus"):
            raise InvalidArgument("mean_sim must be 'batch' or 'corpus'")
        if not 0.0 <= self.heldout_frac < 1.0:
            raise InvalidArgument("heldout_frac must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = asdict(self.loss)
        return d


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: NetParams) -> "AdamState":
        return cls([np.zeros_like(a) for a in params.arrays()], [np.zeros_like(a) for a in params.arrays()])


def adam_step(
    params: NetParams,
    grads: NetParams,
    state: AdamState,
    t: int,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[NetParams, AdamState]:
    """One bias-corrected Adam update at step ``t`` (1-based)."""
    new_p, new_m, new_v = [], [], []
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, m, v in zip(params.arrays(), grads.arrays(), state.m, state.v):
        if p.shape != g.shape:
            raise InvalidArgument("gradient shape mismatch")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + eps))
        new_m.append(m)
        new_v.append(v)
    return NetParams.from_arrays(new_p), AdamState(new_m, new_v, t)


# --------------------------------------------------------------------------
# checkpoint
# --------------------------------------------------------------------------


def round_f32(params: NetParams) -> NetParams:
    return NetParams.from_arrays([a.astype(np.float32).astype(np.float64) for a in params.arrays()])


@dataclass(eq=False)
class Checkpoint:
    params: NetParams
    loss: LossConfig
    dmap: DimMap

    def __post_init__(self):
        self.params = round_f32(self.params)
        if self.dmap.out_dim != self.params.out_dim:
            raise InvalidArgument("DimMap out_dim does not match the network output dim")

    def to_bytes(self) -> bytes:
        p = self.params
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<IIIII", FORMAT_VERSION, p.input_dim, p.hidden_dim, p.out_dim, p.num_layers))
        L = self.loss
        buf.write(struct.pack("<6dB", L.k1, L.k2, L.lambda1, L.lambda2, L.R, L.gamma, int(L.include_self_pairs)))
        buf.write(struct.pack("<QII", self.dmap.seed & MASK64, self.dmap.out_dim, self.dmap.vocab_size))
        for a in p.arrays():
            buf.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
        body = buf.getvalue()
        return body + struct.pack("<Q", _checksum(body))

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        head = 4 + 20 + 49 + 16
        if len(data) < 4 or data[:4] != MAGIC:
            if len(data) < 4:
                raise TruncatedCheckpoint("file shorter than the magic header")
            raise BadMagic(f"bad magic {data[:4]!r}")
        if len(data) < 8:
            raise TruncatedCheckpoint("file ends inside the header")
        (version,) = struct.unpack_from("<I", data, 4)
        if version != FORMAT_VERSION:
            raise UnknownVersion(f"unknown checkpoint format version {version}")
        if len(data) < head + 8:
            raise TruncatedCheckpoint("file ends inside the header")
        _, d, h, o, nl = struct.unpack_from("<IIIII", data, 4)
        shapes = [(d, h)] + [(h, h)] * (nl - 2) + [(h, o)]
        n_floats = sum(a * b + b for a, b in shapes)
        expected = head + 4 * n_floats + 8
        if len(data) < expected:
            raise TruncatedCheckpoint(f"expected {expected} bytes, got {len(data)}")
        if len(data) > expected:
            raise CheckpointError(f"trailing bytes after checksum ({len(data) - expected})")
        body, (stored,) = data[:-8], struct.unpack("<Q", data[-8:])
        if _checksum(body) != stored:
            raise ChecksumMismatch("checkpoint checksum mismatch")
        k1, k2, l1, l2, R, gamma, inc = struct.unpack_from("<6dB", data, 24)
        seed, dm_out, vocab = struct.unpack_from("<QII", data, 24 + 49)
        off = head
        arrays = []
        for fan_in, fan_out in shapes:
            W = np.frombuffer(data, dtype="<f4", count=fan_in * fan_out, offset=off).reshape(fan_in, fan_out)
            off += 4 * W.size
            b = np.frombuffer(data, dtype="<f4", count=fan_out, offset=off)
            off += 4 * b.size
            arrays += [W.astype(np.float64), b.astype(np.float64)]
        loss = LossConfig(k1=k1, k2=k2, lambda1=l1, lambda2=l2, R=R, gamma=gamma, include_self_pairs=bool(inc))
        return cls(NetParams.from_arrays(arrays), loss, build_dim_map(vocab, dm_out, seed))

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def _checksum(body: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(body, digest_size=8).digest(), "little")


def atomic_write_bytes(path, data: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(ckpt: Checkpoint, path) -> None:
    atomic_write_bytes(path, ckpt.to_bytes())


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return Checkpoint.from_bytes(fh.read())


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------


def split_heldout(n: int, frac: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.Generator(np.random.PCG64(seed)).permutation(n)
    n_held = int(round(n * frac))
    return np.sort(perm[n_held:]), np.sort(perm[:n_held])


def evaluate(params: NetParams, E: np.ndarray, cfg: TrainConfig, corpus_mean: Optional[float]) -> dict:
    """Mean per-batch losses over ``E`` in fixed order."""
    parts = []
    B = cfg.batch_size
    for i in range(0, len(E) - 1, B):
        batch = E[i : i + B]
        if len(batch) < 2:
            break
        lp, _ = total_loss_parts(params, batch, corpus_mean, cfg.loss)
        parts.append((lp.similarity, lp.normalization, lp.total))
    if not parts:
        return {"L_s": float("nan"), "L_n": float("nan"), "L": float("nan")}
    a = np.mean(parts, axis=0)
    return {"L_s": float(a[0]), "L_n": float(a[1]), "L": float(a[2])}


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict]
    train_idx: np.ndarray
    heldout_idx: np.ndarray
    corpus_mean_sim: float


def learning_rate(cfg: TrainConfig, step: int, total_steps: int) -> float:
    """Learning rate for 0-based ``step``; cosine decays from ``lr`` to ``lr_min``."""
    if cfg.lr_schedule == "constant" or total_steps <= 1:
        return cfg.lr
    frac = min(step / (total_steps - 1), 1.0)
    return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + math.cos(math.pi * frac))


def train(cfg: TrainConfig, embeddings: np.ndarray, init: Optional[NetParams] = None) -> TrainResult:
    """Train on an ``(n, d)`` embedding matrix. Deterministic given ``cfg.seed``."""
    E = np.asarray(embeddings, dtype=np.float64)
    if E.ndim != 2 or len(E) < cfg.batch_size:
        raise InvalidArgument(f"need at least batch_size={cfg.batch_size} embeddings")
    if np.any(np.linalg.norm(E, axis=1) == 0):
        raise InvalidArgument("corpus contains a zero-norm embedding")
    tr, ho = split_heldout(len(E), cfg.heldout_frac, cfg.seed)
    Etr, Eho = E[tr], E[ho]
    d = E.shape[1]
    params = init if init is not None else init_params(d, cfg.out_dim, cfg.hidden_dim, cfg.num_layers, seed=cfg.seed)
    if params.input_dim != d:
        raise InvalidArgument(f"corpus dim {d} != network input dim {params.input_dim}")
    corpus_mean = _corpus_mean(Etr)
    fixed_mean = corpus_mean if cfg.mean_sim == "corpus" else None
    state = AdamState.zeros(params)
    history = []

    def snapshot(epoch):
        rec = {"epoch": epoch}
        rec.update({f"train_{k}": v for k, v in evaluate(params, Etr, cfg, fixed_mean).items()})
        if len(Eho) >= 2:
            rec.update({f"heldout_{k}": v for k, v in evaluate(params, Eho, cfg, fixed_mean).items()})
        return rec

    history.append(snapshot(0))
    t = 0
    B = cfg.batch_size
    total_steps = cfg.epochs * sum(1 for s in range(0, len(Etr), B) if len(Etr) - s >= 2)
    for epoch in range(1, cfg.epochs + 1):
        order = np.random.Generator(np.random.PCG64([cfg.seed, epoch])).permutation(len(Etr))
        for bi, start in enumerate(range(0, len(order), B)):
            idx = order[start : start + B]
            if len(idx) < 2:
                continue
            parts, grads = total_loss_parts(params, Etr[idx], fixed_mean, cfg.loss)
            if not math.isfinite(parts.total):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {bi}")
            lr = learning_rate(cfg, t, total_steps)
            t += 1
            params, state = adam_step(params, grads, state, t, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        rec = snapshot(epoch)
        history.append(rec)
        log.info("epoch %d: %s", epoch, json.dumps(rec))
    ckpt = Checkpoint(params, cfg.loss, build_dim_map(cfg.vocab_size, cfg.out_dim, cfg.dim_map_seed))
    return TrainResult(ckpt, history, tr, ho, corpus_mean)


def _corpus_mean(E: np.ndarray, max_rows: int = 4000) -> float:
    return mean_similarity(E[:max_rows])


# --------------------------------------------------------------------------
# release gates
# --------------------------------------------------------------------------


@dataclass
class GateReport:
    """Post-training checks on held-out embeddings; a checkpoint is released only if all pass."""

    gamma: float
    dim_mean_max: float  # max over dims of |mean of S(tanh(k2 T(e)))|
    pos_frac_min: float
    pos_frac_max: float
    pearson: float
    close_pairs: int
    close_cos_min: float
    tol: float = 0.05

    @property
    def checks(self) -> dict:
        return {
            "dim_mean": self.dim_mean_max <= self.tol,
            "pos_frac": self.gamma - self.tol <= self.pos_frac_min and self.pos_frac_max <= self.gamma + self.tol,
            "pearson": self.pearson >= 0.85,
            "close_pairs": self.close_pairs == 0 or self.close_cos_min >= 0.8,
        }

    @property
    def passed(self) -> bool:
        return all(self.checks.values())


def check_gates(
    ckpt: Checkpoint, heldout: np.ndarray, corpus_mean_sim: float, n_pairs: int = 1000, seed: int = 1, tol: float = 0.05
) -> GateReport:
    """Balance and similarity-correlation gates on held-out embeddings.

    Balance is measured on the saturated logits ``tanh(k2 T(e))`` after the
    gamma scaling ``S``; the correlation compares the target similarity with
    the cosine of the same saturated logits over ``n_pairs`` random distinct
    pairs.
    """
    H = np.asarray(heldout, dtype=np.float64)
    if len(H) < 2:
        raise InvalidArgument("need at least two held-out embeddings")
    L = ckpt.loss
    raw = forward(ckpt.params, H)
    W = shape_transform(raw, "tanh_k2", L.k2)
    S = gamma_scale(W, L.gamma)
    pos = (S > 0).mean(axis=1)

    rng = np.random.Generator(np.random.PCG64(seed))
    i = rng.integers(0, len(H), 2 * n_pairs)
    j = rng.integers(0, len(H), 2 * n_pairs)
    keep = i != j
    i, j = i[keep][:n_pairs], j[keep][:n_pairs]
    Hn = H / np.linalg.norm(H, axis=1, keepdims=True)
    emb_cos = np.sum(Hn[i] * Hn[j], axis=1)
    W = W / np.linalg.norm(W, axis=1, keepdims=True)
    logit_cos = np.sum(W[i] * W[j], axis=1)
    r = float(np.corrcoef(target_similarity(emb_cos, corpus_mean_sim, L.k1), logit_cos)[0, 1])
    close = emb_cos >= 0.95
    return GateReport(
        L.gamma,
        float(np.abs(S.mean(axis=0)).max()),
        float(pos.min()),
        float(pos.max()),
        r,
        int(close.sum()),
        float(logit_cos[close].min()) if close.any() else float("nan"),
        tol,
    )
