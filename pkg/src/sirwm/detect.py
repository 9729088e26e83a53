"""Detection statistics, FPR-calibrated thresholds, and classification metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import DimMap, InvalidArgument, TokenSeq
from .embed import EmbeddingProvider
from .generate import KgwConfig, _green_mask, kgw_context
from .net import NetParams, forward, shape_transform


@dataclass
class DetectionResult:
    N: int
    z_mean: float
    z_std: float
    gamma: float = 0.5
    threshold: Optional[float] = None
    verdict: Optional[bool] = None
    scores: Optional[np.ndarray] = field(default=None, repr=False)

    def report(self, text_id: str = "", config_hash: str = "") -> dict:
        return {
            "text_id": text_id,
            "N": self.N,
            "z_mean": self.z_mean,
            "z_std": self.z_std,
            "threshold": self.threshold,
            "verdict": self.verdict,
            "config_hash": config_hash,
        }


def q_transform(p):
    return (np.asarray(p, dtype=np.float64) + 1.0) / 2.0


def z_mean_stat(scores) -> float:
    s = np.asarray(scores, dtype=np.float64)
    if len(s) == 0:
        raise InvalidArgument("nothing to score: the scored region is empty")
    return float(s.sum() / len(s))


def z_std_stat(scores, gamma: float = 0.5) -> float:
    s = np.asarray(scores, dtype=np.float64)
    n = len(s)
    if n == 0:
        raise InvalidArgument("nothing to score: the scored region is empty")
    return float((q_transform(s).sum() - gamma * n) / math.sqrt(n * (1.0 - gamma) * gamma))


def result_from_scores(scores, gamma: float = 0.5, threshold: Optional[float] = None, keep: bool = True) -> DetectionResult:
    s = np.asarray(scores, dtype=np.float64)
    if len(s) < 1:
        raise InvalidArgument("nothing to score: the scored region is empty")
    zm = z_mean_stat(s)
    verdict = None if threshold is None else bool(zm > threshold)
    return DetectionResult(len(s), zm, z_std_stat(s, gamma), gamma, threshold, verdict, s if keep else None)


def sir_token_scores(
    net: NetParams,
    provider: EmbeddingProvider,
    dmap: DimMap,
    tokens,
    prompt_len: int = 0,
    transform: str = "tanh_k2",
    k2: float = 1000.0,
    skip: Sequence[int] = (),
) -> np.ndarray:
    """Per-token watermark score of every token after the prompt.

    The embedding is recomputed at every position from the scored-region prefix.
    """
    toks = list(tokens.tokens if isinstance(tokens, TokenSeq) else tokens)
    if prompt_len < 0 or len(toks) - prompt_len < 1:
        raise InvalidArgument("nothing to score: the scored region is empty")
    body = toks[prompt_len:]
    E = provider.embed_prefixes(body)[:-1]
    raw = forward(net, E)
    wl = shape_transform(raw, transform, k2)
    dims = dmap.map[np.asarray(body, dtype=np.int64)]
    scores = wl[np.arange(len(body)), dims]
    if skip:
        keep = np.ones(len(body), dtype=bool)
        keep[list(skip)] = False
        scores = scores[keep]
    return scores


def score_text(
    net: NetParams,
    provider: EmbeddingProvider,
    dmap: DimMap,
    tokens,
    prompt_len: int = 0,
    transform: str = "tanh_k2",
    k2: float = 1000.0,
    gamma: float = 0.5,
    threshold: Optional[float] = None,
) -> DetectionResult:
    scores = sir_token_scores(net, provider, dmap, tokens, prompt_len, transform, k2)
    return result_from_scores(scores, gamma, threshold)


def kgw_token_scores(kcfg: KgwConfig, tokens, vocab_size: int, prompt_len: int = 0) -> np.ndarray:
    toks = [int(t) for t in (tokens.tokens if isinstance(tokens, TokenSeq) else tokens)]
    if len(toks) - prompt_len < 1:
        raise InvalidArgument("nothing to score: the scored region is empty")
    out = np.empty(len(toks) - prompt_len)
    for i, j in enumerate(range(prompt_len, len(toks))):
        mask = _green_mask(vocab_size, kcfg.gamma, kcfg.hash_seed, kgw_context(kcfg, toks[:j]))
        out[i] = 1.0 if mask[toks[j]] else -1.0
    return out


def score_kgw(kcfg: KgwConfig, tokens, vocab_size: int, prompt_len: int = 0, threshold=None) -> DetectionResult:
    return result_from_scores(kgw_token_scores(kcfg, tokens, vocab_size, prompt_len), kcfg.gamma, threshold)


# --------------------------------------------------------------------------
# thresholds and metrics
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Threshold:
    target_fpr: float
    cut: float
    n_calibration: int

    def positive(self, score: float) -> bool:
        return score > self.cut


def calibrate_threshold(null_scores, target_fpr: float, min_samples: int = 100) -> Threshold:
    """Cut at the empirical (1 - fpr) quantile ("higher" interpolation); positives are ``score > cut``."""
    s = np.asarray(null_scores, dtype=np.float64)
    if len(s) < min_samples:
        raise InvalidArgument(f"need at least {min_samples} null scores, got {len(s)}")
    if not 0.0 <= target_fpr <= 1.0:
        raise InvalidArgument("target_fpr must lie in [0, 1]")
    if target_fpr == 0.0:
        cut = float(np.nextafter(s.max(), np.inf))
    else:
        cut = float(np.quantile(s, 1.0 - target_fpr, method="higher"))
    return Threshold(target_fpr, cut, len(s))


@dataclass
class Metrics:
    tpr: Optional[float]
    fpr: Optional[float]
    f1: Optional[float]
    best_f1: float
    best_cut: float
    roc: list = field(repr=False, default_factory=list)


def _f1(tp, fp, fn):
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2 * tp / denom


def metrics(pos_scores, neg_scores, threshold=None) -> Metrics:
    """TPR/FPR/F1 at ``threshold`` (a :class:`Threshold` or a cut value), best F1 over
    all distinct cuts (positive iff score >= cut), and ROC points (fpr, tpr)."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if len(pos) == 0 or len(neg) == 0:
        raise InvalidArgument("metrics need nonempty positive and negative score lists")
    P, N = len(pos), len(neg)

    allv = np.concatenate([pos, neg])
    lab = np.concatenate([np.ones(P, dtype=bool), np.zeros(N, dtype=bool)])
    order = np.argsort(-allv, kind="stable")
    v, l = allv[order], lab[order]
    tp = np.cumsum(l)
    fp = np.cumsum(~l)
    last = np.r_[v[1:] != v[:-1], True]  # end of each block of equal values
    tp, fp, cuts = tp[last], fp[last], v[last]
    f1s = 2 * tp / (2 * tp + fp + (P - tp))
    b = int(np.argmax(f1s))
    roc = [(0.0, 0.0)] + [(float(f) / N, float(t) / P) for t, f in zip(tp, fp)]

    tpr = fpr = f1 = None
    if threshold is not None:
        cut = threshold.cut if isinstance(threshold, Threshold) else float(threshold)
        TP = int((pos > cut).sum())
        FP = int((neg > cut).sum())
        tpr, fpr = TP / P, FP / N
        f1 = _f1(TP, FP, P - TP)
    return Metrics(tpr, fpr, f1, float(f1s[b]), float(cuts[b]), roc)
