"""Spoofing by word frequency, the |dz| robustness bound, Lipschitz estimates, and sweep tables."""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .core import DimMap, InvalidArgument, hash64
from .detect import metrics, sir_token_scores
from .embed import EmbeddingProvider, _tokens
from .generate import GenerationConfig, KgwConfig, _green_mask, generate, kgw_context
from .net import NetParams, forward, shape_transform

# --------------------------------------------------------------------------
# spoofing (word-frequency decryption)
# --------------------------------------------------------------------------


def frequent_words(corpus: Sequence, n: int = 181) -> list[int]:
    """The ``n`` most frequent tokens, ties broken by token id."""
    c = Counter()
    for text in corpus:
        c.update(_tokens(text))
    return [t for t, _ in sorted(c.items(), key=lambda kv: (-kv[1], kv[0]))[:n]]


def _freqs(corpus) -> tuple[Counter, int]:
    c = Counter()
    total = 0
    for text in corpus:
        toks = _tokens(text)
        c.update(toks)
        total += len(toks)
    return c, total


def infer_colors(wm_corpus, natural_corpus, words: Sequence[int]) -> tuple[dict, list]:
    """Word -> inferred green flag (higher relative frequency in the watermarked corpus).

    Words absent from both corpora are returned separately.
    """
    cw, nw = _freqs(wm_corpus)
    cn, nn = _freqs(natural_corpus)
    if nw == 0 or nn == 0:
        raise InvalidArgument("both corpora must be nonempty")
    colors, absent = {}, []
    for w in words:
        if cw[w] == 0 and cn[w] == 0:
            absent.append(w)
            continue
        colors[w] = cw[w] / nw > cn[w] / nn
    return colors, absent


@dataclass
class SpoofReport:
    words: list[int]
    inferred: dict  # level -> {key: bool}
    truth: dict  # level -> {key: bool}
    accuracy: dict  # level -> float
    excluded: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"schema_version": 1, "words": self.words, "accuracy": self.accuracy, "excluded": self.excluded}


def _accuracy(inferred: dict, truth: dict) -> float:
    keys = [k for k in inferred if k in truth]
    if not keys:
        return float("nan")
    return float(np.mean([inferred[k] == truth[k] for k in keys]))


def spoof_attack(
    wm_corpus: Sequence,
    natural_corpus: Sequence,
    truth: Callable[[Optional[object], int], bool],
    word_list: Optional[Sequence[int]] = None,
    wm_groups: Optional[Sequence] = None,
    natural_groups: Optional[Sequence] = None,
) -> SpoofReport:
    """Decrypt a watermark's colours from word frequencies.

    ``truth(group, word)`` gives the true colour; ``group`` is ``None`` for the
    overall level. When group labels are supplied a per-category level is
    scored too, comparing frequencies within each category.
    """
    if not wm_corpus or not natural_corpus:
        raise InvalidArgument("both corpora must be nonempty")
    words = list(word_list) if word_list is not None else frequent_words(natural_corpus)
    inferred, excluded = infer_colors(wm_corpus, natural_corpus, words)
    levels_inf = {"overall": inferred}
    levels_truth = {"overall": {w: bool(truth(None, w)) for w in inferred}}
    if wm_groups is not None and natural_groups is not None:
        cat_inf, cat_truth = {}, {}
        for g in sorted(set(wm_groups) & set(natural_groups), key=str):
            wm_g = [t for t, gg in zip(wm_corpus, wm_groups) if gg == g]
            nat_g = [t for t, gg in zip(natural_corpus, natural_groups) if gg == g]
            inf_g, _ = infer_colors(wm_g, nat_g, words)
            for w, v in inf_g.items():
                cat_inf[(g, w)] = v
                cat_truth[(g, w)] = bool(truth(g, w))
        levels_inf["category"] = cat_inf
        levels_truth["category"] = cat_truth
    acc = {lvl: _accuracy(levels_inf[lvl], levels_truth[lvl]) for lvl in levels_inf}
    return SpoofReport(words, levels_inf, levels_truth, acc, excluded)


def spoof_kgw(
    kcfg: KgwConfig,
    wm_corpus: Sequence,
    natural_corpus: Sequence,
    vocab_size: int,
    word_list: Optional[Sequence[int]] = None,
    n_contexts: int = 20,
) -> SpoofReport:
    """Word-frequency attack on KGW-k: with a context window, frequencies of a
    word are taken right after each of the ``n_contexts`` most common fixed
    ``k - 1``-token prefixes."""
    words = list(word_list) if word_list is not None else frequent_words(natural_corpus)
    w = kcfg.context_width
    if w == 0:
        mask = _green_mask(vocab_size, kcfg.gamma, kcfg.hash_seed, ())
        return spoof_attack(wm_corpus, natural_corpus, lambda g, t: bool(mask[t]), words)

    def follow(corpus):
        c = Counter()
        for text in corpus:
            toks = _tokens(text)
            for j in range(w, len(toks)):
                c[(tuple(toks[j - w : j]), toks[j])] += 1
        return c

    cw, cn = follow(wm_corpus), follow(natural_corpus)
    ctx_count = Counter()
    for (ctx, _), n in cn.items():
        ctx_count[ctx] += n
    wm_ctx = Counter()
    for (ctx, _), n in cw.items():
        wm_ctx[ctx] += n
    contexts = [c for c, _ in sorted(ctx_count.items(), key=lambda kv: (-kv[1], kv[0])) if wm_ctx[c] > 0][:n_contexts]
    inferred, truth, excluded = {}, {}, []
    for ctx in contexts:
        mask = _green_mask(vocab_size, kcfg.gamma, kcfg.hash_seed, kgw_context(kcfg, list(ctx)))
        for t in words:
            a, b = cw[(ctx, t)], cn[(ctx, t)]
            if a == 0 and b == 0:
                excluded.append((ctx, t))
                continue
            inferred[(ctx, t)] = a / wm_ctx[ctx] > b / ctx_count[ctx]
            truth[(ctx, t)] = bool(mask[t])
    return SpoofReport(words, {"overall": inferred}, {"overall": truth}, {"overall": _accuracy(inferred, truth)}, excluded)


def sir_majority_colors(
    net: NetParams,
    provider: EmbeddingProvider,
    dmap: DimMap,
    texts: Sequence,
    groups: Sequence,
    prompt_len: int = 0,
    stride: int = 5,
    k2: float = 1000.0,
) -> dict:
    """Group -> per-token majority colour of the watermark logits over the
    contexts of that group's texts; key ``None`` pools every context."""
    sums: dict = {}
    for text, g in zip(texts, groups):
        body = _tokens(text)[prompt_len:]
        E = provider.embed_prefixes(body)[:-1:stride]
        signs = np.sign(shape_transform(forward(net, E), "tanh_k2", k2)).sum(axis=0)
        for key in (g, None):
            sums[key] = sums.get(key, 0) + signs
    return {key: (s > 0)[dmap.map] for key, s in sums.items()}


# --------------------------------------------------------------------------
# robustness bound
# --------------------------------------------------------------------------


@dataclass
class RobustnessReport:
    U: list[int]
    score_deltas: np.ndarray
    bound_exact: float
    bound_lipschitz: Optional[float]
    lipschitz: Optional[float]
    empirical: float

    @property
    def violated(self) -> bool:
        return self.empirical > self.bound_exact + 1e-12 or (
            self.bound_lipschitz is not None and self.empirical > self.bound_lipschitz + 1e-12
        )


def delta_z_bound(
    net: NetParams,
    provider: EmbeddingProvider,
    dmap: DimMap,
    original,
    modified,
    U: Sequence[int],
    prompt_len: int = 0,
    transform: str = "tanh_k2",
    k2: float = 1000.0,
    lipschitz: Optional[float] = None,
) -> RobustnessReport:
    """Exact and Lipschitz forms of the |dz| bound for an in-place edit.

    ``U`` holds absolute positions of altered tokens; their new scores count as
    zero. The Lipschitz form bounds the raw network by ``lipschitz`` and the
    tanh transform by its slope ``k2`` (a score moves by at most 2).
    """
    a = _tokens(original)
    b = _tokens(modified)
    if len(a) != len(b):
        raise InvalidArgument("the bound is defined for in-place edits; lengths differ")
    Uset = set(int(u) for u in U)
    for u in Uset:
        if not prompt_len <= u < len(a):
            raise InvalidArgument(f"modified position {u} outside the scored region")
    N = len(a) - prompt_len
    s0 = sir_token_scores(net, provider, dmap, a, prompt_len, transform, k2)
    body_b = b[prompt_len:]
    E0 = provider.embed_prefixes(a[prompt_len:])[:-1]
    E1 = provider.embed_prefixes(body_b)[:-1]
    # score of the *original* next token under the modified context
    wl1 = shape_transform(forward(net, E1), transform, k2)
    s_cross = wl1[np.arange(N), dmap.map[np.asarray(a[prompt_len:], dtype=np.int64)]]
    inU = np.zeros(N, dtype=bool)
    inU[[u - prompt_len for u in Uset]] = True
    s1 = np.where(inU, 0.0, s_cross)
    deltas = s1 - s0
    empirical = abs(float(s1.sum() - s0.sum())) / N
    exact = float(np.abs(s0[inU]).sum() + np.abs(s0[~inU] - s_cross[~inU]).sum()) / N
    lip_bound = None
    if lipschitz is not None:
        dE = np.linalg.norm(E0 - E1, axis=1)[~inU]
        if transform == "tanh_k2":
            per = np.minimum(2.0, k2 * lipschitz * dE)
        else:
            # rank-based transforms have no useful Lipschitz constant
            per = np.where(dE > 0, 2.0, 0.0)
        lip_bound = float(np.abs(s0[inU]).sum() + per.sum()) / N
    return RobustnessReport(sorted(Uset), deltas, exact, lip_bound, lipschitz, empirical)


def estimate_lipschitz(net: NetParams, embeddings: np.ndarray, samples: int = 1000, seed: int = 0, safety: float = 1.5) -> float:
    """``safety`` times the largest ||T(e) - T(e')|| / ||e - e'|| over sampled pairs.

    Pair ``i`` depends only on ``(seed, i)``, so a larger ``samples`` scores a
    superset of pairs. Half the pairs are pool pairs, half are small
    perturbations of a pool point.
    """
    if samples < 100:
        raise InvalidArgument("need at least 100 samples")
    E = np.asarray(embeddings, dtype=np.float64)
    n, d = E.shape
    idx = np.arange(samples)
    ia = (hash64(seed, 0x11, idx) % np.uint64(n)).astype(np.int64)
    ib = (hash64(seed, 0x12, idx) % np.uint64(n)).astype(np.int64)
    A = E[ia]
    B = E[ib].copy()
    local = idx % 2 == 1
    for i in np.nonzero(local)[0]:
        g = np.random.Generator(np.random.PCG64(int(hash64(seed, 0x13, int(i))))).standard_normal(d)
        B[i] = A[i] + 1e-3 * g / np.linalg.norm(g)
    dE = np.linalg.norm(A - B, axis=1)
    keep = dE >= 1e-9
    if not keep.any():
        return 0.0
    dY = np.linalg.norm(forward(net, A[keep]) - forward(net, B[keep]), axis=1)
    return float(safety * np.max(dY / dE[keep]))


# --------------------------------------------------------------------------
# rule counts and text statistics
# --------------------------------------------------------------------------


def rule_count(scheme: str, vocab_size: int, k: int = 0, max_len: int = 0) -> int:
    """Number of distinct green-list rules: ``|V|^k`` for KGW, ``sum_{i=1..T} |V|^i`` for SIR."""
    if vocab_size < 1 or k < 0 or max_len < 0:
        raise InvalidArgument("bad rule-count arguments")
    if scheme == "kgw_k":
        return vocab_size**k
    if scheme == "sir":
        return sum(vocab_size**i for i in range(1, max_len + 1))
    raise InvalidArgument(f"unknown scheme {scheme!r}")


def repetition_stats(tokens, n: int = 1) -> float:
    """Fraction of n-grams that already occurred earlier in the same text."""
    toks = _tokens(tokens)
    if n < 1 or len(toks) < n:
        raise InvalidArgument("need len(tokens) >= n >= 1")
    seen = set()
    rep = 0
    grams = [tuple(toks[i : i + n]) for i in range(len(toks) - n + 1)]
    for g in grams:
        if g in seen:
            rep += 1
        seen.add(g)
    return rep / len(grams)


# --------------------------------------------------------------------------
# delta / shape sweep
# --------------------------------------------------------------------------

SWEEP_FIELDS = ("delta", "kind", "n_texts", "best_f1", "max_bias")


def delta_sweep(
    lm,
    wm_source,
    base: GenerationConfig,
    prompts: Sequence[Sequence[int]],
    human_texts: Sequence[Sequence[int]],
    deltas: Sequence[float],
    kinds: Sequence[str],
    seed: int = 0,
) -> list[dict]:
    """Best F1 of watermarked vs human texts for every (delta, transform kind).

    ``max_bias`` is the largest |delta * logit| applied during generation.
    """
    net, provider, dmap = wm_source.net, wm_source.provider, wm_source.dmap
    rows = []
    for kind in kinds:
        human = [
            float(np.mean(sir_token_scores(net, provider, dmap, h, 0, kind, base.k2))) for h in human_texts
        ]
        for delta in deltas:
            pos, top = [], 0.0
            for i, p in enumerate(prompts):
                cfg = replace(base, delta=float(delta), transform=kind, decode=replace(base.decode, seed=seed + i))
                tr = generate(lm, wm_source, cfg, p)
                pos.append(float(np.mean(sir_token_scores(net, provider, dmap, tr.full, len(p), kind, base.k2))))
                raw = forward(net, provider.embed_prefixes(tr.tokens)[:-1])
                top = max(top, max_bias(delta, raw, kind, base.k2))
            m = metrics(pos, human)
            rows.append({"delta": float(delta), "kind": kind, "n_texts": len(prompts), "best_f1": m.best_f1, "max_bias": top})
    return rows


def max_bias(delta: float, raw: np.ndarray, kind: str, k2: float = 1000.0) -> float:
    """Largest |delta * logit| over rows of raw outputs under a transform."""
    return float(delta * np.max(np.abs(shape_transform(raw, kind, k2))))


def sweep_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    wr = csv.DictWriter(buf, fieldnames=list(SWEEP_FIELDS), lineterminator="\n")
    wr.writeheader()
    for r in rows:
        wr.writerow({k: r[k] for k in SWEEP_FIELDS})
    return buf.getvalue()
