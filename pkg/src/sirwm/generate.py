"""Watermarked generation: SIR (semantic) and KGW-k (hash) logit sources over the toy LM."""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .core import (
    START_TOKEN,
    DimMap,
    InvalidArgument,
    TokenSeq,
    WatermarkLogits,
    derive_seed,
    expand_to_vocab,
    hash64,
)
from .embed import EmbeddingProvider
from .net import NetParams, forward, shape_transform
from .toylm import Decode, ToyLM, log_softmax, sample_token

TRACE_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class GenerationConfig:
    delta: float = 1.0
    max_new_tokens: int = 200
    prompt_len: int = 30
    recompute_interval: int = 5
    decode: Decode = field(default_factory=Decode)
    transform: str = "tanh_k2"
    k2: float = 1000.0

    def __post_init__(self):
        if self.recompute_interval < 1:
            raise InvalidArgument("recompute_interval must be >= 1")
        if self.delta < 0:
            raise InvalidArgument("delta must be non-negative")
        if self.max_new_tokens < 0:
            raise InvalidArgument("max_new_tokens must be non-negative")

    def snapshot(self) -> dict:
        d = asdict(self)
        d["decode"] = asdict(self.decode)
        return d


@dataclass(frozen=True)
class KgwConfig:
    """KGW-k baseline. ``k`` follows the usual labelling: KGW-1 is the global
    list, and KGW-k keys its green list on the ``k - 1`` preceding tokens.
    ``k = 0`` is accepted as another name for the global list."""

    k: int = 2
    gamma: float = 0.5
    hash_seed: int = 15485863
    delta: float = 1.0

    def __post_init__(self):
        if self.k < 0:
            raise InvalidArgument("k must be >= 0")
        if not 0.0 < self.gamma < 1.0:
            raise InvalidArgument("gamma must lie in (0, 1)")

    @property
    def context_width(self) -> int:
        return max(self.k - 1, 0)


# --------------------------------------------------------------------------
# watermark logit sources
# --------------------------------------------------------------------------


@dataclass
class LogitCache:
    values: Optional[np.ndarray] = None  # transformed logits over out_dim
    version: int = -1


def sir_watermark_logits(
    net: NetParams,
    provider: EmbeddingProvider,
    dmap: DimMap,
    context,
    cache: LogitCache,
    cfg: GenerationConfig,
) -> WatermarkLogits:
    """Watermark logits for the next token given the generated context.

    Recomputes (embedding + forward) when the context length is a multiple of
    ``cfg.recompute_interval`` or the cache is empty; otherwise reuses the cache.
    """
    toks = context.tokens if isinstance(context, TokenSeq) else tuple(context)
    n = len(toks)
    if cache.values is None or n % cfg.recompute_interval == 0:
        try:
            e = provider.embed(toks)
        except Exception as exc:
            raise RuntimeError(f"embedding provider failed at step {n}: {exc}") from exc
        raw = forward(net, e.values)
        cache.values = shape_transform(raw, cfg.transform, cfg.k2)
        cache.version = n
    tag = cfg.transform if cfg.transform != "raw" else "raw"
    return WatermarkLogits(cache.values, tag)


class SirWatermark:
    name = "sir"

    def __init__(self, net: NetParams, provider: EmbeddingProvider, dmap: DimMap):
        if provider.dim != net.input_dim:
            raise InvalidArgument(f"provider dim {provider.dim} != network input dim {net.input_dim}")
        if dmap.out_dim != net.out_dim:
            raise InvalidArgument(f"DimMap out_dim {dmap.out_dim} != network out_dim {net.out_dim}")
        self.net = net
        self.provider = provider
        self.dmap = dmap

    def new_cache(self) -> LogitCache:
        return LogitCache()

    def bias(self, generated: Sequence[int], full_context: Sequence[int], cache: LogitCache, cfg: GenerationConfig):
        wl = sir_watermark_logits(self.net, self.provider, self.dmap, generated, cache, cfg)
        return expand_to_vocab(wl.values, self.dmap), cache.version


@lru_cache(maxsize=8192)
def _green_mask(vocab_size: int, gamma: float, hash_seed: int, ctx: tuple) -> np.ndarray:
    key = int(hash64(hash_seed, 0x6EE1, *ctx)) if ctx else int(hash64(hash_seed, 0x6EE1))
    order = np.argsort(hash64(key, np.arange(vocab_size)), kind="stable")
    mask = np.zeros(vocab_size, dtype=bool)
    mask[order[: int(round(gamma * vocab_size))]] = True
    mask.setflags(write=False)
    return mask


def kgw_context(kcfg: KgwConfig, context: Sequence[int]) -> tuple:
    w = kcfg.context_width
    if w == 0:
        return ()
    ctx = list(context[-w:])
    return tuple([START_TOKEN] * (w - len(ctx)) + [int(t) for t in ctx])


def kgw_watermark_logits(kcfg: KgwConfig, context, vocab_size: int) -> WatermarkLogits:
    """+1 on the green list, -1 elsewhere; green list keyed by the hashed context window."""
    toks = context.tokens if isinstance(context, TokenSeq) else context
    mask = _green_mask(vocab_size, kcfg.gamma, kcfg.hash_seed, kgw_context(kcfg, toks))
    return WatermarkLogits(np.where(mask, 1.0, -1.0), "raw")


class KgwWatermark:
    def __init__(self, kcfg: KgwConfig, vocab_size: int):
        self.kcfg = kcfg
        self.vocab_size = vocab_size
        self.name = f"kgw-{kcfg.k}"

    def new_cache(self):
        return None

    def bias(self, generated, full_context, cache, cfg):
        mask = _green_mask(self.vocab_size, self.kcfg.gamma, self.kcfg.hash_seed, kgw_context(self.kcfg, full_context))
        return np.where(mask, 1.0, -1.0), len(generated)


# --------------------------------------------------------------------------
# traces
# --------------------------------------------------------------------------


@dataclass
class GenerationTrace:
    prompt: list[int]
    tokens: list[int]
    scores: list[float]
    versions: list[int]
    wm: str
    topic: Optional[int] = None
    seeds: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    forced: list[int] = field(default_factory=list)  # positions (in tokens) emitted by force
    timing: Optional[float] = None

    @property
    def full(self) -> list[int]:
        return self.prompt + self.tokens

    def to_json(self) -> dict:
        return {
            "schema_version": TRACE_SCHEMA_VERSION,
            "wm": self.wm,
            "prompt": self.prompt,
            "tokens": self.tokens,
            "scores": self.scores,
            "versions": self.versions,
            "topic": self.topic,
            "seeds": self.seeds,
            "config": self.config,
            "forced": self.forced,
        }

    @classmethod
    def from_json(cls, d: dict) -> "GenerationTrace":
        if d.get("schema_version") != TRACE_SCHEMA_VERSION:
            raise InvalidArgument(f"unsupported trace schema version {d.get('schema_version')!r}")
        return cls(
            prompt=[int(t) for t in d["prompt"]],
            tokens=[int(t) for t in d["tokens"]],
            scores=[float(s) for s in d["scores"]],
            versions=[int(v) for v in d["versions"]],
            wm=d["wm"],
            topic=d.get("topic"),
            seeds=d.get("seeds", {}),
            config=d.get("config", {}),
            forced=[int(p) for p in d.get("forced", [])],
        )

    def canonical_bytes(self) -> bytes:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":")).encode()

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_bytes()).hexdigest()


def make_prompt(lm: ToyLM, length: int, seed: int, topic: Optional[int] = None) -> list[int]:
    """Unwatermarked prompt sampled from the LM, optionally steered to a topic."""
    toks: list[int] = []
    for step in range(length):
        toks.append(sample_token(lm.logits(toks, topic), seed, step))
    return toks


# --------------------------------------------------------------------------
# generation loops
# --------------------------------------------------------------------------


def _forced_at(step: int, period: Optional[int]) -> bool:
    # with period p, every p-th emitted token (1-based) is followed by a distractor:
    # emission pattern for p=1 is real, *, real, *, ...
    return period is not None and step % (period + 1) == period


def _sequential(lm, wm, cfg, prompt, topic, pool=None, distractor=None, period=None):
    generated: list[int] = []
    scores: list[float] = []
    versions: list[int] = []
    forced: list[int] = []
    cache = wm.new_cache() if wm is not None else None
    step = 0
    real = 0
    while real < cfg.max_new_tokens:
        full = prompt + generated
        if _forced_at(step, period):
            generated.append(int(distractor))
            scores.append(0.0)
            versions.append(-1)
            forced.append(len(generated) - 1)
            step += 1
            continue
        if wm is not None and pool is not None:
            f_lm = pool.submit(lm.logits, full, topic)
            f_wm = pool.submit(wm.bias, generated, full, cache, cfg)
            logits, (bias, version) = f_lm.result(), f_wm.result()
        else:
            logits = lm.logits(full, topic)
            bias, version = wm.bias(generated, full, cache, cfg) if wm is not None else (None, -1)
        final = logits + cfg.delta * bias if bias is not None else logits
        if cfg.decode.kind == "greedy":
            tok = int(np.argmax(final))
        else:
            tok = sample_token(final, cfg.decode.seed, step)
        generated.append(tok)
        scores.append(float(bias[tok]) if bias is not None else 0.0)
        versions.append(version)
        step += 1
        real += 1
    return generated, scores, versions, forced


def _beam(lm, wm, cfg, prompt, topic):
    width = cfg.decode.width
    # beam: (logprob, tokens, scores, versions, cache)
    beams = [(0.0, [], [], [], wm.new_cache() if wm is not None else None)]
    for _ in range(cfg.max_new_tokens):
        cand_scores = []
        expansions = []
        for b, (lp, toks, scs, vers, cache) in enumerate(beams):
            full = prompt + toks
            logits = lm.logits(full, topic)
            child_cache = None
            if wm is not None:
                child_cache = LogitCache(cache.values, cache.version)
                bias, version = wm.bias(toks, full, child_cache, cfg)
                final = logits + cfg.delta * bias
            else:
                bias, version = None, -1
                final = logits
            cand_scores.append(lp + log_softmax(final))
            expansions.append((bias, version, child_cache))
        flat = np.concatenate(cand_scores)
        top = np.argsort(-flat, kind="stable")[:width]
        V = len(cand_scores[0])
        new = []
        for idx in top:
            b, tok = divmod(int(idx), V)
            lp, toks, scs, vers, _ = beams[b]
            bias, version, child_cache = expansions[b]
            new.append(
                (
                    float(flat[idx]),
                    toks + [tok],
                    scs + [float(bias[tok]) if bias is not None else 0.0],
                    vers + [version],
                    child_cache,
                )
            )
        beams = new
    best = beams[0]
    return best[1], best[2], best[3], []


def generate(
    lm: ToyLM,
    wm_source,
    cfg: GenerationConfig,
    prompt: Sequence[int],
    topic: Optional[int] = None,
    distractor: Optional[int] = None,
    period: Optional[int] = None,
    parallel: bool = False,
) -> GenerationTrace:
    """Generate ``cfg.max_new_tokens`` tokens after ``prompt``.

    ``wm_source`` is a :class:`SirWatermark`, :class:`KgwWatermark` or ``None``.
    With ``distractor``/``period`` set, a distractor token is forced after every
    ``period`` real tokens; forced tokens are neither watermarked nor counted.
    """
    prompt = [int(t) for t in prompt]
    if topic is None:
        topic = lm.prompt_topic(prompt)
    if period is not None and period < 1:
        raise InvalidArgument("insertion period must be >= 1")
    if period is not None and distractor is None:
        raise InvalidArgument("insertion needs a distractor token")
    t0 = time.perf_counter()
    if cfg.decode.kind == "beam":
        if period is not None or parallel:
            raise InvalidArgument("beam decoding supports neither insertion nor the parallel pipeline")
        toks, scores, versions, forced = _beam(lm, wm_source, cfg, prompt, topic)
    elif parallel:
        with ThreadPoolExecutor(max_workers=2) as pool:
            toks, scores, versions, forced = _sequential(lm, wm_source, cfg, prompt, topic, pool, distractor, period)
    else:
        toks, scores, versions, forced = _sequential(lm, wm_source, cfg, prompt, topic, None, distractor, period)
    elapsed = time.perf_counter() - t0
    return GenerationTrace(
        prompt=prompt,
        tokens=toks,
        scores=scores,
        versions=versions,
        wm=getattr(wm_source, "name", "none") if wm_source is not None else "none",
        topic=topic,
        seeds={"lm": lm.seed, "decode": cfg.decode.seed},
        config=cfg.snapshot(),
        forced=forced,
        timing=elapsed,
    )


def generate_parallel(lm: ToyLM, wm_source, cfg: GenerationConfig, prompt, topic=None) -> GenerationTrace:
    """Same trace as :func:`generate`, with LM and watermark logits computed concurrently."""
    return generate(lm, wm_source, cfg, prompt, topic=topic, parallel=True)


def text_seed(base: int, index: int, tag: str = "") -> int:
    return derive_seed(base, index, int.from_bytes(tag.encode()[:8].ljust(8, b"\0"), "little"))
