"""Text-modification attacks: synonym swaps, random edits, copy-paste, insertion, paraphrase pairs."""

from __future__ import annotations

import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import InvalidArgument, TokenSeq, derive_seed
from .embed import EmbeddingProvider, _tokens
from .generate import GenerationConfig, GenerationTrace, generate

log = logging.getLogger(__name__)

ATTACK_KINDS = ("synonym", "random_sub", "delete", "insert_strip", "copy_paste", "external_pairs")


class PairFormatError(ValueError):
    pass


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    ratio: float = 0.0
    seed: int = 0
    constrained: bool = False
    max_cos_drop: float = 0.05
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise InvalidArgument(f"unknown attack kind {self.kind!r}")
        if not 0.0 <= self.ratio <= 1.0:
            raise InvalidArgument("ratio must lie in [0, 1]")
        if self.max_cos_drop < 0:
            raise InvalidArgument("max_cos_drop must be non-negative")


@dataclass
class AttackResult:
    tokens: TokenSeq
    modified: list[int]  # positions (in the attacked sequence) that were changed
    span: Optional[tuple[int, int]] = None  # watermarked span for copy-paste


def _rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, tag)))


def synonym_attack(
    tokens,
    lexicon: Sequence[Sequence[int]],
    ratio: float,
    seed: int = 0,
    provider: Optional[EmbeddingProvider] = None,
    max_cos_drop: float = 0.05,
    start: int = 0,
) -> AttackResult:
    """Swap ``ceil(ratio * n_eligible)`` lexicalised tokens for a different group member.

    Only positions ``>= start`` are touched. With a ``provider`` the swap at a
    position is kept only if the embedding of the prefix ending there keeps its
    cosine to the unmodified prefix within ``max_cos_drop``.
    """
    if not 0.0 <= ratio <= 1.0:
        raise InvalidArgument("ratio must lie in [0, 1]")
    toks = _tokens(tokens)
    groups = {}
    for g in lexicon:
        members = sorted(int(t) for t in g)
        for t in members:
            if t in groups:
                raise InvalidArgument(f"lexicon groups overlap at token {t}")
            groups[t] = members
    eligible = [i for i in range(start, len(toks)) if len(groups.get(toks[i], ())) > 1]
    if ratio > 0 and not eligible:
        log.warning("synonym attack: no eligible tokens, text returned unchanged")
        return AttackResult(TokenSeq.of(toks, "attacked"), [])
    k = math.ceil(ratio * len(eligible))
    rng = _rng(seed, 0x5A)
    chosen = sorted(rng.choice(len(eligible), size=k, replace=False).tolist()) if k else []
    out = list(toks)
    changed = []
    for ci in chosen:
        i = eligible[ci]
        alts = [t for t in groups[out[i]] if t != out[i]]
        cand = alts[int(rng.integers(len(alts)))]
        if provider is not None:
            before = provider.embed(out[start : i + 1]).values
            trial = out[:i] + [cand] + out[i + 1 :]
            after = provider.embed(trial[start : i + 1]).values
            cos = float(before @ after / (np.linalg.norm(before) * np.linalg.norm(after)))
            if 1.0 - cos > max_cos_drop:
                continue
        out[i] = cand
        changed.append(i)
    return AttackResult(TokenSeq.of(out, "attacked"), changed)


def random_edit(tokens, kind: str, ratio: float, seed: int, vocab_size: int, start: int = 0) -> AttackResult:
    """Uniform random substitution or deletion of ``round(ratio * n)`` positions after ``start``.

    For substitutions ``modified`` is the set U of altered positions; for
    deletions it lists the original positions that were removed.
    """
    if kind not in ("substitute", "delete"):
        raise InvalidArgument(f"unknown edit kind {kind!r}")
    if not 0.0 <= ratio <= 1.0:
        raise InvalidArgument("ratio must lie in [0, 1]")
    toks = _tokens(tokens)
    n = len(toks) - start
    if kind == "delete" and ratio >= 1.0:
        raise InvalidArgument("deleting every token leaves an empty text")
    k = int(round(ratio * n))
    rng = _rng(seed, 0xED17)
    pos = sorted((start + rng.choice(n, size=k, replace=False)).tolist()) if k else []
    if kind == "substitute":
        out = list(toks)
        for i in pos:
            out[i] = int(rng.integers(vocab_size))
        return AttackResult(TokenSeq.of(out, "attacked"), pos)
    drop = set(pos)
    return AttackResult(TokenSeq.of([t for i, t in enumerate(toks) if i not in drop], "attacked"), pos)


def copy_paste_attack(wm_tokens, human_tokens, insert_len: int, layout: str = "embedded", seed: int = 0) -> AttackResult:
    """Mix ``insert_len`` watermarked tokens into human text.

    ``layout="prefix"`` puts the human text first; ``"embedded"`` drops the
    span at a seeded position inside the human text.
    """
    wm = _tokens(wm_tokens)
    hu = _tokens(human_tokens)
    if not 0 <= insert_len <= len(wm):
        raise InvalidArgument(f"insert_len must lie in [0, {len(wm)}]")
    span = wm[:insert_len]
    if layout == "prefix":
        at = len(hu)
    elif layout == "embedded":
        at = int(_rng(seed, 0xC0B7).integers(len(hu) + 1))
    else:
        raise InvalidArgument(f"unknown copy-paste layout {layout!r}")
    out = hu[:at] + span + hu[at:]
    return AttackResult(TokenSeq.of(out, "attacked"), [], (at, at + insert_len))


def insertion_strip_attack(
    lm,
    wm_source,
    cfg: GenerationConfig,
    prompt,
    distractor: int,
    period: Optional[int],
    topic: Optional[int] = None,
) -> tuple[GenerationTrace, TokenSeq]:
    """Generate with a distractor forced after every ``period`` real tokens, then strip it.

    ``period=None`` is ordinary generation. The stripped sequence has the
    requested length.
    """
    if not 0 <= distractor < lm.vocab_size:
        raise InvalidArgument("distractor token outside the vocab")
    trace = generate(lm, wm_source, cfg, prompt, topic=topic, distractor=distractor if period else None, period=period)
    forced = set(trace.forced)
    stripped = [t for i, t in enumerate(trace.tokens) if i not in forced]
    return trace, TokenSeq.of(stripped, "attacked")


# --------------------------------------------------------------------------
# external paraphrase pairs (JSON Lines)
# --------------------------------------------------------------------------


def write_paraphrase_pairs(path, pairs: Sequence[tuple]) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        for orig, para in pairs:
            if isinstance(orig, str):
                rec = {"orig_text": orig, "para_text": para}
            else:
                rec = {"orig_tokens": _tokens(orig), "para_tokens": _tokens(para)}
            fh.write(json.dumps(rec) + "\n")
    os.replace(tmp, path)


def load_paraphrase_pairs(path) -> list[tuple]:
    """Token pairs come back as ``TokenSeq``; text pairs as plain strings."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except ValueError as exc:
                raise PairFormatError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            if not isinstance(rec, dict):
                raise PairFormatError(f"{path}:{lineno}: expected an object")
            if "orig_tokens" in rec or "para_tokens" in rec:
                try:
                    a = TokenSeq.of(rec["orig_tokens"], "generated")
                    b = TokenSeq.of(rec["para_tokens"], "attacked")
                except (KeyError, TypeError, ValueError) as exc:
                    raise PairFormatError(f"{path}:{lineno}: bad token pair ({exc})") from exc
                out.append((a, b))
            elif isinstance(rec.get("orig_text"), str) and isinstance(rec.get("para_text"), str):
                out.append((rec["orig_text"], rec["para_text"]))
            else:
                raise PairFormatError(f"{path}:{lineno}: need orig_tokens/para_tokens or orig_text/para_text")
    return out
