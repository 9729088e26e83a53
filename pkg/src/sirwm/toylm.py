"""Seeded order-1 toy language model and decoding primitives."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import START_TOKEN, InvalidArgument, TokenSeq, std_normal, uniform01

MAX_BEAM = 8


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class ToyLM:
    """Next-token logits are Gaussian deviates keyed by (seed, previous token, candidate).

    ``token_topic``/``topic_bias`` optionally add a prompt-conditioned preference
    for tokens of the prompt's topic, standing in for the prompt dependence of a
    real model.
    """

    def __init__(
        self,
        vocab_size: int,
        seed: int = 0,
        temperature: float = 1.0,
        token_topic: Optional[np.ndarray] = None,
        topic_bias: float = 0.0,
    ):
        if vocab_size < 2:
            raise InvalidArgument("vocab size must be >= 2")
        if temperature <= 0:
            raise InvalidArgument("temperature must be positive")
        self.vocab_size = vocab_size
        self.seed = seed
        self.temperature = temperature
        self.token_topic = None if token_topic is None else np.asarray(token_topic, dtype=np.int64)
        self.topic_bias = topic_bias
        self._rows: dict[int, np.ndarray] = {}

    def _base_row(self, prev: int) -> np.ndarray:
        row = self._rows.get(prev)
        if row is None:
            row = std_normal(self.seed, prev, np.arange(self.vocab_size))
            row.setflags(write=False)
            self._rows[prev] = row
        return row

    def prompt_topic(self, prompt: Sequence[int]) -> Optional[int]:
        if self.token_topic is None or len(prompt) == 0:
            return None
        counts = np.bincount(self.token_topic[np.asarray(list(prompt), dtype=np.int64)])
        return int(np.argmax(counts))

    def logits(self, context: Sequence[int], topic: Optional[int] = None) -> np.ndarray:
        prev = int(context[-1]) if len(context) else START_TOKEN
        z = self._base_row(prev)
        if topic is not None and self.topic_bias and self.token_topic is not None:
            z = z + self.topic_bias * (self.token_topic == topic)
        return z / self.temperature


def lm_logits(lm: ToyLM, context, topic: Optional[int] = None) -> np.ndarray:
    toks = context.tokens if isinstance(context, TokenSeq) else context
    return lm.logits(toks, topic)


@dataclass(frozen=True)
class Decode:
    """Decoding method: ``sample`` (needs seed), ``greedy``, or ``beam`` (needs width)."""

    kind: str = "sample"
    seed: int = 0
    width: int = 4

    def __post_init__(self):
        if self.kind not in ("sample", "greedy", "beam"):
            raise InvalidArgument(f"unknown decode method {self.kind!r}")
        if self.kind == "beam" and not 1 <= self.width <= MAX_BEAM:
            raise InvalidArgument(f"beam width must lie in [1, {MAX_BEAM}], got {self.width}")


def sample_token(logits: np.ndarray, seed: int, step: int) -> int:
    p = softmax(logits)
    cdf = np.cumsum(p)
    u = float(uniform01(seed, step)) * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(p) - 1))


def decode_step(final_logits, method: Decode, step: int = 0):
    """One decoding decision. Beam returns the ``width`` best candidate ids."""
    x = np.asarray(final_logits, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InvalidArgument("logits must be finite")
    if method.kind == "greedy":
        return int(np.argmax(x))
    if method.kind == "sample":
        return sample_token(x, method.seed, step)
    return [int(i) for i in np.argsort(-x, kind="stable")[: method.width]]
