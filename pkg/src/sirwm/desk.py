"""Reference desk-scale world: toy LM, synthetic semantics, DimMap and training corpus wired together."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np

from .core import build_dim_map, derive_seed
from .embed import SyntheticSemantics, lexicon_from_dim_map
from .generate import GenerationConfig, SirWatermark, make_prompt
from .net import LossConfig, NetParams
from .toylm import Decode, ToyLM
from .train import Checkpoint, GateReport, TrainConfig, TrainResult, check_gates, train


@dataclass(frozen=True)
class DeskConfig:
    vocab_size: int = 1000
    dim: int = 64
    out_dim: int = 200
    n_topics: int = 6
    topic_weight: float = 0.5
    topic_overlap: float = 0.4
    eps: float = 0.0
    window: int = 64
    topic_bias: float = 4.0
    lm_seed: int = 3
    semantics_seed: int = 1
    dim_map_seed: int = 7
    null_token: int = 999  # the insertion-attack distractor; carries no meaning
    prompt_len: int = 30
    corpus_texts: int = 3000
    corpus_min_len: int = 10
    corpus_max_len: int = 200
    corpus_seed: int = 11

    def to_dict(self) -> dict:
        return asdict(self)


def reference_train_config(desk: DeskConfig, gamma: float = 0.5, **overrides) -> TrainConfig:
    """Training settings of the reference desk run.

    The learning-rate schedule is far more aggressive than the 1e-5 constant
    rate used at full scale: the desk run has to converge within minutes.
    Topic clusters lock their sign patterns early, so exact balance depends
    on the seed; seed 8 is the first seed that passes the release gates at
    gamma 0.5 (see ``DeskWorld.release``).
    """
    kw = dict(
        epochs=300,
        batch_size=256,
        lr=3e-2,
        lr_schedule="cosine",
        lr_min=1e-4,
        seed=8,
        loss=LossConfig(gamma=gamma),
        out_dim=desk.out_dim,
        vocab_size=desk.vocab_size,
        dim_map_seed=desk.dim_map_seed,
    )
    kw.update(overrides)
    return TrainConfig(**kw)


class DeskWorld:
    def __init__(self, cfg: Optional[DeskConfig] = None):
        self.cfg = cfg = cfg or DeskConfig()
        self.dmap = build_dim_map(cfg.vocab_size, cfg.out_dim, cfg.dim_map_seed)
        self.lexicon = [
            g2 for g in lexicon_from_dim_map(self.dmap) if len(g2 := [t for t in g if t != cfg.null_token]) >= 2
        ]
        self.semantics = SyntheticSemantics(
            cfg.vocab_size,
            cfg.dim,
            cfg.semantics_seed,
            self.lexicon,
            eps=cfg.eps,
            n_topics=cfg.n_topics,
            topic_weight=cfg.topic_weight,
            window=cfg.window,
            null_tokens=(cfg.null_token,),
            topic_overlap=cfg.topic_overlap,
        )
        self.lm = ToyLM(cfg.vocab_size, cfg.lm_seed, token_topic=self.semantics.token_topic, topic_bias=cfg.topic_bias)

    # texts ---------------------------------------------------------------

    def topic_of(self, i: int) -> int:
        return i % self.cfg.n_topics

    def prompt(self, i: int, tag: int = 0) -> list[int]:
        return make_prompt(self.lm, self.cfg.prompt_len, derive_seed(tag, 0x9A, i), self.topic_of(i))

    def human_text(self, i: int, length: int = 200, tag: int = 1) -> tuple[list[int], list[int]]:
        """(prompt, continuation) sampled from the unwatermarked LM, steered to topic ``i mod K``."""
        toks = make_prompt(self.lm, self.cfg.prompt_len + length, derive_seed(tag, 0x4B, i), self.topic_of(i))
        return toks[: self.cfg.prompt_len], toks[self.cfg.prompt_len :]

    def corpus_texts(self, n: Optional[int] = None, seed: Optional[int] = None) -> tuple[list[list[int]], list[int]]:
        c = self.cfg
        n = c.corpus_texts if n is None else n
        seed = c.corpus_seed if seed is None else seed
        rng = np.random.Generator(np.random.PCG64(seed))
        lens = rng.integers(c.corpus_min_len, c.corpus_max_len + 1, size=n)
        texts = []
        for i in range(n):
            toks = make_prompt(self.lm, c.prompt_len + int(lens[i]), derive_seed(seed, 0xC0, i), self.topic_of(i))
            texts.append(toks[c.prompt_len :])
        return texts, [self.topic_of(i) for i in range(n)]

    def embed_texts(self, texts) -> np.ndarray:
        return np.stack([e.values for e in self.semantics.embed_many(texts)])

    def heldout_embeddings(self, n: int = 1200) -> np.ndarray:
        """Fresh topic-balanced human texts that never enter the training corpus."""
        return self.embed_texts([self.human_text(600_000 + i)[1] for i in range(n)])

    # model ---------------------------------------------------------------

    def train(self, tcfg: Optional[TrainConfig] = None, embeddings: Optional[np.ndarray] = None) -> TrainResult:
        tcfg = tcfg or reference_train_config(self.cfg)
        if embeddings is None:
            embeddings = self.embed_texts(self.corpus_texts()[0])
        return train(tcfg, embeddings)

    def release(
        self, tcfg: Optional[TrainConfig] = None, max_attempts: int = 3, embeddings=None, heldout=None
    ) -> tuple[TrainResult, list[GateReport]]:
        """Train, then retrain with the next seeds until the release gates pass.

        Returns the first passing run, or the last attempt if none passes,
        together with the gate report of every attempt.
        """
        tcfg = tcfg or reference_train_config(self.cfg)
        if embeddings is None:
            embeddings = self.embed_texts(self.corpus_texts()[0])
        if heldout is None:
            heldout = self.heldout_embeddings()
        reports = []
        for k in range(max_attempts):
            res = train(replace(tcfg, seed=tcfg.seed + k), embeddings)
            reports.append(check_gates(res.checkpoint, heldout, res.corpus_mean_sim))
            if reports[-1].passed:
                break
        return res, reports

    def watermark(self, model) -> SirWatermark:
        params = model.params if isinstance(model, Checkpoint) else model
        if not isinstance(params, NetParams):
            raise TypeError("expected a Checkpoint or NetParams")
        return SirWatermark(params, self.semantics, self.dmap)

    def gen_config(self, seed: int = 0, **kw) -> GenerationConfig:
        kw.setdefault("prompt_len", self.cfg.prompt_len)
        return GenerationConfig(decode=kw.pop("decode", Decode("sample", seed)), **kw)
