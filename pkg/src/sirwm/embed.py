"""Embedding providers: synthetic semantics, JSONL corpus files, and an HTTP client."""

from __future__ import annotations

import bisect
import json
import logging
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import httpx
import numpy as np

from .core import DimMap, Embedding, InvalidArgument, TokenSeq, hash64

log = logging.getLogger(__name__)

MAX_CONTEXT = 512


class CorpusFormatError(ValueError):
    pass


class EmbeddingServiceError(RuntimeError):
    def __init__(self, message: str, retries: int = 0):
        super().__init__(f"{message} (after {retries} retries)")
        self.retries = retries


def _tokens(tokens) -> list[int]:
    if isinstance(tokens, TokenSeq):
        return list(tokens.tokens)
    return [int(t) for t in tokens]


class EmbeddingProvider:
    """Base provider. Subclasses implement ``_embed_many`` over already-truncated contexts."""

    kind = "abstract"
    deterministic = True
    dim: int

    def embed(self, tokens) -> Embedding:
        return self.embed_many([tokens])[0]

    def embed_many(self, seqs: Sequence) -> list[Embedding]:
        ctxs = [_tokens(s)[-MAX_CONTEXT:] for s in seqs]
        if not ctxs:
            return []
        return [Embedding(v) for v in self._embed_many(ctxs)]

    def embed_prefixes(self, tokens) -> np.ndarray:
        """Row ``j`` is the embedding of ``tokens[:j]``; shape ``(len+1, dim)``."""
        toks = _tokens(tokens)
        return np.stack([e.values for e in self.embed_many([toks[:j] for j in range(len(toks) + 1)])])

    def _embed_many(self, ctxs: list[list[int]]) -> np.ndarray:
        raise NotImplementedError


# --------------------------------------------------------------------------
# synthetic semantics
# --------------------------------------------------------------------------


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _gauss(seed: int, tag: int, rows: np.ndarray, dim: int) -> np.ndarray:
    rng_keys = hash64(seed, tag, rows)
    out = np.empty((len(rows), dim))
    for i, k in enumerate(rng_keys):
        out[i] = np.random.Generator(np.random.PCG64(int(k))).standard_normal(dim)
    return out


def lexicon_from_dim_map(dmap: DimMap, max_group: int = 4, seed: int = 0) -> list[list[int]]:
    """Synonym groups carved out of DimMap buckets, so synonyms share a watermark score.

    Every bucket with at least two tokens is shuffled and chopped into groups of
    at most ``max_group`` members; trailing singletons stay unlexicalised.
    """
    groups = []
    for b, members in enumerate(dmap.buckets()):
        if len(members) < 2:
            continue
        order = np.argsort(hash64(seed, 0x5EED, b, members), kind="stable")
        members = [int(m) for m in members[order]]
        for i in range(0, len(members), max_group):
            g = sorted(members[i : i + max_group])
            if len(g) >= 2:
                groups.append(g)
    return groups


class SyntheticSemantics(EmbeddingProvider):
    """Deterministic toy embedder with synonym and topic structure.

    Each token carries a base unit vector (shared by its synonym group up to a
    per-member perturbation of size ``eps``) and a topic. A context embeds as
    the normalised sum of the last ``window`` content tokens' vectors, each
    blended as ``(1 - topic_weight) * base + topic_weight * topic_offset``.
    Tokens listed in ``null_tokens`` carry no meaning and are skipped.
    """

    kind = "synthetic"

    def __init__(
        self,
        vocab_size: int,
        dim: int = 64,
        seed: int = 0,
        synonym_groups: Optional[Sequence[Sequence[int]]] = None,
        eps: float = 0.02,
        n_topics: int = 8,
        topic_weight: float = 0.3,
        window: int = 64,
        null_tokens: Iterable[int] = (),
        topic_overlap: float = 0.0,
    ):
        if vocab_size < 2 or dim < 1 or window < 1 or n_topics < 1:
            raise InvalidArgument("bad synthetic semantics shape")
        if not 0.0 <= topic_weight <= 1.0:
            raise InvalidArgument("topic_weight must lie in [0, 1]")
        if not 0.0 <= topic_overlap < 1.0:
            raise InvalidArgument("topic_overlap must lie in [0, 1)")
        self.vocab_size = vocab_size
        self.dim = dim
        self.seed = seed
        self.eps = eps
        self.n_topics = n_topics
        self.topic_weight = topic_weight
        self.topic_overlap = topic_overlap
        self.window = window
        self.null_tokens = frozenset(int(t) for t in null_tokens)
        self.synonym_groups = [sorted(int(t) for t in g) for g in (synonym_groups or [])]

        root = np.arange(vocab_size)
        seen = set()
        for g in self.synonym_groups:
            for t in g:
                if t in seen or not 0 <= t < vocab_size:
                    raise InvalidArgument(f"synonym groups must partition a subset of the vocab (token {t})")
                seen.add(t)
                root[t] = g[0]
        self.group_root = root

        self.token_topic = (hash64(seed, 0x70C1, root) % np.uint64(n_topics)).astype(np.int64)
        base = _unit(_gauss(seed, 0xBA5E, root, dim))
        noise = _unit(_gauss(seed, 0x0153, np.arange(vocab_size), dim))
        self.base = _unit(base + eps * noise)
        # topic directions are orthonormal plus a shared part, so every pair of
        # topics has cosine exactly topic_overlap
        g = _gauss(seed, 0x7091, np.arange(n_topics + 1), dim)
        if n_topics < dim:
            q, r = np.linalg.qr(g.T)
            g = (q * np.sign(np.diag(r))).T
        shared, g = g[-1], _unit(g[:-1])
        self.topic_offsets = _unit(np.sqrt(topic_overlap) * shared + np.sqrt(1.0 - topic_overlap) * g)
        self.origin = _unit(_gauss(seed, 0x0219, np.array([0]), dim))[0]
        self.token_vectors = (1.0 - topic_weight) * self.base + topic_weight * self.topic_offsets[self.token_topic]
        for t in self.null_tokens:
            self.token_vectors[t] = 0.0
        self.lexicon = {t: g for g in self.synonym_groups for t in g}

    def synonyms(self, t: int) -> list[int]:
        return [s for s in self.lexicon.get(int(t), []) if s != t]

    def _content(self, toks: list[int]) -> list[int]:
        if self.null_tokens:
            toks = [t for t in toks if t not in self.null_tokens]
        return toks[-self.window :]

    def _pooled(self, windows: list[np.ndarray]) -> np.ndarray:
        """Normalised sums over left-aligned token windows (one row per window).

        Both the single-context and the all-prefixes paths go through here so
        that they agree bit for bit.
        """
        n = len(windows)
        acc = np.zeros((n, self.dim))
        if n == 0:
            return acc
        longest = max((len(w) for w in windows), default=0)
        table = np.vstack([self.token_vectors, np.zeros((1, self.dim))])
        pad = self.vocab_size
        idx = np.full((n, max(longest, 1)), pad, dtype=np.int64)
        for i, w in enumerate(windows):
            idx[i, : len(w)] = w
        for j in range(longest):
            acc = acc + table[idx[:, j]]
        acc = acc / np.array([max(len(w), 1) for w in windows], dtype=np.float64)[:, None]
        norms = np.sqrt(np.sum(acc * acc, axis=1))
        out = np.empty_like(acc)
        zero = norms == 0
        out[~zero] = acc[~zero] / norms[~zero][:, None]
        out[zero] = self.origin
        return out

    def _check(self, toks) -> None:
        for t in toks:
            if not 0 <= t < self.vocab_size:
                raise InvalidArgument(f"token id {t} outside vocab of size {self.vocab_size}")

    def _embed_many(self, ctxs: list[list[int]]) -> np.ndarray:
        for toks in ctxs:
            self._check(toks)
        return self._pooled([np.asarray(self._content(toks), dtype=np.int64) for toks in ctxs])

    def embed_prefixes(self, tokens) -> np.ndarray:
        toks = _tokens(tokens)
        self._check(toks)
        positions = [i for i, t in enumerate(toks) if t not in self.null_tokens]
        content = np.asarray([toks[i] for i in positions], dtype=np.int64)
        windows = []
        for j in range(len(toks) + 1):
            hi = bisect.bisect_left(positions, j)
            lo = max(bisect.bisect_left(positions, j - MAX_CONTEXT), hi - self.window)
            windows.append(content[lo:hi])
        return self._pooled(windows)


# --------------------------------------------------------------------------
# corpus files (JSON Lines)
# --------------------------------------------------------------------------


@dataclass
class CorpusRecord:
    id: str
    embedding: Embedding
    topic: str
    text: Optional[str] = None


def write_corpus(path, records: Sequence[CorpusRecord]) -> None:
    tmp = tempfile.NamedTemporaryFile("w", delete=False, dir=os.path.dirname(os.path.abspath(path)), suffix=".tmp")
    with tmp as fh:
        for r in records:
            rec = {
                "id": r.id,
                "topic": r.topic,
                "embedding": [float(x) for x in np.asarray(r.embedding.values, dtype=np.float32)],
            }
            if r.text is not None:
                rec["text"] = r.text
            fh.write(json.dumps(rec) + "\n")
    os.replace(tmp.name, path)


def load_corpus(path) -> list[CorpusRecord]:
    out: list[CorpusRecord] = []
    dim = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rid = str(rec["id"])
                vec = np.asarray(rec["embedding"], dtype=np.float32)
                topic = str(rec.get("topic", ""))
            except (KeyError, TypeError, ValueError) as exc:
                raise CorpusFormatError(f"{path}:{lineno}: malformed record ({exc})") from exc
            if vec.ndim != 1 or vec.size == 0:
                raise CorpusFormatError(f"{path}:{lineno}: record {rid!r} has no embedding vector")
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise CorpusFormatError(
                    f"{path}:{lineno}: record {rid!r} has dimension {vec.size}, expected {dim}"
                )
            out.append(CorpusRecord(rid, Embedding(vec.astype(np.float64)), topic, rec.get("text")))
    return out


# --------------------------------------------------------------------------
# HTTP embedding service client
# --------------------------------------------------------------------------


class HttpEmbedder(EmbeddingProvider):
    """Client for ``POST {endpoint}/embed`` with body ``{"texts": [...]}``.

    Token contexts are rendered to text with ``detokenize`` (space-joined ids by default).
    """

    kind = "http"
    deterministic = False

    def __init__(
        self,
        endpoint: str,
        dim: Optional[int] = None,
        timeout: float = 30.0,
        batch_size: int = 64,
        retries: int = 2,
        max_workers: int = 2,
        detokenize=None,
        client: Optional[httpx.Client] = None,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.dim = dim
        self.timeout = timeout
        self.batch_size = min(batch_size, 64)
        self.retries = retries
        self.max_workers = max_workers
        self.detokenize = detokenize or (lambda toks: " ".join(str(t) for t in toks))
        self._client = client

    def _post(self, texts: list[str]) -> list[list[float]]:
        last = None
        for attempt in range(self.retries + 1):
            try:
                if self._client is not None:
                    resp = self._client.post(f"{self.endpoint}/embed", json={"texts": texts}, timeout=self.timeout)
                else:
                    resp = httpx.post(f"{self.endpoint}/embed", json={"texts": texts}, timeout=self.timeout)
                if resp.status_code // 100 != 2:
                    last = f"HTTP {resp.status_code}"
                    continue
                body = resp.json()
                embs = body["embeddings"]
                if not isinstance(embs, list) or len(embs) != len(texts):
                    raise EmbeddingServiceError("malformed response: wrong number of embeddings", attempt)
                return embs
            except (httpx.TransportError, httpx.TimeoutException) as exc:
                last = f"transport error: {exc}"
                log.warning("embedding request failed (attempt %d): %s", attempt + 1, exc)
            except (ValueError, KeyError, TypeError) as exc:
                raise EmbeddingServiceError(f"malformed response: {exc}", attempt) from exc
        raise EmbeddingServiceError(f"embedding service failed: {last}", self.retries)

    def embed_texts(self, texts: Sequence[str]) -> list[Embedding]:
        texts = list(texts)
        if not texts:
            return []
        chunks = [texts[i : i + self.batch_size] for i in range(0, len(texts), self.batch_size)]
        with ThreadPoolExecutor(max_workers=self.max_workers) as pool:
            results = list(pool.map(self._post, chunks))
        out = []
        for chunk in results:
            for vec in chunk:
                v = np.asarray(vec, dtype=np.float64)
                if self.dim is None:
                    self.dim = v.size
                elif v.size != self.dim:
                    raise EmbeddingServiceError(f"dimension drift: got {v.size}, expected {self.dim}")
                out.append(Embedding(v))
        return out

    def _embed_many(self, ctxs: list[list[int]]) -> np.ndarray:
        return np.stack([e.values for e in self.embed_texts([self.detokenize(c) for c in ctxs])])


def http_embed(endpoint: str, texts: Sequence[str], **kwargs) -> list[Embedding]:
    return HttpEmbedder(endpoint, **kwargs).embed_texts(texts)
