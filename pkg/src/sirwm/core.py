"""Shared types, counter-mode hashing, and the vocabulary -> output-dimension map."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

MASK64 = (1 << 64) - 1
START_TOKEN = -1  # context padding symbol, never a real token id

TRANSFORM_KINDS = ("raw", "tanh_k2", "linear", "tanh10_linear", "cubic")


class InvalidArgument(ValueError):
    pass


# --------------------------------------------------------------------------
# counter-mode PRNG: splitmix64 finalizer applied to (key, counter) words
# --------------------------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    z = z.copy()
    z ^= z >> np.uint64(30)
    z *= _M1
    z ^= z >> np.uint64(27)
    z *= _M2
    z ^= z >> np.uint64(31)
    return z


def _as_u64(x) -> np.ndarray:
    arr = np.asarray(x)
    if arr.dtype == np.uint64:
        return arr
    if arr.dtype.kind in "iu":
        return arr.astype(np.int64).astype(np.uint64)
    return np.asarray(np.vectorize(lambda v: int(v) & MASK64, otypes=[np.uint64])(arr))


def hash64(*words) -> np.ndarray:
    """Hash a tuple of integer words (scalars or broadcastable arrays) to uint64."""
    with np.errstate(over="ignore"):
        h = np.uint64(0x243F6A8885A308D3)
        for w in words:
            h = _mix((h ^ _as_u64(w)) + _GOLDEN)
        return np.asarray(h, dtype=np.uint64)


def uniform01(*words) -> np.ndarray:
    """Uniform doubles in [0, 1) from the top 53 bits of hash64."""
    return (hash64(*words) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def std_normal(*words) -> np.ndarray:
    """Box-Muller normal deviates keyed by the given words."""
    u1 = uniform01(*words, 0x5A17)
    u2 = uniform01(*words, 0xC0DE)
    return np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)


def derive_seed(*words) -> int:
    return int(hash64(*words))


# --------------------------------------------------------------------------
# domain types
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Vocab:
    size: int
    tokens: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        if self.size < 2:
            raise InvalidArgument(f"vocab size must be >= 2, got {self.size}")
        if self.tokens is not None and len(self.tokens) != self.size:
            raise InvalidArgument("token string table does not match vocab size")

    def token_str(self, t: int) -> str:
        return self.tokens[t] if self.tokens is not None else f"<{t}>"


@dataclass(frozen=True, eq=False)
class DimMap:
    """Seeded many-to-one projection of vocabulary ids onto `out_dim` buckets."""

    out_dim: int
    seed: int
    map: np.ndarray

    @property
    def vocab_size(self) -> int:
        return int(self.map.shape[0])

    def buckets(self) -> list[np.ndarray]:
        order = np.argsort(self.map, kind="stable")
        counts = np.bincount(self.map, minlength=self.out_dim)
        return np.split(order, np.cumsum(counts)[:-1])

    def __eq__(self, other):
        return (
            isinstance(other, DimMap)
            and self.out_dim == other.out_dim
            and self.seed == other.seed
            and np.array_equal(self.map, other.map)
        )


def build_dim_map(vocab_size: int, out_dim: int = 1000, seed: int = 0) -> DimMap:
    if vocab_size < 2 or out_dim < 2:
        raise InvalidArgument(f"need vocab_size >= 2 and out_dim >= 2, got {vocab_size}, {out_dim}")
    ids = np.arange(vocab_size, dtype=np.uint64)
    m = (hash64(seed, 0xD1A7, ids) % np.uint64(out_dim)).astype(np.int64)
    m.setflags(write=False)
    return DimMap(out_dim=out_dim, seed=seed, map=m)


@dataclass(frozen=True)
class TokenSeq:
    tokens: tuple[int, ...]
    origin: str = "generated"  # generated | human | attacked

    def __post_init__(self):
        if self.origin not in ("generated", "human", "attacked"):
            raise InvalidArgument(f"unknown origin tag {self.origin!r}")

    @classmethod
    def of(cls, tokens: Sequence[int], origin: str = "generated") -> "TokenSeq":
        return cls(tuple(int(t) for t in tokens), origin)

    def __len__(self):
        return len(self.tokens)

    def check(self, vocab_size: int) -> "TokenSeq":
        for t in self.tokens:
            if not 0 <= t < vocab_size:
                raise InvalidArgument(f"token id {t} outside vocab of size {vocab_size}")
        return self


@dataclass(frozen=True, eq=False)
class Embedding:
    values: np.ndarray
    norm: float = field(init=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "norm", float(np.linalg.norm(v)))

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True, eq=False)
class WatermarkLogits:
    values: np.ndarray
    transform: str = "raw"

    def __post_init__(self):
        if self.transform not in TRANSFORM_KINDS:
            raise InvalidArgument(f"unknown transform tag {self.transform!r}")
        v = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise InvalidArgument("watermark logits must be finite")
        object.__setattr__(self, "values", v)


def token_score(wl: WatermarkLogits, dmap: DimMap, token: int) -> float:
    if not 0 <= token < dmap.vocab_size:
        raise InvalidArgument(f"token {token} outside vocab of size {dmap.vocab_size}")
    return float(wl.values[dmap.map[token]])


def expand_to_vocab(values: np.ndarray, dmap: DimMap) -> np.ndarray:
    """Per-token watermark bias over the full vocabulary."""
    return np.asarray(values)[..., dmap.map]
