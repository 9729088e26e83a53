import math

import numpy as np
import pytest

from sirwm.attacks import (
    AttackSpec,
    PairFormatError,
    copy_paste_attack,
    insertion_strip_attack,
    load_paraphrase_pairs,
    random_edit,
    synonym_attack,
    write_paraphrase_pairs,
)
from sirwm.core import InvalidArgument, TokenSeq, build_dim_map
from sirwm.embed import SyntheticSemantics
from sirwm.generate import GenerationConfig, SirWatermark
from sirwm.net import init_params
from sirwm.toylm import Decode, ToyLM

LEX = [[1, 2, 3], [4, 5], [10, 11]]


def test_synonym_attack_count_and_membership():
    toks = [1, 4, 7, 10, 2, 8, 5, 11]
    res = synonym_attack(toks, LEX, 0.5, seed=3)
    eligible = [0, 1, 3, 4, 6, 7]
    assert len(res.modified) == math.ceil(0.5 * len(eligible))
    group = {t: g for g in LEX for t in g}
    out = res.tokens.tokens
    for i, (a, b) in enumerate(zip(toks, out)):
        if i in res.modified:
            assert a != b and b in group[a]
        else:
            assert a == b
    assert res.tokens.origin == "attacked"


def test_synonym_attack_respects_start_and_ratio_bounds():
    toks = [1, 4, 1, 4]
    res = synonym_attack(toks, LEX, 1.0, start=2)
    assert res.tokens.tokens[:2] == (1, 4) and res.modified == [2, 3]
    assert synonym_attack(toks, LEX, 0.0).modified == []
    with pytest.raises(InvalidArgument):
        synonym_attack(toks, LEX, 1.5)
    with pytest.raises(InvalidArgument):
        synonym_attack(toks, [[1, 2], [2, 3]], 0.5)


def test_synonym_attack_without_eligible_tokens_warns(caplog):
    res = synonym_attack([7, 8, 9], LEX, 0.5)
    assert res.tokens.tokens == (7, 8, 9) and res.modified == []
    assert "no eligible" in caplog.text


def test_constrained_synonym_attack_filters_large_moves():
    sem = SyntheticSemantics(20, 8, seed=0, synonym_groups=LEX, eps=1.0, window=4)
    toks = [1, 4, 10, 2, 5]
    free = synonym_attack(toks, LEX, 1.0, seed=1)
    strict = synonym_attack(toks, LEX, 1.0, seed=1, provider=sem, max_cos_drop=0.0)
    loose = synonym_attack(toks, LEX, 1.0, seed=1, provider=sem, max_cos_drop=2.0)
    assert loose.tokens == free.tokens
    assert len(strict.modified) < len(free.modified)


def test_random_substitution_and_deletion():
    toks = list(range(20))
    sub = random_edit(toks, "substitute", 0.25, seed=1, vocab_size=50, start=4)
    assert len(sub.modified) == 4 and all(p >= 4 for p in sub.modified)
    assert all(sub.tokens.tokens[i] == toks[i] for i in range(20) if i not in sub.modified)
    dele = random_edit(toks, "delete", 0.5, seed=1, vocab_size=50)
    assert len(dele.tokens) == 10
    assert [t for i, t in enumerate(toks) if i not in dele.modified] == list(dele.tokens.tokens)
    with pytest.raises(InvalidArgument):
        random_edit(toks, "delete", 1.0, 0, 50)
    with pytest.raises(InvalidArgument):
        random_edit(toks, "swap", 0.1, 0, 50)


def test_copy_paste_layouts():
    wm, hu = [100, 101, 102, 103], [1, 2, 3, 4, 5]
    pre = copy_paste_attack(wm, hu, 2, layout="prefix")
    assert pre.tokens.tokens == (1, 2, 3, 4, 5, 100, 101) and pre.span == (5, 7)
    emb = copy_paste_attack(wm, hu, 3, layout="embedded", seed=4)
    a, b = emb.span
    assert emb.tokens.tokens[a:b] == (100, 101, 102)
    assert emb.tokens.tokens[:a] + emb.tokens.tokens[b:] == tuple(hu)
    with pytest.raises(InvalidArgument):
        copy_paste_attack(wm, hu, 5)
    with pytest.raises(InvalidArgument):
        copy_paste_attack(wm, hu, 1, layout="sandwich")


def test_insertion_strip_returns_requested_length():
    V = 60
    sem = SyntheticSemantics(V, 8, seed=1, null_tokens=(V - 1,))
    lm = ToyLM(V, 2)
    wm = SirWatermark(init_params(8, 10, seed=0), sem, build_dim_map(V, 10))
    cfg = GenerationConfig(max_new_tokens=12, decode=Decode("sample", 3))
    trace, stripped = insertion_strip_attack(lm, wm, cfg, [1, 2, 3], V - 1, period=1)
    assert len(stripped) == 12 and len(trace.tokens) == 23
    assert all(trace.tokens[i] == V - 1 for i in trace.forced)
    _, plain = insertion_strip_attack(lm, wm, cfg, [1, 2, 3], V - 1, period=None)
    assert len(plain) == 12
    with pytest.raises(InvalidArgument):
        insertion_strip_attack(lm, wm, cfg, [1], V, period=1)


def test_attack_spec_validation():
    assert AttackSpec("synonym", 0.5).ratio == 0.5
    with pytest.raises(InvalidArgument):
        AttackSpec("paraphrase")
    with pytest.raises(InvalidArgument):
        AttackSpec("synonym", 1.2)


def test_paraphrase_pairs_roundtrip(tmp_path):
    p = tmp_path / "pairs.jsonl"
    write_paraphrase_pairs(p, [([1, 2], [2, 1]), ("a b", "b a")])
    pairs = load_paraphrase_pairs(p)
    assert pairs[0] == (TokenSeq.of([1, 2]), TokenSeq.of([2, 1], "attacked"))
    assert pairs[1] == ("a b", "b a")


@pytest.mark.parametrize("line", ["{", "[1]", '{"orig_tokens": [1]}', '{"orig_text": 1, "para_text": "x"}'])
def test_paraphrase_pair_errors_name_the_line(tmp_path, line):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"orig_text": "a", "para_text": "b"}\n' + line + "\n")
    with pytest.raises(PairFormatError, match=":2:"):
        load_paraphrase_pairs(p)
