"""Property-based checks of the module invariants."""

import math

import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sirwm.analysis import repetition_stats
from sirwm.attacks import random_edit, synonym_attack
from sirwm.core import WatermarkLogits, build_dim_map, token_score
from sirwm.detect import calibrate_threshold, metrics, sir_token_scores, z_mean_stat, z_std_stat
from sirwm.embed import SyntheticSemantics, lexicon_from_dim_map
from sirwm.generate import _green_mask
from sirwm.net import LossConfig, gamma_scale, init_params, shape_transform, tanh_scale
from sirwm.toylm import Decode, decode_step
from sirwm.train import Checkpoint

from oracles import best_f1_py

V = 150
DM = build_dim_map(V, 25, seed=3)
LEX = lexicon_from_dim_map(DM)
SEM = SyntheticSemantics(V, 12, seed=5, synonym_groups=LEX, eps=0.0, window=10, n_topics=4, topic_weight=0.5)
NET = init_params(12, 25, seed=6)

tokens = st.lists(st.integers(0, V - 1), min_size=1, max_size=40)
finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)
fast = settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])


@fast
@given(st.integers(2, 500), st.integers(2, 60), st.integers(0, 2**63))
def test_dim_map_is_pure_function(v, o, seed):
    a, b = build_dim_map(v, o, seed), build_dim_map(v, o, seed)
    assert a == b and a.map.min() >= 0 and a.map.max() < o


@fast
@given(arrays(np.float64, 25, elements=finite), st.integers(0, V - 1))
def test_token_score_shared_by_bucket(values, t):
    wl = WatermarkLogits(values)
    for u in DM.buckets()[DM.map[t]]:
        assert token_score(wl, DM, int(u)) == token_score(wl, DM, t)


@fast
@given(arrays(np.float64, st.integers(1, 30), elements=finite))
def test_tanh_scale_is_odd_and_bounded(x):
    np.testing.assert_array_equal(tanh_scale(-x).values, -tanh_scale(x).values)
    assert np.all(np.abs(tanh_scale(x).values) <= 1.0)


@fast
@given(arrays(np.float64, st.integers(2, 30), elements=finite, unique=True), st.sampled_from(["tanh_k2", "linear", "tanh10_linear", "cubic"]))
def test_shape_transforms_keep_the_argmax(x, kind):
    y = shape_transform(x, kind)
    assert y[np.argmax(x)] == y.max()


@fast
@given(arrays(np.float64, st.integers(1, 30), elements=finite), st.floats(0.05, 0.95))
def test_gamma_scale_preserves_sign(v, gamma):
    np.testing.assert_array_equal(np.sign(gamma_scale(v, gamma)), np.sign(v))


@fast
@given(tokens, st.integers(0, 2**32))
def test_synonym_substitution_leaves_embedding_unchanged(toks, seed):
    swapped = synonym_attack(toks, LEX, 1.0, seed=seed).tokens.tokens
    assert np.array_equal(SEM.embed(toks).values, SEM.embed(list(swapped)).values)


@fast
@given(tokens, st.integers(0, V - 1))
def test_appending_a_token_moves_the_window_mean_a_little(toks, t):
    def mean(ts):
        w = ts[-SEM.window :]
        return SEM.token_vectors[w].mean(axis=0)

    before, after = mean(toks), mean(toks + [t])
    bound = 2.0 / min(SEM.window, len(toks))
    assert np.linalg.norm(after - before) <= bound + 1e-12
    m = mean(toks + [t])
    np.testing.assert_allclose(SEM.embed(toks + [t]).values, m / np.linalg.norm(m), atol=1e-12)


@fast
@given(tokens, st.integers(0, V - 1), st.data())
def test_score_locality(toks, new, data):
    j = data.draw(st.integers(0, len(toks) - 1))
    mod = list(toks)
    mod[j] = new
    a = sir_token_scores(NET, SEM, DM, toks)
    b = sir_token_scores(NET, SEM, DM, mod)
    np.testing.assert_array_equal(a[:j], b[:j])


@fast
@given(arrays(np.float64, st.integers(2, 40), elements=st.integers(-40, 40).map(lambda k: k / 8)), st.integers(-50, 50), st.integers(0, 99), st.integers(0, 50))
def test_decoding_ignores_constant_logit_shift(x, c, seed, step):
    for m in (Decode("greedy"), Decode("sample", seed), Decode("beam", width=3)):
        assert decode_step(x + c, m, step) == decode_step(x, m, step)


@fast
@given(arrays(np.float64, st.integers(1, 400), elements=st.floats(-1, 1)))
def test_z_identity_at_half(scores):
    assert abs(z_std_stat(scores) - math.sqrt(len(scores)) * z_mean_stat(scores)) <= 1e-9


@fast
@given(st.lists(finite, min_size=100, max_size=300), st.floats(0.0, 0.5), st.floats(0.0, 0.5))
def test_threshold_monotone_in_fpr(null, f1, f2):
    lo, hi = sorted((f1, f2))
    assert calibrate_threshold(null, hi).cut <= calibrate_threshold(null, lo).cut


@fast
@given(st.lists(st.integers(-5, 5).map(float), min_size=1, max_size=12), st.lists(st.integers(-5, 5).map(float), min_size=1, max_size=12))
def test_best_f1_matches_oracle(pos, neg):
    assert metrics(pos, neg).best_f1 == best_f1_py(pos, neg)


@fast
@given(st.lists(st.integers(0, 30), min_size=2, max_size=60), st.permutations(list(range(31))), st.integers(1, 3))
def test_repetition_invariant_under_relabeling(toks, perm, n):
    if len(toks) < n:
        return
    assert repetition_stats(toks, n) == repetition_stats([perm[t] for t in toks], n)


@fast
@given(tokens, st.floats(0, 0.9), st.integers(0, 2**32), st.sampled_from(["substitute", "delete"]))
def test_attacks_are_deterministic(toks, ratio, seed, kind):
    assert random_edit(toks, kind, ratio, seed, V) == random_edit(toks, kind, ratio, seed, V)
    assert synonym_attack(toks, LEX, ratio, seed) == synonym_attack(toks, LEX, ratio, seed)


@fast
@given(st.integers(2, 300), st.floats(0.05, 0.95), st.integers(0, 2**32), st.lists(st.integers(0, 299), max_size=3))
def test_green_list_size(v, gamma, seed, ctx):
    assert _green_mask(v, gamma, seed, tuple(ctx)).sum() == round(gamma * v)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(2, 6), st.integers(2, 4), st.integers(0, 1000))
def test_checkpoint_roundtrip_any_shape(d, h, o, layers, seed):
    ck = Checkpoint(init_params(d, o, h, layers, seed), LossConfig(gamma=0.3), build_dim_map(20, o, seed))
    again = Checkpoint.from_bytes(ck.to_bytes())
    assert again.to_bytes() == ck.to_bytes()
    assert all(np.array_equal(a, b) for a, b in zip(again.params.arrays(), ck.params.arrays()))
