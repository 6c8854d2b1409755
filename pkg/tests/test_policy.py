import math

import numpy as np
import pytest
from helpers import central_difference, deterministic_policy, rel_err
from hypothesis import given, settings
from hypothesis import strategies as st

from acelab.policy import (
    EnumerationTooLarge,
    PolicyParams,
    conditional_distribution,
    context_entropies,
    enumerate_sequences,
    exact_kl,
    pretrain,
    sample_batch,
    sample_sequence,
    score_function,
    sequence_logprob,
    snapshot,
    token_entropy,
    token_logprobs,
    weighted_score_sum,
)

seeds = st.integers(0, 2**31 - 1)


def test_shape_validation():
    with pytest.raises(ValueError):
        PolicyParams(np.zeros((1, 2, 3, 3)))  # prev axis must be V + 1
    with pytest.raises(ValueError):
        PolicyParams(np.zeros((1, 2, 3)))
    bad = np.zeros((1, 1, 3, 2))
    bad[0, 0, 0, 0] = np.inf
    with pytest.raises(ValueError):
        PolicyParams(bad)


def test_bos_is_last_prev_index():
    p = PolicyParams.uniform(4, 2)
    assert p.bos == 4
    p.logits[0, 0, 4, 2] = 3.0
    probs = conditional_distribution(p, 0, 0, p.bos).probs
    assert probs.argmax() == 2


def test_uniform_row():
    probs = conditional_distribution(PolicyParams.uniform(4, 1), 0, 0, 4).probs
    np.testing.assert_allclose(probs, [0.25] * 4, atol=1e-15)


def test_hand_softmax():
    p = PolicyParams.uniform(2, 1)
    p.logits[0, 0, 2] = [1.0, 1.0 + math.log(2)]
    np.testing.assert_allclose(conditional_distribution(p, 0, 0, 2).probs, [1 / 3, 2 / 3], rtol=1e-12)


def test_out_of_range_index():
    p = PolicyParams.uniform(3, 2)
    with pytest.raises(IndexError):
        conditional_distribution(p, 0, 2, 0)
    with pytest.raises(IndexError):
        conditional_distribution(p, 1, 0, 0)
    with pytest.raises(IndexError):
        conditional_distribution(p, 0, 0, 4)
    with pytest.raises(IndexError):
        sequence_logprob(p, 0, [0, 3])


@settings(max_examples=50, deadline=None)
@given(seeds, st.floats(-50, 50))
def test_shift_invariance(seed, k):
    rng = np.random.default_rng(seed)
    p = PolicyParams.random(3, 3, 2, 2.0, rng)
    q = snapshot(p)
    q.logits[1, 2, 1] += k
    q.logits[0, 0, 3] += k
    for cls, pos, prev in [(1, 2, 1), (0, 0, 3)]:
        a = conditional_distribution(p, cls, pos, prev).probs
        b = conditional_distribution(q, cls, pos, prev).probs
        assert np.abs(a - b).max() <= 1e-10
        assert abs(token_entropy(p, cls, pos, prev) - token_entropy(q, cls, pos, prev)) <= 1e-10
    toks = sample_batch(p, 1, 5, 3, rng)[0]
    assert np.abs(token_logprobs(p, 1, toks) - token_logprobs(q, 1, toks)).max() <= 1e-10


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_rows_normalised_and_positive(seed):
    p = PolicyParams.random(5, 3, 2, 3.0, np.random.default_rng(seed))
    for idx in np.ndindex(p.logits.shape[:3]):
        probs = conditional_distribution(p, *idx).probs
        assert abs(probs.sum() - 1) <= 1e-12
        assert (probs > 0).all()


def test_deterministic_policy_sampling():
    p = deterministic_policy([2, 0, 1], 3)
    s = sample_sequence(p, 0, 3, np.random.default_rng(0))
    assert s.tokens.tolist() == [2, 0, 1]
    assert abs(s.logp_theta) < 1e-9


def test_uniform_sample_logp():
    s = sample_sequence(PolicyParams.uniform(4, 2), 0, 2, np.random.default_rng(0))
    assert s.logp_theta == pytest.approx(2 * math.log(0.25), abs=1e-12)
    assert abs(s.logp_theta - s.per_token_logp.sum()) <= 1e-10
    assert ((0 <= s.tokens) & (s.tokens < 4)).all()


def test_sampling_is_reproducible():
    p = PolicyParams.random(4, 3, 1, 1.0, np.random.default_rng(5))
    a = sample_sequence(p, 0, 3, np.random.default_rng(9))
    b = sample_sequence(p, 0, 3, np.random.default_rng(9))
    assert a.tokens.tolist() == b.tokens.tolist()
    assert a.logp_theta == b.logp_theta
    ta, la = sample_batch(p, 0, 64, 3, np.random.default_rng(9))
    tb, lb = sample_batch(p, 0, 64, 3, np.random.default_rng(9))
    assert (ta == tb).all() and (la == lb).all()


def test_eos_stops_early():
    p = deterministic_policy([1, 0, 0, 0], 2)
    s = sample_sequence(p, 0, 4, np.random.default_rng(0), eos_token=1)
    assert s.tokens.tolist() == [1]
    assert s.per_token_logp.shape == (1,)


def test_batch_sampling_frequencies_match_enumeration():
    p = PolicyParams.random(3, 2, 1, 1.0, np.random.default_rng(2))
    seqs, probs = enumerate_sequences(p, 0, 2)
    toks, _ = sample_batch(p, 0, 200_000, 2, np.random.default_rng(3))
    idx = toks[:, 0] * 3 + toks[:, 1]
    freq = np.bincount(idx, minlength=9) / toks.shape[0]
    se = np.sqrt(probs * (1 - probs) / toks.shape[0])
    assert (np.abs(freq - probs) <= 4 * se).all()


def test_replay_matches_recorded_logp():
    p = PolicyParams.random(4, 3, 2, 1.5, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    for _ in range(20):
        s = sample_sequence(p, 1, 3, rng)
        assert abs(sequence_logprob(p, 1, s.tokens) - s.logp_theta) <= 1e-12
    toks, lp = sample_batch(p, 1, 50, 3, rng)
    assert np.abs(token_logprobs(p, 1, toks) - lp).max() <= 1e-12


def test_uniform_sequence_logprob():
    assert sequence_logprob(PolicyParams.uniform(4, 3), 0, [0, 3, 1]) == pytest.approx(3 * math.log(0.25), abs=1e-12)


def test_constructed_conditionals():
    # path 0,0,0 with per-step probs 1/2, 1/4, 1/8
    p = PolicyParams.uniform(2, 3)
    p.logits[0, 1, 0] = [0.0, math.log(3)]
    p.logits[0, 2, 0] = [0.0, math.log(7)]
    assert sequence_logprob(p, 0, [0, 0, 0]) == pytest.approx(math.log(1 / 64), abs=1e-12)


def test_score_function_rows():
    p = PolicyParams.uniform(2, 1)
    g = score_function(p, 0, [0])
    np.testing.assert_allclose(g[0, 0, 2], [0.5, -0.5])
    assert np.count_nonzero(g) == 2
    d = deterministic_policy([1], 2, big=50.0)
    assert np.abs(score_function(d, 0, [1])).max() < 1e-15


def test_expected_token_score_is_zero():
    p = PolicyParams.random(4, 2, 1, 2.0, np.random.default_rng(0))
    probs = conditional_distribution(p, 0, 0, p.bos).probs
    total = sum(probs[v] * score_function(p, 0, [v])[0, 0, p.bos] for v in range(4))
    assert np.abs(total).max() <= 1e-10


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_expected_sequence_score_is_zero(seed):
    p = PolicyParams.random(3, 3, 1, 1.5, np.random.default_rng(seed))
    seqs, probs = enumerate_sequences(p, 0, 3)
    assert np.abs(weighted_score_sum(p, 0, seqs, probs)).max() <= 1e-8


@pytest.mark.parametrize("seed", range(10))
def test_score_function_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = PolicyParams.random(3, 3, 2, 1.0, rng)
    cls = int(rng.integers(2))
    toks = rng.integers(0, 3, 3)
    num = central_difference(lambda: sequence_logprob(p, cls, toks), p.logits)
    assert rel_err(score_function(p, cls, toks), num) <= 1e-5


def test_weighted_score_sum_token_weights():
    p = PolicyParams.random(3, 2, 1, 1.0, np.random.default_rng(0))
    toks = np.array([[0, 1], [2, 2]])
    w = np.array([[0.5, -1.0], [2.0, 0.25]])
    num = central_difference(lambda: float((w * token_logprobs(p, 0, toks)).sum()), p.logits)
    assert rel_err(weighted_score_sum(p, 0, toks, w), num) <= 1e-5


def test_enumeration():
    seqs, probs = enumerate_sequences(PolicyParams.random(2, 3, 1, 1.0, np.random.default_rng(0)), 0, 3)
    assert seqs.shape == (8, 3)
    assert abs(probs.sum() - 1) <= 1e-10
    _, probs = enumerate_sequences(PolicyParams.uniform(3, 2), 0, 2)
    np.testing.assert_allclose(probs, 1 / 9, rtol=1e-12)


def test_enumeration_cap():
    with pytest.raises(EnumerationTooLarge) as err:
        enumerate_sequences(PolicyParams.uniform(10, 7), 0, 7)
    assert err.value.size == 10**7
    assert "10000000" in str(err.value)


def test_entropy_values():
    assert token_entropy(PolicyParams.uniform(4, 1), 0, 0, 4) == pytest.approx(math.log(4), abs=1e-12)
    assert token_entropy(deterministic_policy([0], 3, big=40.0), 0, 0, 3) < 1e-6
    p = PolicyParams.uniform(2, 1)
    p.logits[0, 0, 2] = [math.log(2), 0.0]
    assert token_entropy(p, 0, 0, 2) == pytest.approx(-(2 / 3) * math.log(2 / 3) - (1 / 3) * math.log(1 / 3))
    assert token_entropy(p, 0, 0, 2) == pytest.approx(0.6365, abs=1e-4)


@settings(max_examples=30, deadline=None)
@given(seeds, st.floats(0.1, 20))
def test_entropy_bounds(seed, scale):
    p = PolicyParams.random(5, 2, 1, scale, np.random.default_rng(seed))
    toks, _ = sample_batch(p, 0, 16, 2, np.random.default_rng(seed))
    h = context_entropies(p, 0, toks)
    assert (h >= -1e-12).all() and (h <= math.log(5) + 1e-12).all()


def test_snapshot_independent():
    p = PolicyParams.random(3, 2, 1, 1.0, np.random.default_rng(0))
    q = snapshot(p)
    assert sequence_logprob(p, 0, [1, 2]) == sequence_logprob(q, 0, [1, 2])
    before = q.logits.copy()
    p.logits += 1.0
    p.logits[0, 0, 0, 0] = 7.0
    assert (q.logits == before).all()
    assert (snapshot(q).logits == q.logits).all()


def test_exact_kl_zero_and_positive():
    p = PolicyParams.random(3, 2, 1, 1.0, np.random.default_rng(0))
    assert exact_kl(p, p, 0, 2) == 0.0
    q = PolicyParams.random(3, 2, 1, 1.0, np.random.default_rng(1))
    assert exact_kl(p, q, 0, 2) > 0


def test_pretrain_moves_toward_target():
    base = PolicyParams.uniform(3, 2, 2)
    p = pretrain(base, np.random.default_rng(0), 200, target_scale=2.0)
    assert (base.logits == 0).all()
    assert exact_kl(p, base, 0, 2) > 0.05
