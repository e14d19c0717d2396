import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from rlpost.errors import ContractViolation, UndefinedKLError
from rlpost.gradcheck import central_difference, random_objective_instance, relative_error
from rlpost.policy import ANS_CLOSE, ANS_OPEN, FIRST_FILLER, FIRST_OPTION, PolicyParams, TokenSeq, grad_log_prob
from rlpost.rlcore import (
    ClipConfig,
    RolloutGroup,
    clipped_term,
    dapo_objective,
    dynamic_sampling_filter,
    group_advantages,
    grpo_objective,
    importance_ratio,
    token_kl,
)

from conftest import answer_seq, make_group, prompt_of

rewards_st = st.lists(st.floats(-10, 10, allow_nan=False), min_size=2, max_size=16)


def test_advantage_examples():
    np.testing.assert_array_equal(group_advantages([1, 0, 0, 1]), [1, -1, -1, 1])
    np.testing.assert_array_equal(group_advantages([2, 0]), [1, -1])
    for c in (0.0, -1.0, 3.7):
        np.testing.assert_array_equal(group_advantages([c] * 4), np.zeros(4))
    with pytest.raises(ContractViolation):
        group_advantages([1.0])


@given(rewards_st)
def test_advantages_are_standardized(r):
    r = np.asarray(r)
    a = group_advantages(r)
    if r.std() < 1e-8:
        assert np.all(a == 0)
    else:
        assert abs(a.mean()) < 1e-9
        assert abs(a.std() - 1) < 1e-9


@given(rewards_st, st.floats(0.1, 10), st.floats(-5, 5))
def test_advantages_invariant_to_affine_rewards(r, scale, shift):
    r = np.asarray(r)
    assume(r.std() > 1e-3)
    np.testing.assert_allclose(group_advantages(r * scale + shift), group_advantages(r), atol=1e-9)


def test_importance_ratio_examples():
    assert importance_ratio(-0.3, -0.3) == 1.0
    assert importance_ratio(math.log(0.2), math.log(0.1)) == pytest.approx(2.0, abs=1e-12)
    assert importance_ratio(math.log(0.1), math.log(0.2)) == pytest.approx(0.5, abs=1e-12)


def test_clipped_term_examples():
    assert clipped_term(1.5, 1.0, 0.2, 0.2) == pytest.approx(1.2)
    assert clipped_term(0.5, -1.0, 0.2, 0.2) == pytest.approx(-0.8)
    for adv in (-2.0, 0.0, 3.0):
        assert clipped_term(1.0, adv, 0.2, 0.28) == adv


@given(st.floats(1e-3, 10), st.floats(-10, 10), st.floats(0.01, 0.9), st.floats(0.01, 2))
def test_clipped_term_bounds(ratio, adv, eps_low, eps_high):
    t = clipped_term(ratio, adv, eps_low, eps_high)
    assert t <= ratio * adv + 1e-12
    assert abs(t) <= max(ratio, 1 + eps_high, 1 / (1 - eps_low)) * abs(adv) + 1e-12


def test_token_kl_examples():
    assert token_kl([0.3, 0.7], [0.3, 0.7]) == 0.0
    assert token_kl([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2))
    with pytest.raises(UndefinedKLError):
        token_kl([0.5, 0.5], [1.0, 0.0])


@given(st.lists(st.floats(0.01, 1), min_size=2, max_size=8), st.data())
def test_token_kl_nonnegative(p, data):
    q = data.draw(st.lists(st.floats(0.01, 1), min_size=len(p), max_size=len(p)))
    p = np.asarray(p) / sum(p)
    q = np.asarray(q) / sum(q)
    assert token_kl(p, q) >= 0


def test_clip_config_invariants():
    with pytest.raises(ContractViolation):
        ClipConfig(1.0, 0.2)
    with pytest.raises(ContractViolation):
        ClipConfig(0.2, 0.2, -0.1)


def test_group_requires_two_responses(fmap, vocab):
    with pytest.raises(ContractViolation):
        RolloutGroup(prompt_of(vocab, [0]), [answer_seq(0)], [np.zeros(6)], "A")
    with pytest.raises(ContractViolation):
        RolloutGroup(prompt_of(vocab, [0]), [answer_seq(0), answer_seq(1)], [np.zeros(6), np.zeros(2)], "A")


def _group_with_correct(params, vocab, n_correct, G=8):
    responses = [answer_seq(0) if i < n_correct else answer_seq(1) for i in range(G)]
    return make_group(params, prompt_of(vocab, [0, 0, 1]), responses, "A")


def test_dynamic_sampling_examples(random_params, vocab):
    groups = [_group_with_correct(random_params, vocab, c) for c in (0, 8, 3)]
    kept, dropped = dynamic_sampling_filter(groups)
    assert kept == [groups[2]]
    assert dropped == groups[:2]


def test_degenerate_group_gives_zero(random_params, vocab):
    g = make_group(random_params, prompt_of(vocab, [2]), [answer_seq(0), answer_seq(1, think=(FIRST_FILLER,))])
    rep = grpo_objective([g], random_params, random_params, ClipConfig.symmetric(0.2, 0.04))
    assert rep.value == 0.0
    assert np.all(rep.gradient == 0.0)
    assert rep.gradient.shape == random_params.weights.shape


def test_ratio_one_reduces_to_reinforce(random_params, vocab):
    rng = np.random.default_rng(3)
    groups = []
    for _ in range(3):
        responses = [TokenSeq(tuple(int(t) for t in rng.integers(1, 16, size=rng.integers(1, 13))))
                     for _ in range(5)]
        groups.append(make_group(random_params, prompt_of(vocab, rng.integers(0, 6, size=10)), responses,
                                 rewards=rng.normal(size=5)))
    rep = grpo_objective(groups, random_params, random_params, ClipConfig.symmetric(0.2, 0.0))
    expected = np.zeros_like(random_params.weights)
    for g in groups:
        for a, seq in zip(g.advantages, g.responses):
            expected += a * grad_log_prob(random_params, g.prompt, seq) / (len(seq) * g.G * len(groups))
    assert np.max(np.abs(rep.gradient - expected)) < 1e-10
    assert rep.diagnostics["clip_fraction"] == 0.0
    assert rep.diagnostics["mean_ratio"] == pytest.approx(1.0, abs=1e-12)


def test_dapo_token_normalisation_example(random_params, vocab):
    prompt = prompt_of(vocab, [0])
    short = TokenSeq((FIRST_FILLER,))
    correct = TokenSeq((ANS_OPEN, FIRST_OPTION, ANS_CLOSE))
    g = make_group(random_params, prompt, [short, correct], "A", advantages=[1.0, -1.0])
    rep = dapo_objective([g], random_params, ClipConfig(0.2, 0.28, 0.0))
    assert rep.value == pytest.approx(-0.5, abs=1e-12)


def test_dapo_equals_grpo_for_equal_lengths(random_params, vocab):
    responses = [answer_seq(i % 3) for i in range(6)]
    g = make_group(random_params, prompt_of(vocab, [0, 1]), responses, "A", rewards=[1, 0, 0, 1, 0, 0])
    d = dapo_objective([g], random_params, ClipConfig(0.2, 0.28, 0.0))
    r = grpo_objective([g], random_params, random_params, ClipConfig.symmetric(0.2, 0.0))
    assert abs(d.value - r.value) < 1e-10
    assert np.max(np.abs(d.gradient - r.gradient)) < 1e-10


def test_dapo_rejects_unfiltered_group(random_params, vocab):
    good = _group_with_correct(random_params, vocab, 3)
    bad = _group_with_correct(random_params, vocab, 8)
    with pytest.raises(ContractViolation, match="group 1"):
        dapo_objective([good, bad], random_params, ClipConfig())


def test_empty_groups_rejected(random_params):
    with pytest.raises(ContractViolation):
        grpo_objective([], random_params, random_params, ClipConfig.symmetric())
    with pytest.raises(ContractViolation):
        dapo_objective([], random_params, ClipConfig())


def test_large_policy_shift_clips_tokens(random_params, vocab):
    # push the policy far from old so every positive-advantage token is clipped above
    responses = [answer_seq(0), answer_seq(1)]
    g = make_group(random_params, prompt_of(vocab, [0]), responses, "A", rewards=[1, 0])
    moved = random_params.weights.copy()
    moved[FIRST_OPTION, :] += 5.0
    moved[FIRST_OPTION + 1, :] += 5.0
    p = random_params.with_weights(moved)
    rep = dapo_objective([g], p, ClipConfig(0.2, 0.28, 0.0))
    assert rep.diagnostics["clip_fraction"] > 0


@settings(max_examples=6, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(["GRPO", "DAPO"]))
def test_objective_gradient_matches_finite_differences(seed, algorithm):
    inst = random_objective_instance(np.random.default_rng(seed), algorithm)

    def f(W):
        p = inst.params.with_weights(W)
        if algorithm == "GRPO":
            return grpo_objective(inst.groups, p, inst.ref, inst.cfg)
        return dapo_objective(inst.groups, p, inst.cfg)

    analytic = f(inst.params.weights).gradient
    numeric = central_difference(lambda W: f(W).value, inst.params.weights)
    assert relative_error(analytic, numeric) <= 1e-5
