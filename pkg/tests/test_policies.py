"""Path-selection policies: fixed examples, affine invariance, convergence."""

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twosyn.policies import (
    ArmStats,
    EpsilonGreedyPolicy,
    StaticPolicy,
    ThompsonPolicy,
    TwoSynPolicy,
    UcbPolicy,
    UniformRandomPolicy,
    make_policy,
    reward_from_fct,
)
from twosyn.simcore import RngStreams

PAIR = (1, 101)


def feed(policy, outcomes, pair=PAIR):
    for path, fct in outcomes:
        policy.record_outcome(pair, path, fct)


class TestStaticAndRandom:
    def test_static_always_returns_its_path(self):
        p = StaticPolicy(2, 2)
        feed(p, [(1, 0.5), (2, 9.9)])
        assert all(p.select_path(PAIR) == 2 for _ in range(5))

    def test_static_path_must_exist(self):
        with pytest.raises(ValueError):
            StaticPolicy(2, 3)

    def test_uniform_random_covers_all_paths(self):
        p = UniformRandomPolicy(3, random.Random(1))
        picks = {p.select_path(PAIR) for _ in range(200)}
        assert picks == {1, 2, 3}

    def test_two_syn_defers_to_the_race(self):
        p = TwoSynPolicy(2)
        assert p.uses_race
        with pytest.raises(RuntimeError):
            p.select_path(PAIR)


class TestEpsilonGreedy:
    def test_zero_epsilon_exploits_best_mean(self):
        p = EpsilonGreedyPolicy(2, random.Random(1), epsilon=0.0)
        feed(p, [(1, 0.5), (2, 0.3)])  # rewards -0.5 and -0.3: path 2 wins
        assert all(p.select_path(PAIR) == 2 for _ in range(10))

    def test_unpulled_arm_goes_first(self):
        p = EpsilonGreedyPolicy(3, random.Random(1), epsilon=0.0)
        feed(p, [(1, 0.5)])
        assert p.select_path(PAIR) == 2  # lowest-index unpulled arm

    def test_exploration_picks_non_best_paths(self):
        p = EpsilonGreedyPolicy(2, random.Random(3), epsilon=1.0)
        feed(p, [(1, 0.5), (2, 0.3)])
        assert all(p.select_path(PAIR) == 1 for _ in range(10))


class TestUcb:
    def test_unpulled_arm_first(self):
        p = UcbPolicy(2, c=1.0)
        feed(p, [(1, 0.5)])
        assert p.select_path(PAIR) == 2

    def test_argmax_tie_breaks_to_lowest_index(self):
        p = UcbPolicy(3, c=1.0)
        feed(p, [(1, 0.4), (2, 0.4), (3, 0.4)])
        assert p.select_path(PAIR) == 1

    def test_prefers_clearly_better_arm_after_warmup(self):
        p = UcbPolicy(2, c=1.0)
        feed(p, [(1, 2.0), (2, 0.2)] * 10)
        picks = [p.select_path(PAIR) for _ in range(5)]
        assert picks == [2] * 5


class TestRecordOutcome:
    def test_first_outcome_sets_the_mean(self):
        p = EpsilonGreedyPolicy(2, random.Random(1))
        p.record_outcome(PAIR, 1, 0.8)
        arm = p.arms(PAIR)[0]
        assert arm.pulls == 1
        assert arm.mean == reward_from_fct(0.8) == -0.8

    def test_mean_of_two_outcomes(self):
        p = EpsilonGreedyPolicy(2, random.Random(1))
        feed(p, [(1, 1.0), (1, 2.0)])
        assert p.arms(PAIR)[0].mean == -1.5

    def test_stateless_policies_ignore_outcomes(self):
        for p in (StaticPolicy(2, 1), UniformRandomPolicy(2, random.Random(1)), TwoSynPolicy(2)):
            p.record_outcome(PAIR, 1, 1.0)  # must not raise or keep state
            assert not hasattr(p, "_stats") or not getattr(p, "_stats")

    def test_pairs_are_isolated(self):
        p = EpsilonGreedyPolicy(2, random.Random(1), epsilon=0.0)
        feed(p, [(1, 0.1), (2, 5.0)], pair=(1, 101))
        feed(p, [(1, 5.0), (2, 0.1)], pair=(2, 102))
        assert p.select_path((1, 101)) == 1
        assert p.select_path((2, 102)) == 2


@settings(max_examples=40, deadline=None)
@given(
    st.lists(
        st.tuples(st.integers(1, 2), st.floats(0.01, 10.0)), min_size=4, max_size=30
    ).filter(lambda o: {1, 2} <= {p for p, _ in o}),
    st.floats(0.001, 100.0),
    st.floats(-50.0, 50.0),
)
def test_positive_affine_reward_transform_preserves_choices(outcomes, scale, shift):
    """Scaling/shifting all FCT-derived rewards must not change the exploit
    choice of epsilon-greedy nor UCB's argmax."""
    eg_a = EpsilonGreedyPolicy(2, random.Random(5), epsilon=0.0)
    eg_b = EpsilonGreedyPolicy(2, random.Random(5), epsilon=0.0)
    ucb_a = UcbPolicy(2, c=1.0)
    ucb_b = UcbPolicy(2, c=1.0)
    for path, fct in outcomes:
        # transform rewards by feeding transformed "fct": reward = -fct, so
        # reward' = scale*reward + shift  <=>  fct' = scale*fct - shift
        eg_a.record_outcome(PAIR, path, fct)
        eg_b.record_outcome(PAIR, path, scale * fct - shift)
        ucb_a.record_outcome(PAIR, path, fct)
        ucb_b.record_outcome(PAIR, path, scale * fct - shift)
    assert eg_a.select_path(PAIR) == eg_b.select_path(PAIR)
    seq_a = [ucb_a.select_path(PAIR) for _ in range(5)]
    seq_b = [ucb_b.select_path(PAIR) for _ in range(5)]
    assert seq_a == seq_b


@pytest.mark.parametrize("name", ["egreedy", "ucb", "thompson"])
def test_convergence_on_stochastically_dominant_arm(name):
    """Two arms, one strictly better; over 200 pulls the better arm must be
    chosen in more than 80% of the last 100 (epsilon=0.1, c=1)."""
    streams = RngStreams(2024)
    policy = make_policy(name, 2, streams, epsilon=0.1, ucb_c=1.0)
    rng = random.Random(99)
    picks = []
    for _ in range(200):
        path = policy.select_path(PAIR)
        picks.append(path)
        # arm 2 dominates: fct ~ U(0.2, 0.4) vs arm 1 ~ U(0.8, 1.2)
        fct = rng.uniform(0.2, 0.4) if path == 2 else rng.uniform(0.8, 1.2)
        policy.record_outcome(PAIR, path, fct)
    tail = picks[100:]
    assert tail.count(2) / len(tail) > 0.8


def test_thompson_posterior_tightens_with_data():
    streams = RngStreams(5)
    p = ThompsonPolicy(2, streams.stream("policy.thompson"))
    for _ in range(50):
        p.record_outcome(PAIR, 1, 1.0)
        p.record_outcome(PAIR, 2, 0.2)
    post = p._post(PAIR)
    assert post[1].mean > post[0].mean
    assert post[0].var < 0.1 and post[1].var < 0.1
    assert all(p.select_path(PAIR) == 2 for _ in range(10))


def test_make_policy_parses_names():
    streams = RngStreams(1)
    assert make_policy("static2", 2, streams).path == 2
    assert make_policy("2syn", 2, streams).uses_race
    assert make_policy("egreedy", 2, streams, epsilon=0.2).epsilon == 0.2
    assert make_policy("ucb", 2, streams, ucb_c=1.5).c == 1.5
    with pytest.raises(ValueError):
        make_policy("zigzag", 2, streams)


def test_arm_stats_variance():
    arm = ArmStats()
    for r in (-1.0, -2.0, -3.0):
        arm.pulls += 1
        arm.reward_sum += r
        arm.reward_sq_sum += r * r
    assert arm.mean == -2.0
    assert arm.variance == pytest.approx(1.0)
