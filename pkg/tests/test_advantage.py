import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from pglab.advantage import (
    MacroStepRecord,
    RewardNormalizer,
    SampleBranch,
    grpo_advantages,
    hybrid_advantages,
    hybrid_nstep_advantages,
    literal_group_advantage,
    ppo_advantage,
    transform_reward,
)
from pglab.oracles import exhaustive_group_check, random_record

OBS = np.zeros(2)


def branch(r, v_next=0.0, terminal=False, raw=None, action=0, truncated=False):
    return SampleBranch(action, r if raw is None else raw, r, OBS, v_next, terminal, truncated)


def record(branches, base=0.0):
    return MacroStepRecord(OBS, base, branches, 0)


# -- transforms --------------------------------------------------------------


def test_tanh_of_zero():
    assert transform_reward("tanh", 0.0) == 0.0


def test_identity():
    assert transform_reward("identity", 3.7) == 3.7


def test_rolling_norm_window_example():
    norm = RewardNormalizer(256, 1e-8)
    for r in (1.0, 2.0, 3.0):
        norm.push(r)
    assert norm.std == pytest.approx(math.sqrt(2.0 / 3.0), abs=1e-15)
    assert abs(transform_reward("rolling_norm", 2.0, norm)) < 1e-15
    assert len(norm) == 4  # the reward is recorded after it is normalized


def test_rolling_norm_empty_window():
    with pytest.raises(ValueError):
        transform_reward("rolling_norm", 1.0, RewardNormalizer())
    with pytest.raises(ValueError):
        transform_reward("rolling_norm", 1.0, None)


def test_unknown_transform():
    with pytest.raises(ValueError):
        transform_reward("sigmoid", 1.0)


def test_normalizer_ring_buffer_keeps_latest():
    norm = RewardNormalizer(3)
    for r in range(6):
        norm.push(float(r))
    assert list(norm.window()) == [3.0, 4.0, 5.0]
    assert norm.mean == 4.0


@settings(max_examples=50, deadline=None)
@given(
    seed=st.integers(0, 2**31 - 1),
    capacity=st.integers(2, 300),
    scale=st.floats(0.01, 100.0),
    loc=st.floats(-100.0, 100.0),
)
def test_full_window_normalizes_to_zero_mean_unit_std(seed, capacity, scale, loc):
    rng = np.random.default_rng(seed)
    norm = RewardNormalizer(capacity, 1e-8)
    for r in rng.normal(loc, scale, size=capacity + int(rng.integers(0, 50))):
        norm.push(float(r))
    assume(norm.std >= 1e7 * norm.eps)  # the identity holds up to eps / std
    z = np.array([norm.normalize(r) for r in norm.window()])
    assert abs(z.mean()) <= 1e-9
    assert abs(z.std() - 1.0) <= 1e-6


@given(st.floats(-1e6, 1e6, allow_nan=False))
def test_tanh_range(r):
    # strictly inside (-1, 1) wherever the float result can represent it
    out = transform_reward("tanh", r)
    assert -1.0 <= out <= 1.0
    if abs(r) < 18.0:
        assert -1.0 < out < 1.0


# -- PPO ---------------------------------------------------------------------


def test_ppo_nonterminal():
    e = ppo_advantage(record([branch(1.0, v_next=0.5)], base=0.4), 0.9)
    assert e.advantage == pytest.approx(1.05, abs=1e-15)


def test_ppo_terminal_drops_bootstrap():
    e = ppo_advantage(record([branch(1.0, v_next=123.0, terminal=True)], base=0.4), 0.9)
    assert e.advantage == pytest.approx(0.6, abs=1e-15)


def test_ppo_zero():
    assert ppo_advantage(record([branch(0.0)]), 0.9).advantage == 0.0


def test_ppo_truncation_keeps_bootstrap():
    e = ppo_advantage(record([branch(0.0, v_next=1.0, truncated=True)]), 0.5)
    assert e.advantage == 0.5


def test_ppo_uses_raw_reward():
    e = ppo_advantage(record([SampleBranch(0, 2.0, math.tanh(2.0), OBS)]), 0.9)
    assert e.advantage == 2.0


def test_ppo_rejects_groups():
    with pytest.raises(ValueError):
        ppo_advantage(record([branch(0.0), branch(1.0)]), 0.9)


# -- GRPO --------------------------------------------------------------------


def test_grpo_centering():
    adv = [e.advantage for e in grpo_advantages(record([branch(1.0), branch(2.0), branch(3.0)]))]
    assert adv == [-1.0, 0.0, 1.0]


def test_grpo_equal_rewards():
    assert all(e.advantage == 0.0 for e in grpo_advantages(record([branch(0.3)] * 4)))


def test_grpo_std_division():
    adv = [e.advantage for e in grpo_advantages(record([branch(0.5), branch(-0.5)]), normalize_std=True)]
    np.testing.assert_allclose(adv, [1.0, -1.0], atol=1e-7)


def test_grpo_single_branch_rejected():
    with pytest.raises(ValueError, match="GRPO group size must exceed 1"):
        grpo_advantages(record([branch(1.0)]))


def test_grpo_has_no_value_targets():
    assert all(e.value_target is None for e in grpo_advantages(record([branch(1.0), branch(0.0)])))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=8))
def test_grpo_zero_sum_property(rewards):
    adv = grpo_advantages(record([branch(r) for r in rewards]))
    assert abs(sum(e.advantage for e in adv)) <= 1e-9 * max(1.0, max(abs(r) for r in rewards))


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8))
def test_literal_group_formula_is_identically_zero(rewards):
    assert literal_group_advantage(rewards) == 0.0


# -- Hybrid ------------------------------------------------------------------


def test_hybrid_reduces_to_ppo_with_one_branch():
    rec = record([SampleBranch(1, 0.7, 0.7, OBS, 0.3, False)], base=0.2)
    (e,), mean = hybrid_advantages(rec, 0.95)
    assert e.advantage == ppo_advantage(rec, 0.95).advantage
    assert mean == e.advantage


def test_hybrid_two_branch_example():
    rec = record([branch(0.5, v_next=0.2), branch(-0.5, v_next=0.2)], base=0.1)
    entries, mean = hybrid_advantages(rec, 0.9)
    np.testing.assert_allclose([e.advantage for e in entries], [0.58, -0.42], atol=1e-15)
    assert mean == pytest.approx(0.08, abs=1e-15)


def test_hybrid_all_terminal_zero():
    entries, mean = hybrid_advantages(record([branch(0.0, v_next=5.0, terminal=True)] * 3), 0.9)
    assert all(e.advantage == 0.0 for e in entries) and mean == 0.0


def test_hybrid_mean_consistency_on_random_records():
    rng = np.random.default_rng(0)
    for _ in range(500):
        rec = random_record(rng, int(rng.integers(1, 9)))
        entries, mean = hybrid_advantages(rec, 0.9)
        assert abs(mean - np.mean([e.advantage for e in entries])) <= 1e-12


def test_reduction_bit_identical_on_random_records():
    rng = np.random.default_rng(1)
    for _ in range(500):
        rec = random_record(rng, 1, transform="identity")
        assert hybrid_advantages(rec, 0.97)[0][0].advantage == ppo_advantage(rec, 0.97).advantage


# -- n-step ------------------------------------------------------------------


def _trajectory(rng, length, n_branches):
    return [random_record(rng, n_branches, terminal_prob=0.0) for _ in range(length)]


def test_nstep_one_equals_hybrid():
    rng = np.random.default_rng(2)
    recs = _trajectory(rng, 10, 3)
    recs[4].branches[0].terminal = True
    flat = [e for r in recs for e in hybrid_advantages(r, 0.9)[0]]
    for exhaustive in (False, True):
        got = hybrid_nstep_advantages(recs, 0.9, 1, exhaustive)
        assert [e.advantage for e in got] == [e.advantage for e in flat]


def test_nstep_two_step_path():
    recs = [record([branch(0.0, v_next=0.0)]), record([branch(1.0, v_next=0.0)])]
    assert hybrid_nstep_advantages(recs, 0.9, 2)[0].advantage == pytest.approx(0.9, abs=1e-15)


def test_nstep_exhaustive_two_step_tail():
    b = branch(0.0, v_next=7.0)
    b.tail_rewards = (1.0,)
    b.tail_value = 0.0
    assert hybrid_nstep_advantages([record([b])], 0.9, 2, exhaustive=True)[0].advantage == pytest.approx(0.9)


def test_nstep_terminal_first_step():
    recs = [record([branch(0.4, v_next=9.0, terminal=True)], base=0.25), record([branch(1.0, v_next=3.0)])]
    assert hybrid_nstep_advantages(recs, 0.9, 3)[0].advantage == pytest.approx(0.4 - 0.25, abs=1e-15)


def test_nstep_bootstraps_from_last_reached_state():
    recs = [record([branch(1.0, v_next=0.0)]), record([branch(2.0, v_next=0.0)]),
            record([branch(3.0, v_next=10.0)])]
    g = 0.5
    expect = 1.0 + g * 2.0 + g * g * 3.0 + g ** 3 * 10.0
    assert hybrid_nstep_advantages(recs, g, 3)[0].advantage == pytest.approx(expect, abs=1e-12)


def test_nstep_cheap_mode_uses_own_first_reward_then_continuation():
    first = record([branch(0.0, v_next=0.0), branch(5.0, v_next=0.0)])
    second = record([branch(1.0, v_next=0.0), branch(-7.0, v_next=0.0)])
    adv = [e.advantage for e in hybrid_nstep_advantages([first, second], 0.5, 2)]
    assert adv[:2] == [0.5, 5.5]


def test_nstep_rejects_bad_n():
    with pytest.raises(ValueError):
        hybrid_nstep_advantages([record([branch(0.0)])], 0.9, 0)


# -- records and the scalar oracle ---------------------------------------------


def test_record_validates_continuation_index():
    with pytest.raises(ValueError):
        MacroStepRecord(OBS, 0.0, [branch(0.0)], 1)
    with pytest.raises(ValueError):
        MacroStepRecord(OBS, 0.0, [], 0)


@pytest.mark.parametrize("n", [1, 2, 5, 8])
def test_exhaustive_group_check_agrees(n):
    rng = np.random.default_rng(n)
    for _ in range(200):
        rec = random_record(rng, n, transform="identity" if n == 1 else "tanh")
        checks = exhaustive_group_check(rec, 0.9)
        assert all(checks.values()), checks
        if n == 1:
            assert checks["ppo_equals_hybrid"]
