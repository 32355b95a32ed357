import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from symran.env import (
    EnvConfig,
    HANDOVER_INTERRUPTION_MS,
    RewardConfig,
    handover_reward,
    make_env,
    qos_penalties,
    slicing_reward,
    violation_rates,
)
from symran.errors import ConfigError
from symran.kpm import KpmState, flatten_state, flat_dim


def slicing_env(seed=0, **kw):
    return make_env(EnvConfig(seed=seed, task="slicing",
                              expose_true_concepts=True, **kw))


def handover_env(seed=0, **kw):
    return make_env(EnvConfig(seed=seed, task="handover",
                              expose_true_concepts=True, **kw))


def test_reset_deterministic():
    a = slicing_env(seed=9).reset()
    b = slicing_env(seed=9).reset()
    assert np.array_equal(a.values, b.values)
    assert a.entity_tags == b.entity_tags


def test_slicing_roster_within_range():
    for seed in range(8):
        state = slicing_env(seed=seed).reset()
        assert 9 <= state.n_entities <= 14


def test_handover_has_two_tagged_cells():
    state = handover_env().reset()
    assert state.entity_tags == ("serv", "tgt")
    state.validate()


def test_states_pass_schema_validation():
    env = slicing_env(seed=4)
    env.reset()
    for _ in range(30):
        out = env.step(np.array([0.4, 0.4, 0.2]))
        out.state.validate()


def test_same_seed_same_action_sequence_identical():
    actions = [np.array([0.5, 0.3, 0.2]), np.array([0.2, 0.6, 0.2]),
               np.array([1 / 3, 1 / 3, 1 / 3])]
    env1, env2 = slicing_env(seed=5), slicing_env(seed=5)
    env1.reset()
    env2.reset()
    for a in actions * 10:
        o1, o2 = env1.step(a), env2.step(a)
        assert np.array_equal(o1.state.values, o2.state.values)
        assert o1.reward == o2.reward


def test_step_rejects_bad_slicing_actions():
    env = slicing_env()
    env.reset()
    with pytest.raises(ValueError):
        env.step(np.array([0.5, 0.6, 0.2]))  # sums above 1
    with pytest.raises(ValueError):
        env.step(np.array([-0.1, 0.6, 0.2]))
    with pytest.raises(ValueError):
        env.step(np.array([0.5, 0.5]))


def test_step_rejects_unknown_handover_action():
    env = handover_env()
    env.reset()
    with pytest.raises(ValueError):
        env.step(2)


def test_zero_allocation_starves_other_slices():
    env = slicing_env(seed=1)
    env.reset()
    out = env.step(np.array([1.0, 0.0, 0.0]))
    tags = np.array(out.state.entity_tags)
    # entities are emitted in slice-block order matching the outcome arrays
    urllc_or_mmtc = np.array([t in ("URLLC", "mMTC") for t in tags])
    assert np.all(out.throughput[urllc_or_mmtc] == 0.0)
    assert np.all(out.thp_violation[urllc_or_mmtc] == 1.0)


def test_switch_incurs_interruption_spike():
    env = handover_env(seed=3)
    env.reset()
    out = env.step(1)
    c8 = out.true_concepts[4]
    expected = min(6.0 + 160.0 * c8**1.3 + HANDOVER_INTERRUPTION_MS, 250.0)
    assert out.delay[0] == pytest.approx(expected, abs=1e-9)
    # the spike lasts exactly one step
    out2 = env.step(0)
    c8b = out2.true_concepts[4]
    expected2 = min(6.0 + 160.0 * c8b**1.3, 250.0)
    assert out2.delay[0] == pytest.approx(expected2, abs=1e-9)


def test_violations_recomputable_from_emitted_fields():
    env = slicing_env(seed=2)
    env.reset()
    for _ in range(20):
        out = env.step(np.array([0.3, 0.5, 0.2]))
        assert np.array_equal(out.thp_violation,
                              (out.throughput < out.thp_target).astype(float))
        assert np.array_equal(out.dly_violation,
                              (out.delay > out.dly_target).astype(float))


def test_true_concepts_slice_permutation_invariant():
    env = slicing_env(seed=6)
    env.reset()
    base = env._compute_true_concepts()
    for s in ("eMBB", "URLLC", "mMTC"):
        env._ues[s] = list(reversed(env._ues[s]))
    assert np.array_equal(env._compute_true_concepts(), base)


# -- reward arithmetic --------------------------------------------------------


def test_slicing_reward_single_ue_at_target():
    cfg = RewardConfig()
    r = slicing_reward(np.array([0.0]), np.array([6.0]), np.array([100.0]),
                       np.array([6.0]), np.array([100.0]), cfg)
    assert r == pytest.approx(1.0)


def test_slicing_reward_two_ues_three_prbs():
    cfg = RewardConfig()
    r = slicing_reward(np.array([1.5, 1.5]), np.array([6.0, 6.0]),
                       np.array([10.0, 10.0]), np.array([6.0, 6.0]),
                       np.array([100.0, 100.0]), cfg)
    assert r == pytest.approx(0.5)


def test_throughput_penalty_is_relative_shortfall():
    r_p, r_d = qos_penalties(5.0, 10.0, 10.0, 100.0)
    assert r_p == pytest.approx(0.5)
    assert r_d == 0.0


def test_handover_reward_zero_when_targets_met():
    cfg = RewardConfig()
    assert handover_reward(8.0, 30.0, 6.0, 60.0, cfg) == 0.0


def test_handover_reward_weighted_shortfall():
    cfg = RewardConfig(beta3=1.0, beta4=0.0)
    assert handover_reward(3.0, 500.0, 6.0, 60.0, cfg) == pytest.approx(-0.5)


def test_handover_reward_degenerate_weights():
    cfg = RewardConfig(beta3=0.0, beta4=0.0)
    assert handover_reward(0.001, 5000.0, 6.0, 60.0, cfg) == 0.0


def test_handover_reward_never_positive():
    env = handover_env(seed=8)
    env.reset()
    rng = np.random.default_rng(0)
    for _ in range(50):
        out = env.step(int(rng.integers(0, 2)))
        assert out.reward <= 0.0


def test_reward_requires_positive_targets():
    with pytest.raises(ConfigError):
        qos_penalties(1.0, 1.0, 0.0, 10.0)


def test_violation_rates_examples():
    assert violation_rates(np.zeros(4), np.zeros(4)) == (0.0, 0.0)
    assert violation_rates(np.array([1.0, 1.0, 0.0, 0.0]), np.zeros(4)) == (0.5, 0.0)
    assert violation_rates(np.ones(3), np.ones(3)) == (1.0, 1.0)
    with pytest.raises(ValueError):
        violation_rates(np.array([]), np.array([]))


@given(seed=st.integers(0, 50))
@settings(max_examples=12, deadline=None)
def test_slicing_reward_bounded_by_roster(seed):
    env = slicing_env(seed=seed)
    env.reset()
    out = env.step(np.array([0.2, 0.2, 0.2]))
    assert out.reward <= len(out.throughput)


def test_config_validation():
    with pytest.raises(ConfigError):
        EnvConfig(task="other")
    with pytest.raises(ConfigError):
        EnvConfig(ue_count_range=(0, 10))
    with pytest.raises(ConfigError):
        EnvConfig(n_prb=0)
    with pytest.raises(ConfigError):
        RewardConfig(gamma=1.0)
    with pytest.raises(ConfigError):
        RewardConfig(targets={"eMBB": (0.0, 10.0)})


def test_flatten_state_layout():
    env = slicing_env(seed=0)
    state = env.reset()
    flat = flatten_state(state)
    assert flat.shape == (flat_dim("slicing"),)
    mask = flat[-14:]
    assert mask.sum() == state.n_entities
    # eMBB block occupies the first five slots
    n_embb = sum(1 for t in state.entity_tags if t == "eMBB")
    assert mask[:5].sum() == n_embb


def test_entity_selector_resolution():
    state = handover_env().reset()
    assert state.rows_for("cell:serv").tolist() == [0]
    assert state.rows_for("cell:tgt").tolist() == [1]
    assert state.rows_for("all").tolist() == [0, 1]
    with pytest.raises(ValueError):
        state.rows_for("slice:bogus")
