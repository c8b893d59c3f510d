"""Rollout loop and trajectory layout tests."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from intersad import mdp
from intersad.errors import ContractViolation, NumericError
from intersad.fleet import LinearGaussianSystem

from conftest import ConstantPolicy, CountingSystem, ExplodingSystem, RecordingPolicy, ZeroPolicy


def make_linear_system(rng, d_s, d_a, noise=0.05):
    a = rng.normal(size=(d_s, d_s)) * 0.2
    b = rng.normal(size=(d_s, d_a)) * 0.5
    w = rng.normal(size=(d_s + d_a,))
    return LinearGaussianSystem(a, b, w, process_noise=noise)


def test_trajectory_layout_interleaves_states_and_actions():
    system = CountingSystem(d_s=2)
    policy = ConstantPolicy(d_s=2, action=[0.5])
    cfg = mdp.RolloutConfig(horizon=3, base_seed=7)
    rec = mdp.interact(system, policy, cfg, system_id=0)
    # [s_0, a_0, s_1, a_1, s_2, a_2]; the post-horizon state never appears
    expected = [0.0, 0.0, 0.5, 1.0, 1.0, 0.5, 2.0, 2.0, 0.5]
    np.testing.assert_array_equal(rec.trajectory, expected)
    np.testing.assert_array_equal(rec.rewards, [0.0, 1.0, 2.0])
    assert rec.trajectory.shape == (3 * (2 + 1),)


def test_zero_everything_yields_zero_trajectory():
    system = LinearGaussianSystem(
        np.zeros((2, 2)), np.zeros((2, 1)), np.zeros(3), process_noise=0.0, init_scale=0.0
    )
    rec = mdp.interact(system, ZeroPolicy(2, 1), mdp.RolloutConfig(horizon=4), system_id=0)
    np.testing.assert_array_equal(rec.trajectory, np.zeros(12))
    np.testing.assert_array_equal(rec.rewards, np.full(4, 0.5))


def test_noiseless_recording_matches_true_states():
    system = CountingSystem(d_s=2)
    policy = RecordingPolicy(2, 1)
    rec = mdp.interact(system, policy, mdp.RolloutConfig(horizon=3), system_id=0)
    states = rec.trajectory.reshape(3, 3)[:, :2]
    np.testing.assert_array_equal(states, [[0, 0], [1, 1], [2, 2]])
    for seen, stored in zip(policy.seen, states):
        np.testing.assert_array_equal(seen, stored)


def test_observation_noise_lands_in_record_and_policy_input():
    rng = np.random.default_rng(0)
    system = make_linear_system(rng, d_s=3, d_a=2, noise=0.0)
    policy = RecordingPolicy(3, 2)
    cfg = mdp.RolloutConfig(horizon=5, observation_noise=0.5, base_seed=3)
    rec = mdp.interact(system, policy, cfg, system_id=1)
    recorded_states = rec.trajectory.reshape(5, 5)[:, :3]
    for seen, stored in zip(policy.seen, recorded_states):
        np.testing.assert_array_equal(seen, stored)
    # true state starts at the system reset value, record differs by noise
    clean = mdp.interact(
        system, RecordingPolicy(3, 2), mdp.RolloutConfig(horizon=5, base_seed=3), system_id=1
    )
    assert not np.allclose(rec.trajectory, clean.trajectory)


def test_rollouts_are_deterministic_per_seed_and_diverge_across_ids():
    rng = np.random.default_rng(1)
    system = make_linear_system(rng, d_s=3, d_a=1)
    cfg = mdp.RolloutConfig(horizon=6, base_seed=11)
    a = mdp.interact(system, ZeroPolicy(3, 1), cfg, system_id=4)
    b = mdp.interact(system, ZeroPolicy(3, 1), cfg, system_id=4)
    np.testing.assert_array_equal(a.trajectory, b.trajectory)
    np.testing.assert_array_equal(a.rewards, b.rewards)
    c = mdp.interact(system, ZeroPolicy(3, 1), cfg, system_id=5)
    assert not np.array_equal(a.trajectory, c.trajectory)
    d = mdp.interact(
        system, ZeroPolicy(3, 1), mdp.RolloutConfig(horizon=6, base_seed=11, rollout_index=1),
        system_id=4,
    )
    assert not np.array_equal(a.trajectory, d.trajectory)


def test_flatten_steps_empty_and_ragged():
    assert mdp.flatten_steps([]).shape == (0,)
    good = [(np.zeros(2), np.zeros(1))]
    bad = good + [(np.zeros(3), np.zeros(1))]
    with pytest.raises(ContractViolation, match="step 1"):
        mdp.flatten_steps(bad)


def test_dimension_mismatch_is_a_contract_violation():
    system = CountingSystem(d_s=2)
    with pytest.raises(ContractViolation):
        mdp.interact(system, ZeroPolicy(5, 1), mdp.RolloutConfig(horizon=2), system_id=0)


def test_non_finite_state_names_the_step():
    system = ExplodingSystem(d_s=2, explode_at=2)
    with pytest.raises(NumericError, match="step 2"):
        mdp.interact(system, ZeroPolicy(2, 1), mdp.RolloutConfig(horizon=5), system_id=0)


def test_bad_rollout_config_rejected():
    with pytest.raises(ContractViolation):
        mdp.RolloutConfig(horizon=0)
    with pytest.raises(ContractViolation):
        mdp.RolloutConfig(horizon=5, observation_noise=-0.1)
    with pytest.raises(ContractViolation):
        mdp.rollout_rng(0, system_id=-1, rollout_index=0)


def test_record_arrays_are_read_only():
    rec = mdp.interact(
        CountingSystem(2), ZeroPolicy(2, 1), mdp.RolloutConfig(horizon=2), system_id=0
    )
    with pytest.raises(ValueError):
        rec.trajectory[0] = 99.0
    with pytest.raises(ValueError):
        rec.rewards[0] = 99.0


def test_record_json_roundtrip():
    rec = mdp.interact(
        CountingSystem(2), ConstantPolicy(2, [0.25]), mdp.RolloutConfig(horizon=3), system_id=9
    )
    clone = mdp.InteractionRecord.from_json_dict(rec.to_json_dict())
    assert clone.system_id == 9
    np.testing.assert_array_equal(clone.trajectory, rec.trajectory)
    np.testing.assert_array_equal(clone.rewards, rec.rewards)


@settings(max_examples=25, deadline=None)
@given(
    d_s=st.integers(min_value=1, max_value=8),
    d_a=st.integers(min_value=1, max_value=8),
    horizon=st.integers(min_value=1, max_value=16),
    seed=st.integers(min_value=0, max_value=2**31),
)
def test_record_shapes_and_finiteness_fuzz(d_s, d_a, horizon, seed):
    rng = np.random.default_rng(seed)
    system = make_linear_system(rng, d_s, d_a)
    cfg = mdp.RolloutConfig(horizon=horizon, observation_noise=0.1, base_seed=seed)
    rec = mdp.interact(system, ZeroPolicy(d_s, d_a), cfg, system_id=0)
    assert rec.trajectory.shape == (horizon * (d_s + d_a),)
    assert rec.rewards.shape == (horizon,)
    assert np.all(np.isfinite(rec.trajectory))
    assert np.all(np.isfinite(rec.rewards))
    assert np.all(rec.rewards >= 0.0) and np.all(rec.rewards <= 1.0)
