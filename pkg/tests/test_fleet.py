"""Fleet generation, spectral control, and planted-anomaly semantics."""

import numpy as np
import pytest

from intersad import mdp
from intersad.errors import ContractViolation
from intersad.fleet import (
    SPECTRAL_BOUND,
    Contamination,
    LinearGaussianSystem,
    RewardFleetConfig,
    TransitionFleetConfig,
    make_reward_fleet,
    make_transition_fleet,
    spectral_norm_estimate,
    spectral_rescale,
)

from conftest import ZeroPolicy
from oracles import spectral_norm_oracle


def test_spectral_estimate_matches_svd_oracle():
    rng = np.random.default_rng(123)
    for _ in range(20):
        m = rng.normal(size=(5, 5))
        assert spectral_norm_estimate(m) == pytest.approx(spectral_norm_oracle(m), rel=1e-8)


def test_spectral_rescale_caps_norm():
    rng = np.random.default_rng(5)
    m = rng.normal(size=(5, 5)) * 3.0
    scaled = spectral_rescale(m, 0.9)
    assert spectral_norm_oracle(scaled) <= 0.9 + 1e-8
    small = rng.normal(size=(4, 4)) * 0.01
    np.testing.assert_array_equal(spectral_rescale(small, 0.9), small)
    zero = np.zeros((3, 3))
    np.testing.assert_array_equal(spectral_rescale(zero, 0.9), zero)


def test_fleet_generation_is_deterministic():
    cfg = TransitionFleetConfig(n_systems=12, shared_seed=77)
    f1, f2 = make_transition_fleet(cfg), make_transition_fleet(cfg)
    np.testing.assert_array_equal(f1.labels(), f2.labels())
    for p1, p2 in zip(f1.params, f2.params):
        np.testing.assert_array_equal(p1.a, p2.a)
        np.testing.assert_array_equal(p1.b, p2.b)
        np.testing.assert_array_equal(p1.w, p2.w)


def test_anomaly_count_is_floor_of_fraction():
    fleet = make_transition_fleet(TransitionFleetConfig(n_systems=10, anomaly_fraction=0.25))
    assert fleet.n_anomalous() == 2
    fleet = make_reward_fleet(RewardFleetConfig(n_systems=10, anomaly_fraction=0.25))
    assert fleet.n_anomalous() == 2


def test_tiny_fraction_warns_and_yields_zero_anomalies():
    with pytest.warns(UserWarning, match="zero anomalies"):
        fleet = make_transition_fleet(
            TransitionFleetConfig(n_systems=5, anomaly_fraction=0.1)
        )
    assert fleet.n_anomalous() == 0


def test_invalid_configs_rejected():
    with pytest.raises(ContractViolation):
        TransitionFleetConfig(d_s=0)
    with pytest.raises(ContractViolation):
        TransitionFleetConfig(normal_jitter=0.3, anomaly_shift=0.1)
    with pytest.raises(ContractViolation):
        TransitionFleetConfig(anomaly_fraction=1.0)
    with pytest.raises(ContractViolation):
        RewardFleetConfig(contamination_rate=1.5)
    # equal jitter and shift is the legal degenerate fleet
    TransitionFleetConfig(normal_jitter=0.1, anomaly_shift=0.1)


def test_all_dynamics_within_spectral_bound():
    fleet = make_transition_fleet(
        TransitionFleetConfig(n_systems=30, anomaly_shift=0.6, shared_seed=3)
    )
    for p in fleet.params:
        assert spectral_norm_oracle(p.a) <= SPECTRAL_BOUND + 1e-6


def test_anomalous_dynamics_sit_farther_from_the_pack():
    cfg = TransitionFleetConfig(n_systems=40, anomaly_fraction=0.25, shared_seed=9)
    fleet = make_transition_fleet(cfg)
    labels = fleet.labels()
    mean_a = np.mean([p.a for p in fleet.params], axis=0)
    dists = np.array([np.linalg.norm(p.a - mean_a) for p in fleet.params])
    assert dists[labels == 1].min() > dists[labels == 0].max()


def test_systems_expose_no_labels():
    fleet = make_reward_fleet(RewardFleetConfig(n_systems=6, anomaly_fraction=0.4))
    for system in fleet.systems:
        assert not hasattr(system, "is_anomalous")
        assert isinstance(system, mdp.SystemInterface)


def test_long_free_rollout_stays_bounded():
    fleet = make_transition_fleet(
        TransitionFleetConfig(n_systems=3, anomaly_fraction=0.0, shared_seed=21)
    )
    rec = mdp.interact(
        fleet.systems[0],
        ZeroPolicy(6, 2),
        mdp.RolloutConfig(horizon=1000, base_seed=2),
        system_id=0,
    )
    assert np.abs(rec.trajectory).max() < 50.0


def _twin_without_contamination(fleet, idx, cfg):
    p = fleet.params[idx]
    return LinearGaussianSystem(
        p.a, p.b, p.w, cfg.process_noise, init_scale=cfg.init_scale,
        init_offset=p.init_offset, contamination=None,
    )


def test_reward_flips_complement_the_twin_at_full_rate():
    cfg = RewardFleetConfig(
        n_systems=4, anomaly_fraction=0.5, contamination_rate=1.0, shared_seed=13, horizon=8
    )
    fleet = make_reward_fleet(cfg)
    idx = int(np.argmax(fleet.labels()))
    twin = _twin_without_contamination(fleet, idx, cfg)
    roll = mdp.RolloutConfig(horizon=8, base_seed=5)
    corrupted = mdp.interact(fleet.systems[idx], ZeroPolicy(6, 2), roll, system_id=idx)
    clean = mdp.interact(twin, ZeroPolicy(6, 2), roll, system_id=idx)
    np.testing.assert_array_equal(corrupted.trajectory, clean.trajectory)
    np.testing.assert_allclose(corrupted.rewards, 1.0 - clean.rewards, rtol=0, atol=1e-15)


def test_reward_zero_rate_means_no_flips():
    cfg = RewardFleetConfig(
        n_systems=4, anomaly_fraction=0.5, contamination_rate=0.0, shared_seed=13
    )
    fleet = make_reward_fleet(cfg)
    idx = int(np.argmax(fleet.labels()))
    twin = _twin_without_contamination(fleet, idx, cfg)
    roll = mdp.RolloutConfig(horizon=10, base_seed=5)
    corrupted = mdp.interact(fleet.systems[idx], ZeroPolicy(6, 2), roll, system_id=idx)
    clean = mdp.interact(twin, ZeroPolicy(6, 2), roll, system_id=idx)
    np.testing.assert_array_equal(corrupted.rewards, clean.rewards)


def test_flip_count_is_ceiling_of_rate_times_horizon():
    for rate, expected in [(0.2, 2), (0.1, 1), (0.05, 1), (0.25, 3)]:
        cfg = RewardFleetConfig(
            n_systems=4, anomaly_fraction=0.5, contamination_rate=rate,
            shared_seed=31, horizon=10,
        )
        fleet = make_reward_fleet(cfg)
        idx = int(np.argmax(fleet.labels()))
        twin = _twin_without_contamination(fleet, idx, cfg)
        roll = mdp.RolloutConfig(horizon=10, base_seed=17)
        corrupted = mdp.interact(fleet.systems[idx], ZeroPolicy(6, 2), roll, system_id=idx)
        clean = mdp.interact(twin, ZeroPolicy(6, 2), roll, system_id=idx)
        assert int(np.sum(~np.isclose(corrupted.rewards, clean.rewards))) == expected
        assert Contamination(rate, 0, 10).flips_per_rollout() == expected


def test_flip_positions_move_between_rollouts():
    cfg = RewardFleetConfig(
        n_systems=4, anomaly_fraction=0.5, contamination_rate=0.2, shared_seed=41, horizon=10
    )
    fleet = make_reward_fleet(cfg)
    idx = int(np.argmax(fleet.labels()))
    twin = _twin_without_contamination(fleet, idx, cfg)
    masks = []
    for rollout_index in range(6):
        roll = mdp.RolloutConfig(horizon=10, base_seed=3, rollout_index=rollout_index)
        corrupted = mdp.interact(fleet.systems[idx], ZeroPolicy(6, 2), roll, system_id=idx)
        clean = mdp.interact(twin, ZeroPolicy(6, 2), roll, system_id=idx)
        masks.append(tuple(np.flatnonzero(~np.isclose(corrupted.rewards, clean.rewards))))
    assert len(set(masks)) > 1


def test_transition_fleet_reward_channel_is_uninformative():
    cfg = TransitionFleetConfig(
        n_systems=60, anomaly_fraction=0.5, shared_seed=8, anomaly_shift=0.3
    )
    fleet = make_transition_fleet(cfg)
    labels = fleet.labels()
    means = []
    for i, system in enumerate(fleet.systems):
        rec = mdp.interact(
            system, ZeroPolicy(6, 2), mdp.RolloutConfig(horizon=10, base_seed=4), system_id=i
        )
        means.append(rec.rewards.mean())
    means = np.asarray(means)
    g_a, g_n = means[labels == 1], means[labels == 0]
    pooled = np.sqrt(g_a.var(ddof=1) / len(g_a) + g_n.var(ddof=1) / len(g_n))
    assert abs(g_a.mean() - g_n.mean()) < 4.0 * pooled


def test_reward_fleet_trajectories_are_uninformative():
    cfg = RewardFleetConfig(
        n_systems=60, anomaly_fraction=0.5, contamination_rate=1.0, shared_seed=8
    )
    fleet = make_reward_fleet(cfg)
    labels = fleet.labels()
    norms = []
    for i, system in enumerate(fleet.systems):
        rec = mdp.interact(
            system, ZeroPolicy(6, 2), mdp.RolloutConfig(horizon=10, base_seed=4), system_id=i
        )
        norms.append(np.linalg.norm(rec.trajectory))
    norms = np.asarray(norms)
    g_a, g_n = norms[labels == 1], norms[labels == 0]
    pooled = np.sqrt(g_a.var(ddof=1) / len(g_a) + g_n.var(ddof=1) / len(g_n))
    assert abs(g_a.mean() - g_n.mean()) < 4.0 * pooled


def test_audit_summary_is_json_shaped():
    import json

    fleet = make_reward_fleet(RewardFleetConfig(n_systems=5, anomaly_fraction=0.4))
    summary = fleet.audit_summary()
    parsed = json.loads(json.dumps(summary))
    assert parsed["kind"] == "reward"
    assert parsed["n_systems"] == 5
    assert parsed["n_anomalous"] == 2
    assert len(parsed["systems"]) == 5
    assert all(s["dynamics_spectral_norm"] <= SPECTRAL_BOUND + 1e-6 for s in parsed["systems"])


def test_mask_seed_recorded_only_for_anomalous():
    fleet = make_reward_fleet(RewardFleetConfig(n_systems=6, anomaly_fraction=0.34))
    for p in fleet.params:
        if p.is_anomalous:
            assert p.contamination_mask_seed is not None
        else:
            assert p.contamination_mask_seed is None
