"""Black-box system protocol and the rollout loop.

A system exposes exactly two entry points, ``reset(rng)`` and
``step(state, action, rng)``, and hides everything else. The rollout loop
drives a policy against one system for a fixed horizon and records the
interaction as a flat trajectory vector plus a reward vector.

Trajectory layout is the single convention the whole package shares:
``[s_0, a_0, s_1, a_1, ..., s_{T-1}, a_{T-1}]`` of length T*(d_s+d_a).
The state the environment lands in after the last action is never recorded;
every downstream consumer (encoder reshape, feature builders) assumes this
exact layout.

Observation noise model: at each step the policy sees ``s_t + n_t`` with
``n_t ~ N(0, sigma^2 I)`` and that noisy observation is what lands in the
trajectory, while the system itself transitions from its true state. With
``sigma=0`` recorded states equal true states.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from .errors import ContractViolation, NumericError

_U64 = (1 << 64) - 1


@runtime_checkable
class SystemInterface(Protocol):
    """Minimal surface a fleet member must expose."""

    def reset(self, rng: np.random.Generator) -> np.ndarray: ...

    def step(
        self, state: np.ndarray, action: np.ndarray, rng: np.random.Generator
    ) -> tuple[np.ndarray, float]: ...


@dataclass(frozen=True)
class RolloutConfig:
    """Horizon, noise level and seeding for one batch of rollouts.

    The per-system generator is derived from (base_seed, system_id,
    rollout_index); changing any component yields an independent stream,
    so repeated rollouts of one system across training iterations see
    fresh noise while remaining exactly reproducible.
    """

    horizon: int
    observation_noise: float = 0.0
    base_seed: int = 0
    rollout_index: int = 0

    def __post_init__(self):
        if self.horizon < 1:
            raise ContractViolation(f"horizon must be >= 1, got {self.horizon}")
        if self.observation_noise < 0:
            raise ContractViolation(
                f"observation_noise must be >= 0, got {self.observation_noise}"
            )


@dataclass
class InteractionRecord:
    """One rollout: flat trajectory, reward sequence, and provenance.

    ``iteration`` stamps which training iteration produced the record
    (-1 when collected outside a training loop); replay diagnostics use it
    to show that resampled batches mix data from several past policies.
    """

    system_id: int
    trajectory: np.ndarray
    rewards: np.ndarray
    iteration: int = -1

    def to_json_dict(self) -> dict:
        return {
            "system_id": int(self.system_id),
            "trajectory": [float(v) for v in self.trajectory],
            "rewards": [float(v) for v in self.rewards],
            "iteration": int(self.iteration),
        }

    @staticmethod
    def from_json_dict(d: dict) -> "InteractionRecord":
        return InteractionRecord(
            system_id=int(d["system_id"]),
            trajectory=np.asarray(d["trajectory"], dtype=np.float64),
            rewards=np.asarray(d["rewards"], dtype=np.float64),
            iteration=int(d.get("iteration", -1)),
        )


def rollout_rng(base_seed: int, system_id: int, rollout_index: int) -> np.random.Generator:
    """Deterministic per-(seed, system, rollout) generator."""
    if system_id < 0 or rollout_index < 0:
        raise ContractViolation("system_id and rollout_index must be non-negative")
    return np.random.default_rng(
        np.random.SeedSequence(
            entropy=int(base_seed) & _U64, spawn_key=(int(system_id), int(rollout_index))
        )
    )


def flatten_steps(steps: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """Interleave (state, action) pairs into the flat trajectory layout."""
    if not steps:
        return np.zeros(0)
    d_s = np.asarray(steps[0][0]).shape
    d_a = np.asarray(steps[0][1]).shape
    parts: list[np.ndarray] = []
    for t, (s, a) in enumerate(steps):
        s = np.asarray(s, dtype=np.float64)
        a = np.asarray(a, dtype=np.float64)
        if s.ndim != 1 or a.ndim != 1:
            raise ContractViolation(f"step {t}: states and actions must be 1-D")
        if s.shape != d_s or a.shape != d_a:
            raise ContractViolation(
                f"step {t}: ragged dimensions {s.shape}/{a.shape}, "
                f"expected {d_s}/{d_a}"
            )
        parts.append(s)
        parts.append(a)
    return np.concatenate(parts)


def interact(
    system: SystemInterface,
    policy,
    cfg: RolloutConfig,
    system_id: int,
) -> InteractionRecord:
    """Roll one system for ``cfg.horizon`` steps under ``policy``.

    ``policy`` needs an ``act(observation, rng) -> action`` method and a
    ``d_s``/``d_a`` pair for dimension checks. Returns the interaction with
    read-only arrays so replayed records cannot be mutated downstream.
    """
    rng = rollout_rng(cfg.base_seed, system_id, cfg.rollout_index)
    state = np.asarray(system.reset(rng), dtype=np.float64)
    if state.ndim != 1:
        raise ContractViolation("reset must return a 1-D state vector")
    if not np.all(np.isfinite(state)):
        raise NumericError("system produced a non-finite initial state")
    if getattr(policy, "d_s", state.shape[0]) != state.shape[0]:
        raise ContractViolation(
            f"policy expects d_s={policy.d_s}, system returned {state.shape[0]}"
        )
    steps: list[tuple[np.ndarray, np.ndarray]] = []
    rewards: list[float] = []
    for t in range(cfg.horizon):
        if cfg.observation_noise > 0.0:
            obs = state + rng.normal(0.0, cfg.observation_noise, size=state.shape)
        else:
            obs = state
        action = np.asarray(policy.act(obs, rng), dtype=np.float64)
        if action.ndim != 1:
            raise ContractViolation("policy.act must return a 1-D action vector")
        if getattr(policy, "d_a", action.shape[0]) != action.shape[0]:
            raise ContractViolation(
                f"policy declares d_a={policy.d_a}, produced {action.shape[0]}"
            )
        next_state, reward = system.step(state, action, rng)
        next_state = np.asarray(next_state, dtype=np.float64)
        reward = float(reward)
        if next_state.shape != state.shape:
            raise ContractViolation(
                f"step {t}: state dimension changed from {state.shape} to {next_state.shape}"
            )
        if not (np.all(np.isfinite(next_state)) and np.isfinite(reward)):
            raise NumericError(f"system produced a non-finite value at step {t}")
        if not np.all(np.isfinite(obs)) or not np.all(np.isfinite(action)):
            raise NumericError(f"non-finite observation or action at step {t}")
        steps.append((np.asarray(obs, dtype=np.float64), action))
        rewards.append(reward)
        state = next_state
    trajectory = flatten_steps(steps)
    reward_vec = np.asarray(rewards, dtype=np.float64)
    trajectory.setflags(write=False)
    reward_vec.setflags(write=False)
    return InteractionRecord(
        system_id=int(system_id), trajectory=trajectory, rewards=reward_vec
    )
