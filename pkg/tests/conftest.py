"""Shared test doubles: tiny scripted policies and systems."""

import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))


class ZeroPolicy:
    """Always acts with the zero vector."""

    def __init__(self, d_s: int, d_a: int):
        self.d_s = d_s
        self.d_a = d_a

    def act(self, observation, rng):
        return np.zeros(self.d_a)


class ConstantPolicy:
    """Always returns one fixed action."""

    def __init__(self, d_s: int, action):
        self.action = np.asarray(action, dtype=np.float64)
        self.d_s = d_s
        self.d_a = self.action.shape[0]

    def act(self, observation, rng):
        return self.action


class RecordingPolicy(ZeroPolicy):
    """Zero policy that remembers every observation it was shown."""

    def __init__(self, d_s: int, d_a: int):
        super().__init__(d_s, d_a)
        self.seen = []

    def act(self, observation, rng):
        self.seen.append(np.array(observation))
        return super().act(observation, rng)


class CountingSystem:
    """Deterministic scripted system: state increments by one each step,
    reward equals the step counter. Useful for layout tests."""

    def __init__(self, d_s: int):
        self.d_s = d_s
        self._t = 0

    def reset(self, rng):
        self._t = 0
        return np.zeros(self.d_s)

    def step(self, state, action, rng):
        reward = float(self._t)
        self._t += 1
        return state + 1.0, reward


class ExplodingSystem:
    """Returns a non-finite state at a chosen step."""

    def __init__(self, d_s: int, explode_at: int):
        self.d_s = d_s
        self.explode_at = explode_at
        self._t = 0

    def reset(self, rng):
        self._t = 0
        return np.zeros(self.d_s)

    def step(self, state, action, rng):
        if self._t == self.explode_at:
            bad = np.full(self.d_s, np.inf)
            return bad, 0.0
        self._t += 1
        return state, 0.0


import pytest


@pytest.fixture(scope="session")
def transition_runs():
    """Desk-default transition runs for seeds 0-4, shared across suites."""
    from intersad.trainer import default_transition_config, train

    return {seed: train(default_transition_config(seed)) for seed in range(5)}
