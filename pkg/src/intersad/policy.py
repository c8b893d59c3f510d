"""Deterministic activation policy and the embedding-neutralization update.

The policy is one shared network driving every system in a fleet: a dense
d_s -> 64 -> 64 -> d_a stack, tanh throughout, so actions always land in
[-1, 1]^d_a and identical observations produce identical actions.

Training pulls the per-system trajectory embeddings of a mini-batch toward
their centroid: the loss is the plain (unsquared) sum of Euclidean
distances to the batch mean. The O(N^2) all-pairs spread is bounded by
2(N-1) times this centroid form, which is why the cheap form is the one
optimized; the pairwise version is kept for tests and audits.

Gradient convention: a batch of recorded rollouts is replayed through the
frozen encoder with the recorded observations held constant and only the
actions recomputed from the current policy parameters. Gradients therefore
flow from the loss through the encoder into the action entries and on into
the policy; the centroid is a constant of the batch. The finite-difference
oracle for this objective perturbs policy parameters and re-evaluates with
the same fixed centroid and fixed observations (no re-rollout).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import nn
from .errors import ContractViolation
from .mdp import InteractionRecord

POLICY_HIDDEN = 64


@dataclass
class PolicyModel:
    """Shared deterministic activation network."""

    d_s: int
    d_a: int
    store: nn.ParamStore
    hidden: int = POLICY_HIDDEN

    @classmethod
    def init(
        cls,
        d_s: int,
        d_a: int,
        rng: np.random.Generator,
        hidden: int = POLICY_HIDDEN,
        init_gain: float = 1.0,
    ) -> "PolicyModel":
        """Fresh network. ``init_gain`` scales the weight draws; gains above
        one start the tanh stack in a responsive regime where actions vary
        visibly with the observation instead of hugging zero."""
        if d_s < 1 or d_a < 1:
            raise ContractViolation("policy dimensions must be positive")
        w1, b1 = nn.init_dense(rng, d_s, hidden, gain=init_gain)
        w2, b2 = nn.init_dense(rng, hidden, hidden, gain=init_gain)
        w3, b3 = nn.init_dense(rng, hidden, d_a, gain=init_gain)
        store = nn.ParamStore(
            {"pol_W1": w1, "pol_b1": b1, "pol_W2": w2, "pol_b2": b2, "pol_W3": w3, "pol_b3": b3}
        )
        return cls(d_s=d_s, d_a=d_a, store=store, hidden=hidden)

    def act(self, observation, rng=None) -> np.ndarray:
        """Deterministic action for one observation; the rng is ignored."""
        obs = np.asarray(observation, dtype=np.float64)
        if obs.shape != (self.d_s,):
            raise ContractViolation(
                f"observation has shape {obs.shape}, policy expects ({self.d_s},)"
            )
        return policy_forward(self.store.params, obs)


def policy_forward(params, x):
    """Network forward pass; accepts ndarrays or tape Vars, batched or not."""
    h1 = nn.dense_forward(x, params["pol_W1"], params["pol_b1"], "tanh")
    h2 = nn.dense_forward(h1, params["pol_W2"], params["pol_b2"], "tanh")
    return nn.dense_forward(h2, params["pol_W3"], params["pol_b3"], "tanh")


def sen_loss(u, center=None):
    """Sum over the batch of ||u_i - c||_2 with c the batch centroid.

    The centroid is detached: when ``u`` is a tape Var the mean is taken
    over its values, so gradients reach the loss only through the
    embeddings themselves. Pass ``center`` to pin an explicit constant.
    """
    uv = nn.value_of(u)
    if uv.ndim != 2 or uv.shape[0] < 1:
        raise ContractViolation("sen_loss expects a (batch, dim) embedding matrix")
    c = uv.mean(axis=0) if center is None else np.asarray(center, dtype=np.float64)
    if c.shape != (uv.shape[1],):
        raise ContractViolation("center dimension does not match embeddings")
    diff = nn.sub(u, c)
    sq = nn.asum(nn.mul(diff, diff), axis=1)
    return nn.asum(nn.sqrt(sq))


def pairwise_loss(u) -> float:
    """All ordered-pairs sum of embedding distances (the O(N^2) objective).

    Kept for audits and the bound check; never optimized directly.
    """
    u = np.asarray(nn.value_of(u), dtype=np.float64)
    if u.ndim != 2 or u.shape[0] < 1:
        raise ContractViolation("pairwise_loss expects a (batch, dim) embedding matrix")
    diff = u[:, None, :] - u[None, :, :]
    return float(np.sqrt((diff * diff).sum(axis=2)).sum())


def observations_by_step(
    records: Sequence[InteractionRecord], d_s: int, d_a: int
) -> list[np.ndarray]:
    """Stack the recorded observations as one (batch, d_s) block per step."""
    if not records:
        raise ContractViolation("need at least one record")
    step = d_s + d_a
    length = records[0].trajectory.shape[0]
    if length % step != 0:
        raise ContractViolation(
            f"trajectory length {length} is not a multiple of d_s+d_a={step}"
        )
    horizon = length // step
    trajs = np.stack([r.trajectory for r in records])
    if trajs.shape[1] != length:
        raise ContractViolation("records have inconsistent trajectory lengths")
    return [trajs[:, t * step : t * step + d_s] for t in range(horizon)]


def build_sen_objective(
    policy: PolicyModel,
    encoder_apply: Callable,
    records: Sequence[InteractionRecord],
    center: np.ndarray | None = None,
) -> Callable:
    """Loss closure over policy parameters for the neutralization update.

    ``encoder_apply(step_blocks) -> (batch, D)`` must capture the frozen
    encoder parameters as constants. The recorded observations are constants;
    actions are recomputed from the supplied parameter leaves. If ``center``
    is omitted it is frozen at the centroid under the current parameters, so
    the closure is a fixed-center objective suitable for both the update and
    the finite-difference oracle.
    """
    obs_steps = observations_by_step(records, policy.d_s, policy.d_a)
    if center is None:
        x_now = [
            np.concatenate([obs, policy_forward(policy.store.params, obs)], axis=1)
            for obs in obs_steps
        ]
        center = np.asarray(nn.value_of(encoder_apply(x_now))).mean(axis=0)

    def loss_fn(leaves):
        xs = []
        for obs in obs_steps:
            action = policy_forward(leaves, obs)
            xs.append(nn.concat_cols([obs, action]))
        u = encoder_apply(xs)
        return sen_loss(u, center=center)

    return loss_fn


def sen_policy_update(
    policy: PolicyModel,
    encoder_apply: Callable,
    records: Sequence[InteractionRecord],
    optimizer: nn.Adam,
) -> float:
    """One neutralization step on the policy; returns the batch loss.

    Only the policy store moves; whatever parameters ``encoder_apply``
    closes over are read, never written.
    """
    loss_fn = build_sen_objective(policy, encoder_apply, records)
    loss, grads = nn.value_and_grad(loss_fn, policy.store)
    optimizer.step(policy.store, grads)
    return loss


class RandomActivationPolicy:
    """Baseline activation source: i.i.d. uniform actions in [-1, 1]^d_a.

    Not a trained policy; it exists so detector baselines can score fleets
    driven by unstructured excitation. Draws come from the rollout rng, so
    every system receives its own action sequence, reproducibly.
    """

    def __init__(self, d_s: int, d_a: int):
        self.d_s = d_s
        self.d_a = d_a

    def act(self, observation, rng: np.random.Generator) -> np.ndarray:
        if rng is None:
            raise ContractViolation("RandomActivationPolicy requires the rollout rng")
        return rng.uniform(-1.0, 1.0, size=self.d_a)
