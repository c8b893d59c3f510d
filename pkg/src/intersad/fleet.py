"""Synthetic fleets of linear-Gaussian systems with planted anomalies.

Two fleet flavours cover the two anomaly families this package detects:

* transition fleet: every system shares a base dynamics matrix; normal
  members sit a small jitter away from it, anomalous members a larger shift
  away, in a random per-system direction. Rewards follow one shared weight
  vector, so reward statistics carry no anomaly signal by construction.
* reward fleet: every system gets the small jitter, so trajectories carry
  no anomaly signal, but anomalous members flip a fixed fraction of their
  per-step rewards (r -> 1 - r) at pseudo-random positions redrawn each
  rollout from a per-system mask seed.

Dynamics: s' = A s + B a + w with process noise w ~ N(0, sigma_w^2 I).
Reward: logistic(w0 . [s; a]). Every A is kept at spectral norm <= 0.9 so
free rollouts stay bounded.

Anomaly labels live in the fleet's parameter table, never on the system
objects themselves; training code that only touches ``fleet.systems`` has
no way to read them.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ContractViolation

SPECTRAL_BOUND = 0.9
_BASE_SPECTRAL_NORM = 0.7
_U64 = (1 << 64) - 1


def spectral_norm_estimate(m: np.ndarray, iters: int = 50, tol: float = 1e-10) -> float:
    """Largest singular value via block power iteration on M^T M.

    A rank-2 orthogonal iteration keeps convergence fast even when the top
    two singular values nearly tie, which single-vector power iteration
    handles poorly. Runs at most ``iters`` rounds, stopping early once the
    leading Ritz value moves less than ``tol`` relatively. Deterministic:
    the start block comes from a fixed-seed generator.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ContractViolation(f"expected a matrix, got ndim={m.ndim}")
    if not np.any(m):
        return 0.0
    g = m.T @ m
    k = min(2, g.shape[0])
    v = np.random.default_rng(987654321).normal(size=(g.shape[0], k))
    v, _ = np.linalg.qr(v)
    lam_prev = 0.0
    lam = 0.0
    for _ in range(iters):
        w = g @ v
        if not np.any(w):
            return 0.0
        v, _ = np.linalg.qr(w)
        proj = v.T @ g @ v
        if k == 1:
            lam = float(proj[0, 0])
        else:
            # leading eigenvalue of the symmetric 2x2 Ritz block
            half_tr = 0.5 * (proj[0, 0] + proj[1, 1])
            disc = math.sqrt(
                (0.5 * (proj[0, 0] - proj[1, 1])) ** 2 + proj[0, 1] * proj[1, 0]
            )
            lam = float(half_tr + disc)
        if abs(lam - lam_prev) <= tol * max(abs(lam), 1.0):
            break
        lam_prev = lam
    return math.sqrt(max(lam, 0.0))


def spectral_rescale(m: np.ndarray, bound: float = SPECTRAL_BOUND) -> np.ndarray:
    """Scale ``m`` down to spectral norm ``bound`` when it exceeds it."""
    if bound <= 0:
        raise ContractViolation(f"bound must be positive, got {bound}")
    m = np.asarray(m, dtype=np.float64)
    norm = spectral_norm_estimate(m)
    if norm > bound:
        return m * (bound / norm)
    return m.copy()


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@dataclass(frozen=True)
class Contamination:
    """Reward-corruption plan for one anomalous system.

    ``ceil(rate * horizon)`` distinct timesteps are flipped per rollout;
    their positions are redrawn at every reset from ``mask_seed`` mixed
    with per-rollout entropy, so the corrupted steps move around while
    staying exactly reproducible.
    """

    rate: float
    mask_seed: int
    horizon: int

    def flips_per_rollout(self) -> int:
        # epsilon guards against 0.2 * 10 ceiling up to 3 in binary floats
        return max(0, math.ceil(self.rate * self.horizon - 1e-9))


class LinearGaussianSystem:
    """One black-box fleet member.

    Exposes only ``reset``/``step``. A reset opens a rollout session: the
    contamination mask (if any) is drawn for the coming horizon and a step
    counter starts at zero. Steps outside any session, or beyond the mask
    horizon, are never flipped. One instance serves one rollout at a time;
    distinct instances are independent.
    """

    def __init__(
        self,
        a: np.ndarray,
        b: np.ndarray,
        w: np.ndarray,
        process_noise: float,
        init_scale: float = 1.0,
        contamination: Optional[Contamination] = None,
        init_offset: Optional[np.ndarray] = None,
    ):
        self._a = np.array(a, dtype=np.float64)
        self._b = np.array(b, dtype=np.float64)
        self._w = np.array(w, dtype=np.float64)
        if self._a.ndim != 2 or self._a.shape[0] != self._a.shape[1]:
            raise ContractViolation("dynamics matrix must be square")
        if self._b.shape[0] != self._a.shape[0]:
            raise ContractViolation("input matrix rows must match state dimension")
        if self._w.shape != (self._a.shape[0] + self._b.shape[1],):
            raise ContractViolation("reward weights must have length d_s + d_a")
        self._process_noise = float(process_noise)
        self._init_scale = float(init_scale)
        if init_offset is None:
            self._init_offset = np.zeros(self._a.shape[0])
        else:
            self._init_offset = np.array(init_offset, dtype=np.float64)
            if self._init_offset.shape != (self._a.shape[0],):
                raise ContractViolation("init_offset must have length d_s")
        self._contamination = contamination
        self._flip_positions: frozenset[int] = frozenset()
        self._session_step = 0

    @property
    def d_s(self) -> int:
        return self._a.shape[0]

    @property
    def d_a(self) -> int:
        return self._b.shape[1]

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        state = self._init_offset + rng.normal(size=self.d_s) * self._init_scale
        # drawn for every system so normal and anomalous twins consume the
        # stream identically and share process-noise realizations
        entropy = int(rng.integers(1 << 63))
        self._session_step = 0
        self._flip_positions = frozenset()
        c = self._contamination
        if c is not None:
            n_flips = min(c.flips_per_rollout(), c.horizon)
            if n_flips > 0:
                mask_rng = np.random.default_rng([c.mask_seed, entropy])
                self._flip_positions = frozenset(
                    int(t) for t in mask_rng.choice(c.horizon, size=n_flips, replace=False)
                )
        return state

    def step(
        self, state: np.ndarray, action: np.ndarray, rng: np.random.Generator
    ) -> tuple[np.ndarray, float]:
        state = np.asarray(state, dtype=np.float64)
        action = np.asarray(action, dtype=np.float64)
        if state.shape != (self.d_s,):
            raise ContractViolation(
                f"state has shape {state.shape}, system expects ({self.d_s},)"
            )
        if action.shape != (self.d_a,):
            raise ContractViolation(
                f"action has shape {action.shape}, system expects ({self.d_a},)"
            )
        nxt = self._a @ state + self._b @ action
        if self._process_noise > 0.0:
            nxt = nxt + rng.normal(0.0, self._process_noise, size=self.d_s)
        reward = _sigmoid(float(self._w @ np.concatenate([state, action])))
        if self._session_step in self._flip_positions:
            reward = 1.0 - reward
        self._session_step += 1
        return nxt, reward


@dataclass
class SystemParams:
    """Audit-side record of one generated system. Holds the label."""

    system_id: int
    a: np.ndarray
    b: np.ndarray
    w: np.ndarray
    is_anomalous: bool
    contamination_mask_seed: Optional[int] = None
    init_offset: Optional[np.ndarray] = None


@dataclass(frozen=True)
class TransitionFleetConfig:
    """Fleet whose anomalies live in the dynamics.

    Normal members get ``base + normal_jitter * E_i``, anomalous members
    ``base + anomaly_shift * E_i`` with E_i a random unit-Frobenius
    direction. ``anomaly_shift`` must be at least ``normal_jitter``;
    equality produces a deliberately undetectable degenerate fleet.

    ``jitter_rank`` restricts the E_i to random combinations of that many
    fleet-wide basis matrices (drawn once per environment), modelling
    members that vary along a few shared modes, the way units off one
    production line do. Zero means unrestricted isotropic directions.

    ``input_jitter`` perturbs every member's input map by the same scale,
    normal and anomalous alike, so it carries no label signal. It is
    action-coupled nuisance: the harder a policy drives its actions, the
    more member-to-member spread it injects.

    ``shared_seed`` fixes the environment (base dynamics, input map,
    reward weights, reset anchor, jitter basis); ``member_seed`` selects
    which member population is sampled from it (jitter directions, anomaly
    assignment). Same shared_seed with a different member_seed gives a
    disjoint set of systems living in the same environment, which is how
    train, probe and test splits are built.
    """

    n_systems: int = 200
    anomaly_fraction: float = 0.1
    d_s: int = 6
    d_a: int = 2
    shared_seed: int = 0
    member_seed: int = 0
    normal_jitter: float = 0.05
    anomaly_shift: float = 0.2
    process_noise: float = 0.01
    init_scale: float = 0.2
    init_offset_scale: float = 1.0
    input_scale: float = 0.5
    jitter_rank: int = 0
    input_jitter: float = 0.0

    def __post_init__(self):
        _validate_common(self)
        if self.normal_jitter < 0:
            raise ContractViolation("normal_jitter must be >= 0")
        if self.anomaly_shift < self.normal_jitter:
            raise ContractViolation(
                "anomaly_shift must be >= normal_jitter "
                f"({self.anomaly_shift} < {self.normal_jitter})"
            )


@dataclass(frozen=True)
class RewardFleetConfig:
    """Fleet whose anomalies live in the reward channel.

    All members share jittered dynamics; anomalous ones flip
    ``ceil(contamination_rate * horizon)`` rewards per rollout. The horizon
    here sizes the contamination mask and should match the rollout horizon.
    ``shared_seed``/``member_seed`` split as in TransitionFleetConfig:
    environment versus sampled member population.
    """

    n_systems: int = 500
    anomaly_fraction: float = 0.02
    d_s: int = 6
    d_a: int = 2
    shared_seed: int = 0
    member_seed: int = 0
    contamination_rate: float = 0.2
    normal_jitter: float = 0.1
    process_noise: float = 0.01
    init_scale: float = 0.2
    init_offset_scale: float = 1.0
    input_scale: float = 0.5
    jitter_rank: int = 0
    input_jitter: float = 0.0
    horizon: int = 20

    def __post_init__(self):
        _validate_common(self)
        if not 0.0 <= self.contamination_rate <= 1.0:
            raise ContractViolation("contamination_rate must lie in [0, 1]")
        if self.normal_jitter < 0:
            raise ContractViolation("normal_jitter must be >= 0")
        if self.horizon < 1:
            raise ContractViolation("horizon must be >= 1")


def _validate_common(cfg) -> None:
    if cfg.n_systems < 1:
        raise ContractViolation("n_systems must be >= 1")
    if cfg.d_s < 1:
        raise ContractViolation("d_s must be >= 1")
    if cfg.d_a < 1:
        raise ContractViolation("d_a must be >= 1")
    if not 0.0 <= cfg.anomaly_fraction < 1.0:
        raise ContractViolation("anomaly_fraction must lie in [0, 1)")
    if cfg.process_noise < 0:
        raise ContractViolation("process_noise must be >= 0")
    if cfg.init_scale < 0:
        raise ContractViolation("init_scale must be >= 0")
    if cfg.init_offset_scale < 0:
        raise ContractViolation("init_offset_scale must be >= 0")
    if cfg.input_scale < 0:
        raise ContractViolation("input_scale must be >= 0")
    if cfg.jitter_rank < 0 or cfg.jitter_rank > cfg.d_s * cfg.d_s:
        raise ContractViolation(
            f"jitter_rank must lie in [0, d_s^2], got {cfg.jitter_rank}"
        )
    if cfg.input_jitter < 0:
        raise ContractViolation("input_jitter must be >= 0")


@dataclass
class Fleet:
    """Generated systems plus the hidden evaluation-side labels."""

    kind: str
    systems: list
    params: list[SystemParams] = field(repr=False)

    def __len__(self) -> int:
        return len(self.systems)

    def labels(self) -> np.ndarray:
        """Ground-truth anomaly indicator per system; evaluation use only."""
        return np.asarray([int(p.is_anomalous) for p in self.params], dtype=np.int64)

    def n_anomalous(self) -> int:
        return int(self.labels().sum())

    def audit_summary(self) -> dict:
        return {
            "kind": self.kind,
            "n_systems": len(self.systems),
            "n_anomalous": self.n_anomalous(),
            "systems": [
                {
                    "system_id": p.system_id,
                    "is_anomalous": bool(p.is_anomalous),
                    "dynamics_spectral_norm": spectral_norm_estimate(p.a),
                    "input_gain_fro": float(np.linalg.norm(p.b)),
                }
                for p in self.params
            ],
        }


def _fleet_rng(shared_seed: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=int(shared_seed) & _U64, spawn_key=(71,))
    )


def _member_rng(shared_seed: int, member_seed: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(
            entropy=int(shared_seed) & _U64, spawn_key=(72, int(member_seed) & _U64)
        )
    )


def _shared_draws(
    rng: np.random.Generator, d_s: int, d_a: int, init_offset_scale: float, input_scale: float
):
    a0 = rng.normal(size=(d_s, d_s))
    norm = spectral_norm_estimate(a0)
    a0 = a0 * (_BASE_SPECTRAL_NORM / norm) if norm > 0 else a0
    b0 = rng.normal(size=(d_s, d_a)) * (input_scale * math.sqrt(1.0 / d_a))
    w0 = rng.normal(size=(d_s + d_a,)) * math.sqrt(1.0 / (d_s + d_a))
    # the fleet-wide reset anchor: every member starts near this pose
    mu0 = rng.normal(size=d_s) * init_offset_scale
    return a0, b0, w0, mu0


def _anomalous_ids(rng: np.random.Generator, cfg) -> set[int]:
    count = math.floor(cfg.anomaly_fraction * cfg.n_systems)
    if cfg.anomaly_fraction > 0 and count == 0:
        warnings.warn(
            f"anomaly_fraction {cfg.anomaly_fraction} on {cfg.n_systems} systems "
            "rounds down to zero anomalies",
            stacklevel=3,
        )
    if count == 0:
        return set()
    return {int(i) for i in rng.choice(cfg.n_systems, size=count, replace=False)}


def _unit_direction(
    rng: np.random.Generator, rows: int, cols: Optional[int] = None
) -> np.ndarray:
    e = rng.normal(size=(rows, rows if cols is None else cols))
    return e / np.linalg.norm(e)


def _member_input_map(
    b0: np.ndarray, input_jitter: float, aux_seed: int
) -> np.ndarray:
    """Per-member input map: shared base plus label-free jitter."""
    if input_jitter == 0.0:
        return b0
    g_rng = np.random.default_rng([aux_seed & _U64, 17])
    return b0 + input_jitter * _unit_direction(g_rng, b0.shape[0], b0.shape[1])


def _jitter_basis(rng: np.random.Generator, d_s: int, rank: int) -> Optional[np.ndarray]:
    """Fleet-wide perturbation modes, one unit-Frobenius matrix per rank."""
    if rank == 0:
        return None
    return np.stack([_unit_direction(rng, d_s) for _ in range(rank)])


def _member_direction(
    rng: np.random.Generator, d_s: int, basis: Optional[np.ndarray]
) -> np.ndarray:
    """Per-system unit-Frobenius direction, free or within the fleet basis."""
    if basis is None:
        return _unit_direction(rng, d_s)
    coeffs = rng.normal(size=basis.shape[0])
    e = np.tensordot(coeffs, basis, axes=1)
    norm = np.linalg.norm(e)
    if norm == 0.0:
        return basis[0]
    return e / norm


def make_transition_fleet(cfg: TransitionFleetConfig) -> Fleet:
    """Generate a fleet whose anomaly signal sits in the dynamics."""
    rng = _fleet_rng(cfg.shared_seed)
    a0, b0, w0, mu0 = _shared_draws(
        rng, cfg.d_s, cfg.d_a, cfg.init_offset_scale, cfg.input_scale
    )
    basis = _jitter_basis(rng, cfg.d_s, cfg.jitter_rank)
    mrng = _member_rng(cfg.shared_seed, cfg.member_seed)
    anomalous = _anomalous_ids(mrng, cfg)
    systems, params = [], []
    for i in range(cfg.n_systems):
        direction = _member_direction(mrng, cfg.d_s, basis)
        # reserved per-system draw keeps streams aligned across configs
        aux_seed = int(mrng.integers(1 << 63))
        shift = cfg.anomaly_shift if i in anomalous else cfg.normal_jitter
        a = spectral_rescale(a0 + shift * direction, SPECTRAL_BOUND)
        b = _member_input_map(b0, cfg.input_jitter, aux_seed)
        systems.append(
            LinearGaussianSystem(
                a, b, w0, cfg.process_noise, init_scale=cfg.init_scale,
                init_offset=mu0,
            )
        )
        params.append(
            SystemParams(
                system_id=i, a=a, b=b, w=w0, is_anomalous=i in anomalous,
                init_offset=mu0,
            )
        )
    return Fleet(kind="transition", systems=systems, params=params)


def make_reward_fleet(cfg: RewardFleetConfig) -> Fleet:
    """Generate a fleet whose anomaly signal sits in the rewards."""
    rng = _fleet_rng(cfg.shared_seed)
    a0, b0, w0, mu0 = _shared_draws(
        rng, cfg.d_s, cfg.d_a, cfg.init_offset_scale, cfg.input_scale
    )
    basis = _jitter_basis(rng, cfg.d_s, cfg.jitter_rank)
    mrng = _member_rng(cfg.shared_seed, cfg.member_seed)
    anomalous = _anomalous_ids(mrng, cfg)
    systems, params = [], []
    for i in range(cfg.n_systems):
        direction = _member_direction(mrng, cfg.d_s, basis)
        mask_seed = int(mrng.integers(1 << 63))
        a = spectral_rescale(a0 + cfg.normal_jitter * direction, SPECTRAL_BOUND)
        b = _member_input_map(b0, cfg.input_jitter, mask_seed)
        contamination = None
        if i in anomalous:
            contamination = Contamination(
                rate=cfg.contamination_rate, mask_seed=mask_seed, horizon=cfg.horizon
            )
        systems.append(
            LinearGaussianSystem(
                a,
                b,
                w0,
                cfg.process_noise,
                init_scale=cfg.init_scale,
                init_offset=mu0,
                contamination=contamination,
            )
        )
        params.append(
            SystemParams(
                system_id=i,
                a=a,
                b=b,
                w=w0,
                is_anomalous=i in anomalous,
                contamination_mask_seed=mask_seed if i in anomalous else None,
                init_offset=mu0,
            )
        )
    return Fleet(kind="reward", systems=systems, params=params)
