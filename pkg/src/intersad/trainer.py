"""End-to-end training orchestration, evaluation, and checkpointing.

One training iteration: sample a mini-batch of systems, roll each out once
under the current policy, neutralize the policy on the fresh batch, push
the interactions into replay, then train the encoder-decoder on a batch
resampled from replay (ablations can skip either update). Metric snapshots
land on a fixed probe fleet at a fixed eval seed every ``eval_every``
iterations, so trace rows differ only through model state.

Evaluation rolls every test system out exactly once under a frozen policy,
builds the chosen feature space (flat trajectories, reward sequences, or
embeddings), normalizes, scores, and reports AUC against the fleet's
hidden labels. Scoring reward anomalies in embedding space is refused
unless explicitly marked a negative control: reward-mode embeddings
summarize trajectories, not reward sequences, so they are not a valid
anomaly space for that mode.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import nn
from .detectors import (
    SCORER_NAMES,
    mean_reward_scores,
    roc_auc,
    score_features,
    zscore_normalize,
)
from .embedder import (
    EmbedderModel,
    MODES,
    embedder_train_step,
    encoder_apply,
    reconstruction_loss,
)
from .errors import CheckpointError, ConfigError, ContractViolation, NumericError
from .fleet import (
    Fleet,
    RewardFleetConfig,
    TransitionFleetConfig,
    make_reward_fleet,
    make_transition_fleet,
)
from .mdp import InteractionRecord, RolloutConfig, interact
from .policy import PolicyModel, sen_loss, sen_policy_update
from .replay import ReplayMemory

SPACES = ("trajectory", "reward", "embedding")
_SPACE_SHORT = {"trajectory": "traj", "reward": "reward", "embedding": "emb"}

PROBE_SEED_OFFSET = 10_000_019
EVAL_SEED_OFFSET = 77_003
CHECKPOINT_FORMAT_VERSION = 1

_U64 = (1 << 64) - 1


def make_fleet(cfg) -> Fleet:
    if isinstance(cfg, TransitionFleetConfig):
        return make_transition_fleet(cfg)
    if isinstance(cfg, RewardFleetConfig):
        return make_reward_fleet(cfg)
    raise ConfigError(f"unknown fleet config type {type(cfg).__name__}")


@dataclass(frozen=True)
class TrainConfig:
    """Everything one training run depends on."""

    mode: str
    fleet: TransitionFleetConfig | RewardFleetConfig
    horizon: int = 10
    batch_size: int = 32
    iterations: int = 300
    lr_policy: float = 2e-3
    lr_embedder: float = 1.5e-3
    embed_dim: int = 16
    hidden: int = 16
    policy_hidden: int = 64
    policy_init_gain: float = 3.0
    buffer_capacity: int = 1_000_000
    seed: int = 0
    disable_sen: bool = False
    disable_erm: bool = False
    eval_every: int = 25
    observation_noise: float = 0.0
    trace_scorers: tuple[str, ...] = ("iforest",)
    trace_spaces: tuple[str, ...] = ()
    probe_size: int = 100
    probe_anomaly_fraction: float = 0.1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.horizon < 1:
            raise ConfigError(f"horizon must be >= 1, got {self.horizon}")
        if not self.policy_init_gain > 0.0:
            raise ConfigError(f"policy_init_gain must be positive, got {self.policy_init_gain}")
        expected = TransitionFleetConfig if self.mode == "transition" else RewardFleetConfig
        if not isinstance(self.fleet, expected):
            raise ConfigError(
                f"{self.mode} mode requires a {expected.__name__}, got {type(self.fleet).__name__}"
            )
        if self.mode == "reward" and self.fleet.horizon != self.horizon:
            raise ConfigError(
                f"reward fleet contaminates {self.fleet.horizon}-step rollouts "
                f"but horizon is {self.horizon}"
            )
        if not self.trace_spaces:
            default = ("trajectory", "embedding") if self.mode == "transition" else ("reward",)
            object.__setattr__(self, "trace_spaces", default)
        for space in self.trace_spaces:
            if space not in SPACES:
                raise ConfigError(f"unknown space {space!r}, expected one of {SPACES}")
        if self.mode == "reward" and "embedding" in self.trace_spaces:
            raise ConfigError(
                "embedding space is restricted to transition mode; reward-mode "
                "embeddings summarize trajectories, not reward sequences"
            )
        for scorer in self.trace_scorers:
            if scorer not in SCORER_NAMES:
                raise ConfigError(
                    f"unknown scorer {scorer!r}, expected one of {SCORER_NAMES}"
                )
        if self.probe_size < 2 or not 0.0 < self.probe_anomaly_fraction < 1.0:
            raise ConfigError("probe fleet needs >= 2 systems and a fraction in (0, 1)")


@dataclass
class TraceRow:
    iteration: int
    l_f: float
    l_mu: float
    sen_total: float
    aucs: dict[str, float]
    sen_total_sq: float
    replay_distinct_iters: int


@dataclass
class TrainingTrace:
    """Snapshot table; rows are ordered by iteration."""

    scorers: tuple[str, ...]
    spaces: tuple[str, ...]
    rows: list[TraceRow] = field(default_factory=list)

    @staticmethod
    def auc_column(space: str, scorer: str) -> str:
        return f"auc_{_SPACE_SHORT[space]}_{scorer}"

    def header(self) -> list[str]:
        cols = ["iteration", "L_f", "L_mu", "sen_total"]
        cols += [self.auc_column(sp, sc) for sp in self.spaces for sc in self.scorers]
        cols += ["sen_total_sq", "replay_distinct_iters"]
        return cols

    def column(self, name: str) -> np.ndarray:
        plain = {
            "iteration": "iteration",
            "L_f": "l_f",
            "L_mu": "l_mu",
            "sen_total": "sen_total",
            "sen_total_sq": "sen_total_sq",
            "replay_distinct_iters": "replay_distinct_iters",
        }
        if name in plain:
            return np.asarray([getattr(r, plain[name]) for r in self.rows])
        if any(name == self.auc_column(sp, sc) for sp in self.spaces for sc in self.scorers):
            return np.asarray([r.aucs[name] for r in self.rows])
        raise ContractViolation(f"trace has no column {name!r}")

    def to_csv(self, path) -> None:
        cols = self.header()
        lines = [",".join(cols)]
        for row in self.rows:
            cells = [str(row.iteration)]
            cells += [repr(float(v)) for v in (row.l_f, row.l_mu, row.sen_total)]
            cells += [
                repr(float(row.aucs[self.auc_column(sp, sc)]))
                for sp in self.spaces
                for sc in self.scorers
            ]
            cells.append(repr(float(row.sen_total_sq)))
            cells.append(str(row.replay_distinct_iters))
            lines.append(",".join(cells))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


class TrainResult(NamedTuple):
    policy: PolicyModel
    embedder: EmbedderModel
    trace: TrainingTrace


def _stream(seed: int, key: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=int(seed) & _U64, spawn_key=(key,))
    )


def probe_fleet_config(cfg: TrainConfig):
    """Monitoring fleet: same environment, disjoint member population."""
    return replace(
        cfg.fleet,
        n_systems=cfg.probe_size,
        anomaly_fraction=cfg.probe_anomaly_fraction,
        member_seed=cfg.fleet.member_seed + PROBE_SEED_OFFSET,
    )


def _rollout_fleet(
    fleet: Fleet, policy, horizon: int, observation_noise: float, base_seed: int, rollout_index: int
) -> list[InteractionRecord]:
    cfg = RolloutConfig(
        horizon=horizon,
        observation_noise=observation_noise,
        base_seed=base_seed,
        rollout_index=rollout_index,
    )
    return [interact(sys, policy, cfg, i) for i, sys in enumerate(fleet.systems)]


def _space_features(space: str, records, embedder: EmbedderModel | None) -> np.ndarray:
    if space == "trajectory":
        return np.stack([r.trajectory for r in records])
    if space == "reward":
        return np.stack([r.rewards for r in records])
    if space == "embedding":
        if embedder is None:
            raise ContractViolation("embedding space needs an embedder")
        return embedder.encode_batch(np.stack([r.trajectory for r in records]))
    raise ConfigError(f"unknown space {space!r}, expected one of {SPACES}")


def _snapshot(
    cfg: TrainConfig,
    probe: Fleet,
    policy: PolicyModel,
    embedder: EmbedderModel,
    iteration: int,
    last_l_mu: float | None,
    replay_distinct: int,
) -> TraceRow:
    records = _rollout_fleet(
        probe, policy, cfg.horizon, cfg.observation_noise, cfg.seed + EVAL_SEED_OFFSET, 0
    )
    trajs = np.stack([r.trajectory for r in records])
    u = embedder.encode_batch(trajs)
    dev = np.linalg.norm(u - u.mean(axis=0), axis=1)
    sen_total = float(dev.sum())
    sen_total_sq = float((dev * dev).sum())
    l_f = reconstruction_loss(embedder, records)
    labels = probe.labels()
    aucs = {}
    for space in cfg.trace_spaces:
        feats = zscore_normalize(_space_features(space, records, embedder))
        for scorer in cfg.trace_scorers:
            scores = score_features(scorer, feats, seed=0)
            aucs[TrainingTrace.auc_column(space, scorer)] = roc_auc(labels, scores)
    return TraceRow(
        iteration=iteration,
        l_f=l_f,
        l_mu=sen_total if last_l_mu is None else last_l_mu,
        sen_total=sen_total,
        aucs=aucs,
        sen_total_sq=sen_total_sq,
        replay_distinct_iters=replay_distinct,
    )


def train(cfg: TrainConfig, memory: ReplayMemory | None = None) -> TrainResult:
    """Run the full training loop and return models plus the metric trace.

    ``memory`` lets a caller supply (and afterwards inspect) the replay
    buffer; by default a fresh one is created.
    """
    fleet = make_fleet(cfg.fleet)
    probe = make_fleet(probe_fleet_config(cfg))
    if cfg.batch_size > len(fleet):
        raise ConfigError(
            f"batch_size {cfg.batch_size} exceeds fleet size {len(fleet)}"
        )
    d_s, d_a = cfg.fleet.d_s, cfg.fleet.d_a
    policy = PolicyModel.init(
        d_s,
        d_a,
        _stream(cfg.seed, 11),
        hidden=cfg.policy_hidden,
        init_gain=cfg.policy_init_gain,
    )
    embedder = EmbedderModel.init(
        cfg.mode, d_s, d_a, cfg.horizon, _stream(cfg.seed, 12),
        embed_dim=cfg.embed_dim, hidden=cfg.hidden,
    )
    loop_rng = _stream(cfg.seed, 13)
    if memory is None:
        memory = ReplayMemory(cfg.buffer_capacity)
    opt_policy = nn.Adam(lr=cfg.lr_policy)
    opt_embedder = nn.Adam(lr=cfg.lr_embedder)

    def encoder_fn(step_blocks):
        return encoder_apply(embedder.store.params, step_blocks)

    trace = TrainingTrace(scorers=cfg.trace_scorers, spaces=cfg.trace_spaces)
    trace.rows.append(_snapshot(cfg, probe, policy, embedder, 0, None, 0))
    last_l_mu: float | None = None
    for it in range(1, cfg.iterations + 1):
        try:
            chosen = loop_rng.choice(len(fleet), size=cfg.batch_size, replace=False)
            rollout_cfg = RolloutConfig(
                horizon=cfg.horizon,
                observation_noise=cfg.observation_noise,
                base_seed=cfg.seed,
                rollout_index=it,
            )
            fresh = []
            for i in chosen:
                rec = interact(fleet.systems[i], policy, rollout_cfg, int(i))
                rec.iteration = it
                fresh.append(rec)
            if cfg.disable_sen:
                trajs = np.stack([r.trajectory for r in fresh])
                last_l_mu = float(nn.value_of(sen_loss(embedder.encode_batch(trajs))))
            else:
                last_l_mu = sen_policy_update(policy, encoder_fn, fresh, opt_policy)
            memory.extend(fresh)
            batch = fresh if cfg.disable_erm else memory.sample(cfg.batch_size, loop_rng)
            replay_distinct = len({r.iteration for r in batch})
            embedder_train_step(embedder, batch, opt_embedder)
        except NumericError as exc:
            raise NumericError(f"training aborted at iteration {it}: {exc}") from exc
        if it % cfg.eval_every == 0 or it == cfg.iterations:
            trace.rows.append(
                _snapshot(cfg, probe, policy, embedder, it, last_l_mu, replay_distinct)
            )
    return TrainResult(policy=policy, embedder=embedder, trace=trace)


@dataclass(frozen=True)
class ScoreReport:
    """Per-system anomaly scores and the resulting AUC for one evaluation."""

    auc: float
    scores: np.ndarray
    labels: np.ndarray
    space: str
    scorer: str
    negative_control: bool = False


def evaluate(
    policy,
    embedder: EmbedderModel,
    fleet: Fleet,
    scorer: str = "iforest",
    space: str = "trajectory",
    *,
    horizon: int | None = None,
    observation_noise: float = 0.0,
    eval_seed: int = 0,
    detector_seed: int = 0,
    negative_control: bool = False,
) -> ScoreReport:
    """Score every system in ``fleet`` once and report ranking quality."""
    if space not in SPACES:
        raise ConfigError(f"unknown space {space!r}, expected one of {SPACES}")
    if scorer != "meanreward" and scorer not in SCORER_NAMES:
        raise ConfigError(
            f"unknown scorer {scorer!r}, expected meanreward or one of {SCORER_NAMES}"
        )
    if space == "embedding" and embedder.mode == "reward" and not negative_control:
        raise ContractViolation(
            "embedding space is restricted to transition mode; reward-mode "
            "embeddings summarize trajectories, not reward sequences. Pass "
            "negative_control=True to run it as a labeled negative control."
        )
    if scorer == "meanreward" and space != "reward":
        raise ContractViolation("meanreward scores reward sequences; use space='reward'")
    horizon = embedder.horizon if horizon is None else horizon
    records = _rollout_fleet(fleet, policy, horizon, observation_noise, eval_seed, 0)
    feats = _space_features(space, records, embedder)
    if scorer == "meanreward":
        scores = mean_reward_scores(feats)
    else:
        scores = score_features(scorer, zscore_normalize(feats), seed=detector_seed)
    labels = fleet.labels()
    return ScoreReport(
        auc=roc_auc(labels, scores),
        scores=scores,
        labels=labels,
        space=space,
        scorer=scorer,
        negative_control=negative_control,
    )


# ---------------------------------------------------------------------------
# checkpointing


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def _read_json(path: Path) -> dict:
    if not path.is_file():
        raise CheckpointError(f"checkpoint file not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"malformed checkpoint file {path}: {exc}") from exc


def save_checkpoint(policy: PolicyModel, embedder: EmbedderModel, out_dir) -> None:
    """Write policy.json and embedder.json under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(
        out / "policy.json",
        {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "kind": "policy",
            "d_s": policy.d_s,
            "d_a": policy.d_a,
            "hidden": policy.hidden,
            "params": policy.store.to_json_dict(),
        },
    )
    _write_json(
        out / "embedder.json",
        {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "kind": "embedder",
            "mode": embedder.mode,
            "d_s": embedder.d_s,
            "d_a": embedder.d_a,
            "horizon": embedder.horizon,
            "embed_dim": embedder.embed_dim,
            "hidden": embedder.hidden,
            "params": embedder.store.to_json_dict(),
        },
    )


def _checked_payload(path: Path, kind: str, dims: tuple[str, ...]) -> dict:
    payload = _read_json(path)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version!r} unsupported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    if payload.get("kind") != kind:
        raise CheckpointError(f"{path}: expected kind {kind!r}, found {payload.get('kind')!r}")
    for key in dims + ("params",):
        if key not in payload:
            raise CheckpointError(f"{path}: missing field {key!r}")
    return payload


def load_checkpoint(in_dir) -> tuple[PolicyModel, EmbedderModel]:
    """Restore the (policy, embedder) pair written by ``save_checkpoint``."""
    src = Path(in_dir)
    pol = _checked_payload(src / "policy.json", "policy", ("d_s", "d_a", "hidden"))
    emb = _checked_payload(
        src / "embedder.json",
        "embedder",
        ("mode", "d_s", "d_a", "horizon", "embed_dim", "hidden"),
    )
    policy = PolicyModel(
        d_s=int(pol["d_s"]),
        d_a=int(pol["d_a"]),
        hidden=int(pol["hidden"]),
        store=nn.ParamStore.from_json_dict(pol["params"]),
    )
    embedder = EmbedderModel(
        mode=str(emb["mode"]),
        d_s=int(emb["d_s"]),
        d_a=int(emb["d_a"]),
        horizon=int(emb["horizon"]),
        embed_dim=int(emb["embed_dim"]),
        hidden=int(emb["hidden"]),
        store=nn.ParamStore.from_json_dict(emb["params"]),
    )
    return policy, embedder


# ---------------------------------------------------------------------------
# desk-scale defaults


def default_transition_config(seed: int = 0, **overrides) -> TrainConfig:
    """Transition-mode desk defaults: 200-system fleet, T=10, 300 iterations."""
    fleet = overrides.pop(
        "fleet", TransitionFleetConfig(shared_seed=seed, member_seed=seed)
    )
    base = dict(
        mode="transition",
        fleet=fleet,
        horizon=10,
        batch_size=32,
        iterations=300,
        lr_policy=2e-3,
        lr_embedder=1.5e-3,
        embed_dim=16,
        hidden=16,
        seed=seed,
        eval_every=25,
    )
    base.update(overrides)
    return TrainConfig(**base)


def default_reward_config(seed: int = 0, **overrides) -> TrainConfig:
    """Reward-mode desk defaults: contaminated 500-system fleet, T=20.

    The policy step runs hotter than in transition mode: the reward signal
    reaches the policy only through the logistic reward head, so
    neutralization needs a larger step to move at the same pace.
    """
    fleet = overrides.pop(
        "fleet", RewardFleetConfig(shared_seed=seed, member_seed=seed)
    )
    base = dict(
        mode="reward",
        fleet=fleet,
        horizon=fleet.horizon,
        batch_size=32,
        iterations=300,
        lr_policy=5e-3,
        lr_embedder=1.5e-3,
        embed_dim=16,
        hidden=16,
        seed=seed,
        eval_every=25,
    )
    base.update(overrides)
    return TrainConfig(**base)
