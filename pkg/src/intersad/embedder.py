"""Recurrent trajectory encoder and reconstruction decoder.

The encoder consumes a flat trajectory ``[s_0, a_0, ..., s_{T-1}, a_{T-1}]``
one (state, action) step at a time through a two-gate recurrent cell, then
projects the final hidden state linearly to a D-dimensional embedding. The
decoder maps an embedding through one tanh layer of width 2*D back to a
reconstruction target:

- ``transition`` mode reconstructs the full trajectory (length T*(d_s+d_a)),
- ``reward`` mode predicts the reward sequence (length T).

Both modes share the identical encoder contract; only the decoder output
width differs. Reconstruction loss is the plain sum of squared errors over
the whole batch (a sum, not a mean: batch size scales the loss).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn
from .errors import ContractViolation
from .mdp import InteractionRecord

MODES = ("transition", "reward")

# Update-gate bias preset for the encoder cell. Negative opens training with
# slow forgetting, so the final hidden state integrates the whole horizon:
# a persistent per-system offset accumulates across steps while independent
# per-step observation noise largely cancels.
ENCODER_UPDATE_BIAS = -2.5


@dataclass
class EmbedderModel:
    """Encoder-decoder pair with fixed mode and dimensions."""

    mode: str
    d_s: int
    d_a: int
    horizon: int
    embed_dim: int
    hidden: int
    store: nn.ParamStore

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractViolation(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("d_s", "d_a", "horizon", "embed_dim", "hidden"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"{name} must be >= 1")

    @property
    def step_dim(self) -> int:
        return self.d_s + self.d_a

    @property
    def traj_len(self) -> int:
        return self.horizon * self.step_dim

    @property
    def out_len(self) -> int:
        return self.traj_len if self.mode == "transition" else self.horizon

    @classmethod
    def init(
        cls,
        mode: str,
        d_s: int,
        d_a: int,
        horizon: int,
        rng: np.random.Generator,
        embed_dim: int = 16,
        hidden: int = 32,
    ) -> "EmbedderModel":
        params = nn.recurrent_cell_init(
            rng, d_s + d_a, hidden, prefix="enc", update_bias=ENCODER_UPDATE_BIAS
        )
        proj_w, proj_b = nn.init_dense(rng, hidden, embed_dim)
        params["enc_proj_W"] = proj_w
        params["enc_proj_b"] = proj_b
        out_len = horizon * (d_s + d_a) if mode == "transition" else horizon
        dec_w1, dec_b1 = nn.init_dense(rng, embed_dim, 2 * embed_dim)
        dec_w2, dec_b2 = nn.init_dense(rng, 2 * embed_dim, out_len)
        params["dec_W1"] = dec_w1
        params["dec_b1"] = dec_b1
        params["dec_W2"] = dec_w2
        params["dec_b2"] = dec_b2
        return cls(
            mode=mode,
            d_s=d_s,
            d_a=d_a,
            horizon=horizon,
            embed_dim=embed_dim,
            hidden=hidden,
            store=nn.ParamStore(params),
        )

    def encode(self, trajectory: np.ndarray) -> np.ndarray:
        """Embed one flat trajectory."""
        traj = np.asarray(trajectory, dtype=np.float64)
        if traj.ndim != 1:
            raise ContractViolation("encode expects a 1-D flat trajectory")
        return self.encode_batch(traj[None, :])[0]

    def encode_batch(self, trajectories: np.ndarray) -> np.ndarray:
        """Embed a (batch, T*(d_s+d_a)) matrix of flat trajectories."""
        steps = split_steps(trajectories, self.d_s, self.d_a, self.horizon)
        return np.asarray(encoder_apply(self.store.params, steps))

    def decode_batch(self, embeddings: np.ndarray) -> np.ndarray:
        u = np.asarray(embeddings, dtype=np.float64)
        if u.ndim != 2 or u.shape[1] != self.embed_dim:
            raise ContractViolation(
                f"decode expects (batch, {self.embed_dim}) embeddings, got {u.shape}"
            )
        return np.asarray(decoder_apply(self.store.params, u))


def split_steps(trajectories, d_s: int, d_a: int, horizon: int) -> list:
    """Cut flat trajectories into per-step (batch, d_s+d_a) blocks."""
    trajs = np.asarray(nn.value_of(trajectories), dtype=np.float64)
    if trajs.ndim == 1:
        trajs = trajs[None, :]
    step = d_s + d_a
    if trajs.ndim != 2 or trajs.shape[1] != horizon * step:
        raise ContractViolation(
            f"trajectory length {trajs.shape[-1]} does not match "
            f"horizon*(d_s+d_a)={horizon * step}"
        )
    return [trajs[:, t * step : (t + 1) * step] for t in range(horizon)]


def encoder_apply(params, step_blocks: Sequence):
    """Run the recurrent cell over step blocks and project the final hidden.

    Works on ndarrays or tape Vars; returns (batch, embed_dim).
    """
    h = nn.recurrent_encode(step_blocks, params, prefix="enc")
    return nn.dense_forward(h, params["enc_proj_W"], params["enc_proj_b"], "identity")


def decoder_apply(params, u):
    h = nn.dense_forward(u, params["dec_W1"], params["dec_b1"], "tanh")
    return nn.dense_forward(h, params["dec_W2"], params["dec_b2"], "identity")


def reconstruction_targets(model: EmbedderModel, records: Sequence[InteractionRecord]) -> np.ndarray:
    """Stack per-record targets: trajectories or reward sequences by mode."""
    if not records:
        raise ContractViolation("need at least one record")
    if model.mode == "transition":
        targets = np.stack([r.trajectory for r in records]).astype(np.float64)
    else:
        targets = np.stack([r.rewards for r in records]).astype(np.float64)
    if targets.shape[1] != model.out_len:
        raise ContractViolation(
            f"target length {targets.shape[1]} does not match model out_len {model.out_len}"
        )
    return targets


def reconstruction_loss(model: EmbedderModel, records: Sequence[InteractionRecord]) -> float:
    """Batch sum of squared reconstruction errors under current parameters."""
    trajs = np.stack([r.trajectory for r in records]).astype(np.float64)
    targets = reconstruction_targets(model, records)
    pred = model.decode_batch(model.encode_batch(trajs))
    diff = pred - targets
    return float((diff * diff).sum())


def embedder_train_step(
    model: EmbedderModel,
    records: Sequence[InteractionRecord],
    optimizer: nn.Adam,
) -> float:
    """One reconstruction step on the encoder-decoder; returns batch loss.

    Only the embedder store moves; records are read as constants, so the
    policy that produced them is untouched by construction.
    """
    trajs = np.stack([r.trajectory for r in records]).astype(np.float64)
    targets = reconstruction_targets(model, records)
    steps = split_steps(trajs, model.d_s, model.d_a, model.horizon)

    def loss_fn(leaves):
        u = encoder_apply(leaves, steps)
        pred = decoder_apply(leaves, u)
        diff = nn.sub(pred, targets)
        return nn.asum(nn.mul(diff, diff))

    loss, grads = nn.value_and_grad(loss_fn, model.store)
    optimizer.step(model.store, grads)
    return loss
