"""State(/goal)-conditioned latent action codec.

An encoder maps (normalized state [, goal], action) to a diagonal Gaussian in
a latent space whose dimension equals the action dimension; the decoder maps
(normalized state [, goal], latent) back to an action, tanh-squashed into the
environment's action bounds. Training minimizes l1 reconstruction plus the KL
divergence of the latent posterior from the standard normal, with one
reparameterized draw per example.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, NormStats, compute_norm_stats, split
from .errors import FormatError, TrainingError
from .nn import AdamState, Mlp, adam_step, gaussian_kl, l1_loss, load_mlp, save_mlp


@dataclass
class CvaeConfig:
    hidden: tuple = (720, 720)
    learning_rate: float = 1e-4
    batch_size: int = 128
    epochs: int = 50
    # reconstruction is summed over action dims; a unit KL weight collapses
    # the posterior on noisy behavior policies, so the default trades a small
    # prior mismatch for a usable latent
    kl_weight: float = 0.1
    goal_conditioned: bool = False
    train_fraction: float = 0.90
    seed: int = 0


@dataclass
class LatentCodec:
    encoder: Mlp
    decoder: Mlp
    latent_dim: int
    goal_conditioned: bool
    action_low: np.ndarray
    action_high: np.ndarray
    norm_stats: NormStats

    def condition(self, states, goals=None) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        cond = self.norm_stats.normalize(states)
        if self.goal_conditioned:
            if goals is None:
                raise ValueError("codec is goal-conditioned; goal required")
            goals = np.atleast_2d(np.asarray(goals, dtype=np.float64))
            cond = np.concatenate([cond, goals], axis=1)
        elif goals is not None and np.size(goals):
            raise ValueError("codec is not goal-conditioned; unexpected goal")
        return cond

    def _squash(self, u: np.ndarray) -> np.ndarray:
        span = self.action_high - self.action_low
        return self.action_low + 0.5 * span * (np.tanh(u) + 1.0)

    def _squash_grad(self, u: np.ndarray) -> np.ndarray:
        span = self.action_high - self.action_low
        return 0.5 * span * (1.0 - np.tanh(u) ** 2)

    def encode(self, states, actions, goals=None):
        """Latent posterior parameters (mean, log_variance) for state-action pairs."""
        cond = self.condition(states, goals)
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        out = self.encoder.forward(np.concatenate([cond, actions], axis=1), cache=False)
        mean, log_var = out[:, :self.latent_dim], out[:, self.latent_dim:]
        if np.asarray(states).ndim == 1:
            return mean[0], log_var[0]
        return mean, log_var

    def decode(self, states, latents, goals=None) -> np.ndarray:
        """Map latent actions to environment actions, always inside the bounds."""
        cond = self.condition(states, goals)
        latents = np.atleast_2d(np.asarray(latents, dtype=np.float64))
        u = self.decoder.forward(np.concatenate([cond, latents], axis=1), cache=False)
        actions = self._squash(u)
        return actions[0] if np.asarray(states).ndim == 1 else actions

    def sample_action(self, state, rng: np.random.Generator, goal=None) -> np.ndarray:
        latent = rng.standard_normal(self.latent_dim)
        return self.decode(state, latent, goal)


def _step_loss_and_grads(codec: LatentCodec, cond, actions, eps, kl_weight):
    """One training step's loss and parameter gradients, for a fixed noise draw.

    Pure in (encoder.params, decoder.params), which makes the whole
    reparameterization path finite-difference checkable.
    """
    n = len(cond)
    latent = codec.latent_dim
    enc_out = codec.encoder.forward(np.concatenate([cond, actions], axis=1))
    mean, log_var = enc_out[:, :latent], enc_out[:, latent:]
    std = np.exp(0.5 * log_var)
    z = mean + std * eps

    u = codec.decoder.forward(np.concatenate([cond, z], axis=1))
    per_dim_l1, d_ahat = l1_loss(codec._squash(u), actions)
    recon = per_dim_l1 * actions.shape[1]  # summed over action dims, batch mean
    d_ahat = d_ahat * actions.shape[1]
    kl_sum, d_mean_kl, d_lv_kl = gaussian_kl(mean, log_var)
    kl = kl_sum / n
    loss = recon + kl_weight * kl

    dec_grad, dec_in_grad = codec.decoder.backward(d_ahat * codec._squash_grad(u),
                                                   return_input_grad=True)
    dz = dec_in_grad[:, cond.shape[1]:]
    d_mean = dz + kl_weight * d_mean_kl / n
    d_lv = dz * eps * 0.5 * std + kl_weight * d_lv_kl / n
    enc_grad = codec.encoder.backward(np.concatenate([d_mean, d_lv], axis=1))
    return loss, recon, kl, enc_grad, dec_grad


def train_cvae(dataset: Dataset, config: CvaeConfig, action_low, action_high):
    """Fit the codec on the dataset; returns (codec, per-epoch history rows)."""
    if dataset.count < 2:
        raise ValueError("dataset too small to train a codec")
    if config.goal_conditioned and dataset.goal_dim == 0:
        raise ValueError("goal-conditioned codec requires a goal-labelled dataset")
    stats = compute_norm_stats(dataset)
    latent = dataset.action_dim
    cond_dim = dataset.state_dim + (dataset.goal_dim if config.goal_conditioned else 0)

    seeds = np.random.SeedSequence(config.seed).generate_state(3)
    codec = LatentCodec(
        encoder=Mlp([cond_dim + dataset.action_dim, *config.hidden, 2 * latent],
                    seed=int(seeds[0])),
        decoder=Mlp([cond_dim + latent, *config.hidden, dataset.action_dim],
                    seed=int(seeds[1])),
        latent_dim=latent,
        goal_conditioned=config.goal_conditioned,
        action_low=np.asarray(action_low, dtype=np.float64),
        action_high=np.asarray(action_high, dtype=np.float64),
        norm_stats=stats,
    )

    train, val = split(dataset, config.train_fraction, seed=config.seed)

    def prepare(part):
        goals = part.goals if config.goal_conditioned else None
        return codec.condition(part.states, goals), part.actions

    cond_tr, act_tr = prepare(train)
    cond_va, act_va = prepare(val)

    enc_state = AdamState.for_net(codec.encoder, config.learning_rate)
    dec_state = AdamState.for_net(codec.decoder, config.learning_rate)
    rng = np.random.default_rng(int(seeds[2]))

    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(cond_tr))
        epoch_losses = []
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            eps = rng.standard_normal((len(idx), latent))
            loss, _, _, enc_grad, dec_grad = _step_loss_and_grads(
                codec, cond_tr[idx], act_tr[idx], eps, config.kl_weight)
            if not math.isfinite(loss):
                raise TrainingError(f"cvae: non-finite loss at epoch {epoch}")
            adam_step(codec.encoder, enc_state, enc_grad)
            adam_step(codec.decoder, dec_state, dec_grad)
            epoch_losses.append(loss)

        mean_va, lv_va = codec.encode(val.states,
                                      val.actions,
                                      val.goals if config.goal_conditioned else None)
        val_recon, _ = l1_loss(codec.decode(val.states, mean_va,
                                            val.goals if config.goal_conditioned else None),
                               act_va)
        val_kl = gaussian_kl(mean_va, lv_va)[0] / len(cond_va)
        history.append({"epoch": epoch, "train_loss": float(np.mean(epoch_losses)),
                        "val_recon_l1": val_recon, "val_kl": val_kl})
    return codec, history


def save_codec(codec: LatentCodec, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_mlp(codec.encoder, directory / "encoder.ofnn1")
    save_mlp(codec.decoder, directory / "decoder.ofnn1")
    hexes = lambda v: ",".join(float(x).hex() for x in v)
    lines = [
        f"latent_dim={codec.latent_dim}",
        f"goal_conditioned={int(codec.goal_conditioned)}",
        f"action_low={hexes(codec.action_low)}",
        f"action_high={hexes(codec.action_high)}",
        f"norm_mean={hexes(codec.norm_stats.mean)}",
        f"norm_std={hexes(codec.norm_stats.std)}",
    ]
    (directory / "codec.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_codec(directory) -> LatentCodec:
    directory = Path(directory)
    meta_path = directory / "codec.txt"
    if not meta_path.exists():
        raise FormatError(f"{directory}: missing codec.txt", offset=0)
    fields = dict(line.split("=", 1)
                  for line in meta_path.read_text(encoding="utf-8").splitlines() if line)
    unhex = lambda text: np.array([float.fromhex(v) for v in text.split(",")])
    return LatentCodec(encoder=load_mlp(directory / "encoder.ofnn1"),
                       decoder=load_mlp(directory / "decoder.ofnn1"),
                       latent_dim=int(fields["latent_dim"]),
                       goal_conditioned=bool(int(fields["goal_conditioned"])),
                       action_low=unhex(fields["action_low"]),
                       action_high=unhex(fields["action_high"]),
                       norm_stats=NormStats(mean=unhex(fields["norm_mean"]),
                                            std=unhex(fields["norm_std"])))
