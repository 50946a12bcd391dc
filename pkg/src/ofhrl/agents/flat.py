"""Flat on-policy baseline: clipped-surrogate actor-critic with GAE.

Single Gaussian policy (state-dependent mean, learned log-std) and a separate
value net. Optionally goal-conditioned: observations are state + current
low-level goal, supplied by the runner/goal function.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..data import NormStats
from ..errors import FormatError
from ..nn import AdamState, Mlp, adam_step, adam_update, load_mlp, save_mlp
from .common import discounted_gae, gaussian_logp, identity_stats, step_runners

log = logging.getLogger(__name__)


@dataclass
class FlatConfig:
    hidden: tuple = (64, 64)
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    learning_rate: float = 9.80828e-5
    rollout_steps: int = 2048
    minibatch: int = 64
    update_epochs: int = 10
    vf_coef: float = 0.835671
    ent_coef: float = 0.00229519
    log_std_init: float = -0.5
    normalize_advantages: bool = True
    n_runners: int = 8
    total_steps: int = 120_000
    eval_every: int = 8192
    seed: int = 0


class FlatAgent:
    kind = "flat"

    def __init__(self, state_dim: int, action_dim: int, config: FlatConfig,
                 goal_dim: int = 0, goal_fn=None, norm_stats: NormStats | None = None,
                 latent: bool = True, seed: int = 0):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.goal_dim = goal_dim
        self.goal_fn = goal_fn  # (state, queried_goal) -> low-level goal vector
        self.latent = latent
        self.norm = norm_stats or identity_stats(state_dim)
        obs_dim = state_dim + goal_dim
        seeds = np.random.SeedSequence(seed).generate_state(2)
        acts = ["tanh"] * len(config.hidden) + ["identity"]
        self.policy = Mlp([obs_dim, *config.hidden, action_dim], acts, seed=int(seeds[0]))
        self.value = Mlp([obs_dim, *config.hidden, 1], acts, seed=int(seeds[1]))
        self.log_std = np.full(action_dim, config.log_std_init)
        self._queried = None

    def prep(self, obs: np.ndarray) -> np.ndarray:
        """Normalize the state slice; goals pass through raw."""
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        state = self.norm.normalize(obs[:, :self.state_dim])
        return np.concatenate([state, obs[:, self.state_dim:]], axis=1)

    def mean_actions(self, obs: np.ndarray, cache: bool = False) -> np.ndarray:
        return self.policy.forward(self.prep(obs), cache=cache)

    def values(self, obs: np.ndarray, cache: bool = False) -> np.ndarray:
        return self.value.forward(self.prep(obs), cache=cache)[:, 0]

    # --- evaluation protocol -------------------------------------------------

    def begin_episode(self, state, queried_goal=None) -> None:
        self._queried = queried_goal

    def _observe(self, state) -> np.ndarray:
        if self.goal_dim:
            goal = self.goal_fn(state, self._queried)
            return np.concatenate([state, goal])
        return np.asarray(state, dtype=np.float64)

    def env_action(self, state, codec=None, deterministic: bool = True, rng=None):
        obs = self._observe(state)
        action = self.mean_actions(obs[None])[0]
        if not deterministic:
            action = action + np.exp(self.log_std) * rng.standard_normal(self.action_dim)
        if self.latent:
            if codec is None:
                raise ValueError("latent-mode agent needs a decoder for real actions")
            goal = obs[self.state_dim:] if (codec.goal_conditioned and self.goal_dim) else None
            return codec.decode(state, action, goal)
        return action

    def observe_step(self, next_state) -> None:
        pass

    def prepare_transfer(self, seed: int) -> None:
        """Raw-action fine-tuning counterpart of the hierarchical agent's
        transfer reset: fresh action-output layer and value net."""
        from .common import reinit_output_layer
        from ..nn import Mlp

        self.latent = False
        seeds = np.random.SeedSequence(seed).generate_state(2)
        reinit_output_layer(self.policy, int(seeds[0]))
        self.value.params[:] = Mlp(self.value.layer_sizes, self.value.activations,
                                   seed=int(seeds[1])).params

    # --- persistence ----------------------------------------------------------

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_mlp(self.policy, directory / "policy.ofnn1")
        save_mlp(self.value, directory / "value.ofnn1")
        hexes = lambda v: ",".join(float(x).hex() for x in np.asarray(v).ravel())
        lines = [
            "kind=flat",
            f"state_dim={self.state_dim}",
            f"action_dim={self.action_dim}",
            f"goal_dim={self.goal_dim}",
            f"latent={int(self.latent)}",
            f"log_std={hexes(self.log_std)}",
            f"norm_mean={hexes(self.norm.mean)}",
            f"norm_std={hexes(self.norm.std)}",
        ]
        (directory / "agent.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, directory, goal_fn=None) -> "FlatAgent":
        directory = Path(directory)
        meta = directory / "agent.txt"
        if not meta.exists():
            raise FormatError(f"{directory}: missing agent.txt", offset=0)
        fields = dict(line.split("=", 1)
                      for line in meta.read_text(encoding="utf-8").splitlines() if line)
        unhex = lambda t: np.array([float.fromhex(v) for v in t.split(",")])
        agent = cls.__new__(cls)
        agent.state_dim = int(fields["state_dim"])
        agent.action_dim = int(fields["action_dim"])
        agent.goal_dim = int(fields["goal_dim"])
        agent.goal_fn = goal_fn
        agent.latent = bool(int(fields["latent"]))
        agent.norm = NormStats(mean=unhex(fields["norm_mean"]), std=unhex(fields["norm_std"]))
        agent.policy = load_mlp(directory / "policy.ofnn1")
        agent.value = load_mlp(directory / "value.ofnn1")
        agent.log_std = unhex(fields["log_std"])
        agent._queried = None
        return agent


def flat_train(agent: FlatAgent, runners: list, config: FlatConfig, eval_fn=None,
               stop_at: float | None = None):
    """PPO-style training loop; returns (agent, learning-curve rows)."""
    rng = np.random.default_rng(config.seed)
    opt = {
        "policy": AdamState.for_net(agent.policy, config.learning_rate),
        "value": AdamState.for_net(agent.value, config.learning_rate),
        "log_std": AdamState.for_size(agent.action_dim, config.learning_rate),
    }
    for runner in runners:
        runner.reset(int(rng.integers(2 ** 31)))
    ep_return = np.zeros(len(runners))
    steps_per_runner = max(1, config.rollout_steps // len(runners))
    rows, recent, steps_done, next_eval = [], [], 0, 0

    while steps_done < config.total_steps:
        buf = {k: [] for k in ("obs", "next_obs", "actions", "logp", "rewards", "dones")}
        for _ in range(steps_per_runner):
            obs = np.stack([r.state for r in runners])
            means = agent.mean_actions(obs)
            actions = means + np.exp(agent.log_std) * rng.standard_normal(means.shape)
            logp = gaussian_logp(actions, means, agent.log_std[None])
            results = step_runners(runners, actions)
            buf["obs"].append(obs)
            buf["next_obs"].append(np.stack([res[0] for res in results]))
            buf["actions"].append(actions)
            buf["logp"].append(logp)
            buf["rewards"].append(np.array([res[1] for res in results]))
            # bootstrap through time-limit truncations, cut at real terminations
            buf["dones"].append(np.array([float(res[2] and not res[3].get("truncated", False))
                                          for res in results]))
            for i, res in enumerate(results):
                ep_return[i] += res[1]
                if res[2]:
                    recent.append(ep_return[i])
                    ep_return[i] = 0.0
                    runners[i].reset(int(rng.integers(2 ** 31)))
        steps_done += steps_per_runner * len(runners)
        recent = recent[-40:]

        batch = {k: np.stack(v) for k, v in buf.items()}
        T, R = batch["rewards"].shape
        flat = lambda a: a.reshape(T * R, *a.shape[2:])
        obs, next_obs = flat(batch["obs"]), flat(batch["next_obs"])
        values = agent.values(obs)
        next_values = agent.values(next_obs)
        adv = discounted_gae(batch["rewards"].reshape(T, R), values.reshape(T, R),
                             next_values.reshape(T, R), batch["dones"].reshape(T, R),
                             config.gamma, config.lam).reshape(-1)
        returns = adv + values
        if not np.all(np.isfinite(adv)):
            log.warning("flat: non-finite advantages at step %d; skipping update", steps_done)
        else:
            if config.normalize_advantages and adv.std() > 1e-8:
                adv = (adv - adv.mean()) / adv.std()
            data = {"obs": obs, "actions": flat(batch["actions"]),
                    "logp_old": flat(batch["logp"]), "adv": adv, "returns": returns}
            _update(agent, data, config, opt, rng)

        if steps_done >= next_eval:
            next_eval += config.eval_every
            eval_return = float(eval_fn(agent)) if eval_fn else math.nan
            rows.append({"step": steps_done,
                         "train_return": float(np.mean(recent)) if recent else math.nan,
                         "eval_return": eval_return})
            if stop_at is not None and eval_fn and eval_return >= stop_at:
                break
    return agent, rows


def _update(agent: FlatAgent, data, config: FlatConfig, opt, rng):
    n = len(data["obs"])
    for _ in range(config.update_epochs):
        order = rng.permutation(n)
        for lo in range(0, n, config.minibatch):
            idx = order[lo:lo + config.minibatch]
            b = len(idx)
            obs, actions = data["obs"][idx], data["actions"][idx]
            adv, logp_old = data["adv"][idx], data["logp_old"][idx]

            means = agent.mean_actions(obs, cache=True)
            logp = gaussian_logp(actions, means, agent.log_std[None])
            ratio = np.exp(np.clip(logp - logp_old, -30.0, 30.0))
            unclipped = ratio * adv
            clipped = np.clip(ratio, 1 - config.clip, 1 + config.clip) * adv
            active = unclipped <= clipped
            dlogp = -(adv * ratio * active) / b

            inv_var = np.exp(-2.0 * agent.log_std)[None]
            diff = actions - means
            d_means = dlogp[:, None] * diff * inv_var
            pol_grad = agent.policy.backward(d_means)
            # entropy bonus: H = sum(log_std) + const per sample
            d_log_std = ((dlogp[:, None] * (diff ** 2 * inv_var - 1.0)).sum(axis=0)
                         - config.ent_coef * np.ones(agent.action_dim))

            values = agent.value.forward(agent.prep(obs), cache=True)[:, 0]
            d_v = config.vf_coef * (values - data["returns"][idx])[:, None] / b
            val_grad = agent.value.backward(d_v)

            adam_step(agent.policy, opt["policy"], pol_grad)
            adam_step(agent.value, opt["value"], val_grad)
            adam_update(agent.log_std, opt["log_std"], d_log_std)
