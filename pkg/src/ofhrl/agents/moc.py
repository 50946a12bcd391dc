"""Option-critic learner with multi-option updates.

A shared tanh trunk feeds four heads: per-option Gaussian policy means (with
a free learned log-std per option), termination probabilities, the high-level
option distribution, and option values Q(s, w). Intra-option policies train
with a clipped surrogate on GAE advantages; every option's head receives the
update, weighted by (1 - eta) * executing + eta * high-level probability, so
eta = 0 recovers plain option-critic updates of the executing option only.
Terminations descend the advantage of continuing; Q regresses on lambda
returns; the high-level head gets clipped policy-gradient updates at option
switch points.
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
from .common import (discounted_gae, gaussian_logp, identity_stats, sigmoid,
                     softmax, step_runners)

log = logging.getLogger(__name__)


@dataclass
class MocConfig:
    n_options: int = 4
    hidden: tuple = (64, 64)
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    eta: float = 0.7
    lr_policy: float = 1e-4
    lr_termination: float = 1e-4
    lr_critic: float = 1e-4
    rollout_steps: int = 2048
    minibatch: int = 64
    update_epochs: int = 10
    term_offset: float = 0.01
    hi_entropy_coef: float = 0.01
    pi_entropy_coef: float = 0.00229519  # matches the flat baseline's bonus
    log_std_init: float = -0.5
    normalize_advantages: bool = True
    n_runners: int = 8
    total_steps: int = 120_000
    eval_every: int = 8192
    seed: int = 0

    def __post_init__(self):
        if self.n_options < 2:
            raise ValueError("need at least two options")


class OptionSet:
    """Model container plus the deterministic evaluation policy."""

    kind = "moc"

    def __init__(self, state_dim: int, action_dim: int, config: MocConfig,
                 norm_stats: NormStats | None = None, latent: bool = True,
                 seed: int = 0):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.n_options = config.n_options
        self.latent = latent
        self.norm = norm_stats or identity_stats(state_dim)
        h = config.hidden[-1]
        seeds = np.random.SeedSequence(seed).generate_state(5)
        self.trunk = Mlp([state_dim, *config.hidden],
                         activations=["tanh"] * len(config.hidden), seed=int(seeds[0]))
        self.pi_head = Mlp([h, self.n_options * action_dim], seed=int(seeds[1]))
        self.term_head = Mlp([h, self.n_options], seed=int(seeds[2]))
        self.hi_head = Mlp([h, self.n_options], seed=int(seeds[3]))
        self.q_head = Mlp([h, self.n_options], seed=int(seeds[4]))
        self.log_std = np.full((self.n_options, action_dim), config.log_std_init)

        self._option = 0

    def heads(self, states: np.ndarray, cache: bool = False) -> dict:
        feat = self.trunk.forward(self.norm.normalize(np.atleast_2d(states)), cache=cache)
        means = self.pi_head.forward(feat, cache=cache)
        hi_logits = self.hi_head.forward(feat, cache=cache)
        return {
            "feat": feat,
            "means": means.reshape(len(feat), self.n_options, self.action_dim),
            "hi_probs": softmax(hi_logits),
            "betas": sigmoid(self.term_head.forward(feat, cache=cache)),
            "q": self.q_head.forward(feat, cache=cache),
        }

    # --- evaluation protocol -------------------------------------------------

    @property
    def active_option(self) -> int:
        return self._option

    def begin_episode(self, state, queried_goal=None) -> None:
        out = self.heads(state)
        self._option = int(np.argmax(out["hi_probs"][0]))

    def env_action(self, state, codec=None, deterministic: bool = True, rng=None):
        out = self.heads(state)
        action = out["means"][0, self._option].copy()
        if not deterministic:
            action += np.exp(self.log_std[self._option]) * rng.standard_normal(self.action_dim)
        if self.latent:
            if codec is None:
                raise ValueError("latent-mode agent needs a decoder for real actions")
            return codec.decode(state, action)
        return action

    def observe_step(self, next_state) -> None:
        out = self.heads(next_state)
        if out["betas"][0, self._option] > 0.5:
            self._option = int(np.argmax(out["hi_probs"][0]))

    def prepare_transfer(self, seed: int) -> None:
        """Switch to raw actions for online fine-tuning on a new task.

        The latent-calibrated action outputs and the old task's value /
        termination / option-selection heads are re-initialized; the shared
        trunk (and each option's identity) is retained.
        """
        from .common import reinit_output_layer
        from ..nn import Mlp

        self.latent = False
        seeds = np.random.SeedSequence(seed).generate_state(4)
        reinit_output_layer(self.pi_head, int(seeds[0]))
        for name, s in (("hi_head", seeds[1]), ("term_head", seeds[2]), ("q_head", seeds[3])):
            net = getattr(self, name)
            net.params[:] = Mlp(net.layer_sizes, net.activations, seed=int(s)).params

    # --- persistence ----------------------------------------------------------

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name in ("trunk", "pi_head", "term_head", "hi_head", "q_head"):
            save_mlp(getattr(self, name), directory / f"{name}.ofnn1")
        hexes = lambda v: ",".join(float(x).hex() for x in np.asarray(v).ravel())
        lines = [
            "kind=moc",
            f"n_options={self.n_options}",
            f"state_dim={self.state_dim}",
            f"action_dim={self.action_dim}",
            f"latent={int(self.latent)}",
            f"log_std={hexes(self.log_std)}",
            f"norm_mean={hexes(self.norm.mean)}",
            f"norm_std={hexes(self.norm.std)}",
        ]
        (directory / "agent.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, directory) -> "OptionSet":
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
        agent.n_options = int(fields["n_options"])
        agent.latent = bool(int(fields["latent"]))
        agent.norm = NormStats(mean=unhex(fields["norm_mean"]), std=unhex(fields["norm_std"]))
        for name in ("trunk", "pi_head", "term_head", "hi_head", "q_head"):
            setattr(agent, name, load_mlp(directory / f"{name}.ofnn1"))
        agent.log_std = unhex(fields["log_std"]).reshape(agent.n_options, agent.action_dim)
        agent._option = 0
        return agent


def _collect(agent: OptionSet, runners, steps_per_runner: int, rng, current):
    """Roll the stochastic hierarchical policy; returns batch dict and stats."""
    n = len(runners)
    buf = {k: [] for k in ("states", "next_states", "options", "actions", "logp_all",
                           "hi_old", "switch", "rewards", "dones")}
    finished_returns = []
    for _ in range(steps_per_runner):
        states = np.stack([r.state for r in runners])
        out = agent.heads(states)
        switch = np.zeros(n, dtype=bool)
        for i in range(n):
            if current["fresh"][i]:
                current["option"][i] = rng.choice(agent.n_options, p=out["hi_probs"][i])
                current["fresh"][i] = False
                switch[i] = True
            elif rng.random() < out["betas"][i, current["option"][i]]:
                current["option"][i] = rng.choice(agent.n_options, p=out["hi_probs"][i])
                switch[i] = True
        options = current["option"].copy()
        means = out["means"][np.arange(n), options]
        stds = np.exp(agent.log_std[options])
        actions = means + stds * rng.standard_normal((n, agent.action_dim))
        logp_all = gaussian_logp(actions[:, None, :], out["means"], agent.log_std[None])

        results = step_runners(runners, actions)
        buf["states"].append(states)
        buf["next_states"].append(np.stack([res[0] for res in results]))
        buf["options"].append(options)
        buf["actions"].append(actions)
        buf["logp_all"].append(logp_all)
        buf["hi_old"].append(out["hi_probs"])
        buf["switch"].append(switch)
        buf["rewards"].append(np.array([res[1] for res in results]))
        # bootstrap through time-limit truncations, cut at real terminations
        buf["dones"].append(np.array([float(res[2] and not res[3].get("truncated", False))
                                      for res in results]))

        for i, res in enumerate(results):
            current["return"][i] += res[1]
            if res[2]:
                finished_returns.append(current["return"][i])
                current["return"][i] = 0.0
                runners[i].reset(int(rng.integers(2 ** 31)))
                current["fresh"][i] = True
    batch = {k: np.stack(v) for k, v in buf.items()}  # time-major (T, R, ...)
    return batch, finished_returns


def _process_batch(agent: OptionSet, batch, config: MocConfig):
    """Advantages, lambda returns and frozen old values for the update."""
    T, R = batch["rewards"].shape
    flat = lambda a: a.reshape(T * R, *a.shape[2:])
    states, next_states = flat(batch["states"]), flat(batch["next_states"])
    options = flat(batch["options"])

    out_s = agent.heads(states)
    out_sp = agent.heads(next_states)
    rows = np.arange(T * R)
    q_sw = out_s["q"][rows, options]
    v_s = (out_s["hi_probs"] * out_s["q"]).sum(axis=1)
    v_sp = (out_sp["hi_probs"] * out_sp["q"]).sum(axis=1)
    u_sp = ((1.0 - out_sp["betas"][rows, options]) * out_sp["q"][rows, options]
            + out_sp["betas"][rows, options] * v_sp)

    adv_q = discounted_gae(batch["rewards"].reshape(T, R),
                           q_sw.reshape(T, R), u_sp.reshape(T, R),
                           batch["dones"].reshape(T, R), config.gamma, config.lam)
    returns = adv_q.reshape(T * R) + q_sw

    # policy advantages chain through V rather than per-option Q/U estimates,
    # which keeps intra-option gradients clean across option switches
    pi_adv = discounted_gae(batch["rewards"].reshape(T, R),
                            v_s.reshape(T, R), v_sp.reshape(T, R),
                            batch["dones"].reshape(T, R), config.gamma, config.lam)
    pi_adv = pi_adv.reshape(T * R)
    if config.normalize_advantages and pi_adv.std() > 1e-8:
        pi_adv = (pi_adv - pi_adv.mean()) / pi_adv.std()

    return {
        "states": states, "next_states": next_states, "options": options,
        "actions": flat(batch["actions"]), "logp_all_old": flat(batch["logp_all"]),
        "hi_old": flat(batch["hi_old"]), "switch": flat(batch["switch"]),
        "advantages": pi_adv, "returns": returns,
        "adv_hi": q_sw - v_s,
        "adv_term": out_sp["q"][rows, options] - v_sp + config.term_offset,
    }


def _policy_grads(agent: OptionSet, mb, means, config: MocConfig):
    """Clipped-surrogate gradients for every option's policy head.

    Returns (d_mean_outputs (b, N*ad), d_log_std (N, ad)). Off-executing
    options are weighted by eta * high-level probability.
    """
    b = len(mb["options"])
    rows = np.arange(b)
    logp_new = gaussian_logp(mb["actions"][:, None, :], means, agent.log_std[None])
    ratios = np.exp(np.clip(logp_new - mb["logp_all_old"], -30.0, 30.0))
    adv = mb["advantages"][:, None]
    onehot = np.zeros((b, agent.n_options))
    onehot[rows, mb["options"]] = 1.0
    weights = (1.0 - config.eta) * onehot + config.eta * mb["hi_old"]

    unclipped = ratios * adv
    clipped = np.clip(ratios, 1.0 - config.clip, 1.0 + config.clip) * adv
    active = unclipped <= clipped  # min() selects the ratio branch
    dlogp = -(weights * adv * ratios * active) / b  # d(-objective)/d logp_new

    diff = mb["actions"][:, None, :] - means
    inv_var = np.exp(-2.0 * agent.log_std)[None]
    d_means = dlogp[:, :, None] * diff * inv_var
    d_log_std = (dlogp[:, :, None] * (diff ** 2 * inv_var - 1.0)).sum(axis=0)
    if config.pi_entropy_coef:
        d_log_std -= config.pi_entropy_coef * np.ones_like(d_log_std)
    return d_means.reshape(b, -1), d_log_std


def _update(agent: OptionSet, processed, config: MocConfig, opt, rng):
    n = len(processed["states"])
    for _ in range(config.update_epochs):
        order = rng.permutation(n)
        for lo in range(0, n, config.minibatch):
            idx = order[lo:lo + config.minibatch]
            mb = {k: v[idx] for k, v in processed.items()}
            b = len(idx)
            rows = np.arange(b)

            feat = agent.trunk.forward(agent.norm.normalize(mb["states"]))
            means = agent.pi_head.forward(feat).reshape(b, agent.n_options, agent.action_dim)
            hi_logits = agent.hi_head.forward(feat)
            hi_probs = softmax(hi_logits)
            q = agent.q_head.forward(feat)

            d_mean_out, d_log_std = _policy_grads(agent, mb, means, config)
            pi_grad, d_feat = agent.pi_head.backward(d_mean_out, return_input_grad=True)

            # high-level: clipped PG at switch points + entropy everywhere
            d_hi = np.zeros_like(hi_logits)
            switch_rows = np.flatnonzero(mb["switch"])
            if len(switch_rows):
                w = mb["options"][switch_rows]
                ratio = hi_probs[switch_rows, w] / np.maximum(mb["hi_old"][switch_rows, w], 1e-12)
                adv_hi = mb["adv_hi"][switch_rows]
                active = (ratio * adv_hi) <= (np.clip(ratio, 1 - config.clip, 1 + config.clip) * adv_hi)
                coeff = -(adv_hi * ratio * active) / len(switch_rows)
                onehot = np.zeros((len(switch_rows), agent.n_options))
                onehot[np.arange(len(switch_rows)), w] = 1.0
                d_hi[switch_rows] += coeff[:, None] * (onehot - hi_probs[switch_rows])
            if config.hi_entropy_coef:
                log_p = np.log(np.maximum(hi_probs, 1e-12))
                entropy = -(hi_probs * log_p).sum(axis=1, keepdims=True)
                d_hi += config.hi_entropy_coef * hi_probs * (log_p + entropy) / b
            hi_grad, g = agent.hi_head.backward(d_hi, return_input_grad=True)
            d_feat += g

            # critic: 0.5 * (q(s,w) - G)^2
            d_q = np.zeros_like(q)
            d_q[rows, mb["options"]] = (q[rows, mb["options"]] - mb["returns"]) / b
            q_grad, g = agent.q_head.backward(d_q, return_input_grad=True)
            d_feat += g

            trunk_grad = agent.trunk.backward(d_feat)

            # termination head is driven by the arrival states
            feat_sp = agent.trunk.forward(agent.norm.normalize(mb["next_states"]))
            term_logits = agent.term_head.forward(feat_sp)
            betas = sigmoid(term_logits)
            d_term = np.zeros_like(term_logits)
            d_term[rows, mb["options"]] = (mb["adv_term"] * betas[rows, mb["options"]]
                                           * (1.0 - betas[rows, mb["options"]])) / b
            term_grad, d_feat_sp = agent.term_head.backward(d_term, return_input_grad=True)
            trunk_grad += agent.trunk.backward(d_feat_sp)

            adam_step(agent.pi_head, opt["pi"], pi_grad)
            adam_step(agent.hi_head, opt["hi"], hi_grad)
            adam_step(agent.q_head, opt["q"], q_grad)
            adam_step(agent.term_head, opt["term"], term_grad)
            adam_step(agent.trunk, opt["trunk"], trunk_grad)
            adam_update(agent.log_std.reshape(-1), opt["log_std"], d_log_std.reshape(-1))


def moc_train(agent: OptionSet, runners: list, config: MocConfig, eval_fn=None,
              stop_at: float | None = None):
    """On-policy option-critic training against runners (P-MDP sessions or
    true-env wrappers). Returns (agent, learning-curve rows)."""
    rng = np.random.default_rng(config.seed)
    opt = {
        "trunk": AdamState.for_net(agent.trunk, config.lr_policy),
        "pi": AdamState.for_net(agent.pi_head, config.lr_policy),
        "hi": AdamState.for_net(agent.hi_head, config.lr_policy),
        "q": AdamState.for_net(agent.q_head, config.lr_critic),
        "term": AdamState.for_net(agent.term_head, config.lr_termination),
        "log_std": AdamState.for_size(agent.log_std.size, config.lr_policy),
    }
    for i, runner in enumerate(runners):
        runner.reset(int(rng.integers(2 ** 31)))
    current = {"option": np.zeros(len(runners), dtype=np.int64),
               "fresh": np.ones(len(runners), dtype=bool),
               "return": np.zeros(len(runners))}

    steps_per_runner = max(1, config.rollout_steps // len(runners))
    rows = []
    steps_done = 0
    next_eval = 0
    recent_returns = []
    while steps_done < config.total_steps:
        batch, finished = _collect(agent, runners, steps_per_runner, rng, current)
        steps_done += steps_per_runner * len(runners)
        recent_returns.extend(finished)
        recent_returns = recent_returns[-40:]

        processed = _process_batch(agent, batch, config)
        if not np.all(np.isfinite(processed["advantages"])):
            log.warning("moc: non-finite advantages at step %d; skipping update", steps_done)
        else:
            _update(agent, processed, config, opt, rng)

        if steps_done >= next_eval:
            next_eval += config.eval_every
            eval_return = float(eval_fn(agent)) if eval_fn else math.nan
            rows.append({"step": steps_done,
                         "train_return": float(np.mean(recent_returns)) if recent_returns else math.nan,
                         "eval_return": eval_return})
            if stop_at is not None and eval_fn and eval_return >= stop_at:
                break
    return agent, rows
