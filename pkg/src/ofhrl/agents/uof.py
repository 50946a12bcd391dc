"""Goal-conditioned hierarchical agent for the manipulation chain.

High level: a goal-conditioned Q net over the discrete set of predefined
low-level goals, trained with one-step Q-learning updated under every
high-level goal at once (the rewards are known predicates of the arrival
state), with demonstration-biased exploration that decays over training.
Low level: a deterministic goal-conditioned policy and critic (DDPG with
target networks) fed by a replay buffer with hindsight "future" relabeling
and the sparse {-1, 0} low-level reward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..data import NormStats
from ..errors import FormatError
from ..nn import AdamState, Mlp, adam_step, load_mlp, save_mlp
from .common import identity_stats

DEFAULT_DEMOS = {0: (0,), 1: (0, 1), 2: (0, 1, 2)}


@dataclass
class UofConfig:
    hidden: tuple = (64, 64)
    n_high_actions: int = 3
    gamma_high: float = 0.9
    gamma_low: float = 0.95
    lr_high: float = 1e-3
    lr_actor: float = 1e-3
    lr_critic: float = 1e-3
    polyak: float = 0.05
    her_k: int = 4               # future relabels per real transition
    buffer_transitions: int = 60_000
    batch_size: int = 128
    high_batch_size: int = 64
    low_budget: int = 10         # env steps per high-level segment
    eps_high: float = 0.2
    action_noise: float = 0.2
    eps_random: float = 0.3
    action_l2: float = 0.1       # pre-squash penalty, keeps tanh unsaturated
    demo_decay_episodes: int = 600
    episodes: int = 1500
    eval_every: int = 150        # episodes between eval rows
    latent_bound: float = 2.0
    warmup_episodes: int = 20
    seed: int = 0


class UofAgent:
    kind = "uof"

    def __init__(self, env, config: UofConfig, action_dim: int,
                 norm_stats: NormStats | None = None, latent: bool = True,
                 demos: dict | None = None, seed: int = 0):
        self.env = env
        self.state_dim = env.spec.state_dim
        self.goal_dim = env.spec.goal_dim
        self.n_high = config.n_high_actions
        self.action_dim = action_dim
        self.latent = latent
        self.norm = norm_stats or identity_stats(self.state_dim)
        self.demos = dict(DEFAULT_DEMOS if demos is None else demos)
        self.low_budget = config.low_budget

        if latent:
            self.act_center = np.zeros(action_dim)
            self.act_scale = np.full(action_dim, config.latent_bound)
        else:
            low, high = env.spec.action_low, env.spec.action_high
            self.act_center = (high + low) / 2.0
            self.act_scale = (high - low) / 2.0

        seeds = np.random.SeedSequence(seed).generate_state(3)
        acts = ["tanh"] * len(config.hidden) + ["identity"]
        self.q_high = Mlp([self.state_dim + self.n_high, *config.hidden, self.n_high],
                          acts, seed=int(seeds[0]))
        self.actor = Mlp([self.state_dim + self.goal_dim, *config.hidden, action_dim],
                         acts, seed=int(seeds[1]))
        self.critic = Mlp([self.state_dim + self.goal_dim + action_dim, *config.hidden, 1],
                          acts, seed=int(seeds[2]))
        self.actor_target = self.actor.copy()
        self.critic_target = self.critic.copy()

        self._queried = 0
        self._high_action = 0
        self._segment_steps = 0

    # --- network wrappers ------------------------------------------------------

    def high_values(self, states, goal_indices) -> np.ndarray:
        states = np.atleast_2d(states)
        onehot = np.zeros((len(states), self.n_high))
        onehot[np.arange(len(states)), goal_indices] = 1.0
        x = np.concatenate([self.norm.normalize(states), onehot], axis=1)
        return self.q_high.forward(x, cache=False)

    def low_actions(self, states, goals, net: Mlp | None = None,
                    cache: bool = False) -> np.ndarray:
        net = net or self.actor
        x = np.concatenate([self.norm.normalize(np.atleast_2d(states)),
                            np.atleast_2d(goals)], axis=1)
        return self.act_center + self.act_scale * np.tanh(net.forward(x, cache=cache))

    def critic_values(self, states, goals, actions, net: Mlp | None = None,
                      cache: bool = False) -> np.ndarray:
        net = net or self.critic
        x = np.concatenate([self.norm.normalize(np.atleast_2d(states)),
                            np.atleast_2d(goals), np.atleast_2d(actions)], axis=1)
        return net.forward(x, cache=cache)[:, 0]

    # --- evaluation protocol ----------------------------------------------------

    @property
    def active_option(self) -> int:
        return self._high_action

    def begin_episode(self, state, queried_goal=None) -> None:
        self._queried = int(queried_goal if queried_goal is not None else self.n_high - 1)
        self._high_action = int(np.argmax(self.high_values(state[None], [self._queried])[0]))
        self._segment_steps = 0

    def env_action(self, state, codec=None, deterministic: bool = True, rng=None):
        goal = self.env.low_goal_for(state, self._high_action)
        action = self.low_actions(state[None], goal[None])[0]
        if not deterministic:
            action = np.clip(action + self.act_scale * rng.normal(scale=0.1, size=self.action_dim),
                             self.act_center - self.act_scale, self.act_center + self.act_scale)
        if self.latent:
            if codec is None:
                raise ValueError("latent-mode agent needs a decoder for real actions")
            return codec.decode(state, action, goal if codec.goal_conditioned else None)
        return action

    def observe_step(self, next_state) -> None:
        self._segment_steps += 1
        goal = self.env.low_goal_for(next_state, self._high_action)
        if self.env.low_goal_achieved(next_state, goal) or self._segment_steps >= self.low_budget:
            self._high_action = int(np.argmax(
                self.high_values(next_state[None], [self._queried])[0]))
            self._segment_steps = 0

    # --- persistence --------------------------------------------------------------

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_mlp(self.q_high, directory / "q_high.ofnn1")
        save_mlp(self.actor, directory / "actor.ofnn1")
        save_mlp(self.critic, directory / "critic.ofnn1")
        hexes = lambda v: ",".join(float(x).hex() for x in np.asarray(v).ravel())
        demo_text = ";".join(f"{k}:{','.join(str(a) for a in seq)}"
                             for k, seq in sorted(self.demos.items()))
        lines = [
            "kind=uof",
            f"env={self.env.spec.name}",
            f"n_high={self.n_high}",
            f"action_dim={self.action_dim}",
            f"latent={int(self.latent)}",
            f"low_budget={self.low_budget}",
            f"demos={demo_text}",
            f"act_center={hexes(self.act_center)}",
            f"act_scale={hexes(self.act_scale)}",
            f"norm_mean={hexes(self.norm.mean)}",
            f"norm_std={hexes(self.norm.std)}",
        ]
        (directory / "agent.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, directory, env) -> "UofAgent":
        directory = Path(directory)
        meta = directory / "agent.txt"
        if not meta.exists():
            raise FormatError(f"{directory}: missing agent.txt", offset=0)
        fields = dict(line.split("=", 1)
                      for line in meta.read_text(encoding="utf-8").splitlines() if line)
        unhex = lambda t: np.array([float.fromhex(v) for v in t.split(",")])
        agent = cls.__new__(cls)
        agent.env = env
        agent.state_dim = env.spec.state_dim
        agent.goal_dim = env.spec.goal_dim
        agent.n_high = int(fields["n_high"])
        agent.action_dim = int(fields["action_dim"])
        agent.latent = bool(int(fields["latent"]))
        agent.low_budget = int(fields["low_budget"])
        agent.demos = {int(part.split(":")[0]): tuple(int(a) for a in part.split(":")[1].split(","))
                       for part in fields["demos"].split(";")}
        agent.act_center = unhex(fields["act_center"])
        agent.act_scale = unhex(fields["act_scale"])
        agent.norm = NormStats(mean=unhex(fields["norm_mean"]), std=unhex(fields["norm_std"]))
        agent.q_high = load_mlp(directory / "q_high.ofnn1")
        agent.actor = load_mlp(directory / "actor.ofnn1")
        agent.critic = load_mlp(directory / "critic.ofnn1")
        agent.actor_target = agent.actor.copy()
        agent.critic_target = agent.critic.copy()
        agent._queried = 0
        agent._high_action = 0
        agent._segment_steps = 0
        return agent


class _Replay:
    """Flat episodic replay ring supporting hindsight 'future' relabeling.

    Episodes are written contiguously (wrapping to the start rather than
    splitting), and every row remembers its episode's end row so future-goal
    sampling is a vectorized gather.
    """

    def __init__(self, capacity: int, state_dim: int, action_dim: int, goal_dim: int):
        self.capacity = capacity
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros((capacity, action_dim))
        self.goals = np.zeros((capacity, goal_dim))
        self.next_states = np.zeros((capacity, state_dim))
        self.achieved = np.zeros((capacity, goal_dim))
        self.ep_end = np.zeros(capacity, dtype=np.int64)
        self.size = 0
        self.write = 0

    def add(self, episode: dict) -> None:
        n = len(episode["states"])
        if n == 0:
            return
        if n > self.capacity:
            raise ValueError("episode longer than replay capacity")
        if self.write + n > self.capacity:
            self.write = 0
        rows = slice(self.write, self.write + n)
        self.states[rows] = episode["states"]
        self.actions[rows] = episode["actions"]
        self.goals[rows] = episode["goals"]
        self.next_states[rows] = episode["next_states"]
        self.achieved[rows] = episode["achieved"]
        self.ep_end[rows] = self.write + n
        self.write += n
        self.size = max(self.size, self.write)

    def __len__(self) -> int:
        return self.size


def goal_reward_batch(env, achieved: np.ndarray, goals: np.ndarray) -> np.ndarray:
    """Sparse {-1, 0} reward of achieved-goal summaries against goal vectors."""
    tol = env.POS_TOL
    ok = ((np.linalg.norm(achieved[:, 0:2] - goals[:, 0:2], axis=1) <= tol)
          & (np.linalg.norm(achieved[:, 2:4] - goals[:, 2:4], axis=1) <= tol)
          & (np.abs(achieved[:, 4] - goals[:, 4]) <= 0.5))
    return np.where(ok, 0.0, -1.0)


def sample_her_batch(replay: _Replay, batch_size: int, her_k: int, env, rng):
    """Sample transitions, relabeling goals with future achieved goals.

    Only the goal (and recomputed reward) differ from the stored transition;
    (state, action, next_state) come back untouched.
    """
    future_p = 1.0 - 1.0 / (1.0 + her_k)
    idx = rng.integers(replay.size, size=batch_size)
    ends = replay.ep_end[idx]
    future = idx + (rng.random(batch_size) * (ends - idx)).astype(np.int64)
    relabel = rng.random(batch_size) < future_p
    goals = replay.goals[idx].copy()
    goals[relabel] = replay.achieved[future[relabel]]
    return {
        "states": replay.states[idx].copy(),
        "actions": replay.actions[idx].copy(),
        "goals": goals,
        "next_states": replay.next_states[idx].copy(),
        "rewards": goal_reward_batch(env, replay.achieved[idx], goals),
    }


def _ddpg_update(agent: UofAgent, batch, config: UofConfig, opt):
    n = len(batch["states"])
    next_actions = agent.low_actions(batch["next_states"], batch["goals"],
                                     net=agent.actor_target)
    target_q = agent.critic_values(batch["next_states"], batch["goals"], next_actions,
                                   net=agent.critic_target)
    y = batch["rewards"] + config.gamma_low * target_q
    y = np.clip(y, -1.0 / (1.0 - config.gamma_low), 0.0)

    q = agent.critic_values(batch["states"], batch["goals"], batch["actions"], cache=True)
    d_q = ((q - y) / n)[:, None]
    critic_grad = agent.critic.backward(d_q)

    # actor ascends Q(s, g, actor(s, g))
    x_actor = np.concatenate([agent.norm.normalize(batch["states"]), batch["goals"]], axis=1)
    u = agent.actor.forward(x_actor)
    actions = agent.act_center + agent.act_scale * np.tanh(u)
    agent.critic_values(batch["states"], batch["goals"], actions, cache=True)
    ones = np.full((n, 1), -1.0 / n)  # maximize Q
    _, d_in = agent.critic.backward(ones, return_input_grad=True)
    d_actions = d_in[:, agent.state_dim + agent.goal_dim:]
    d_u = d_actions * agent.act_scale * (1.0 - np.tanh(u) ** 2)
    d_u += 2.0 * config.action_l2 * u / n
    actor_grad = agent.actor.backward(d_u)

    adam_step(agent.critic, opt["critic"], critic_grad)
    adam_step(agent.actor, opt["actor"], actor_grad)

    for net, target in ((agent.actor, agent.actor_target), (agent.critic, agent.critic_target)):
        target.params *= 1.0 - config.polyak
        target.params += config.polyak * net.params


def _high_update(agent: UofAgent, high_replay: list, config: UofConfig, opt, rng):
    """One-step Q-learning under every high-level goal for sampled decisions."""
    if not high_replay:
        return
    idx = rng.integers(len(high_replay), size=min(config.high_batch_size, len(high_replay)))
    states = np.stack([high_replay[i][0] for i in idx])
    h = np.array([high_replay[i][1] for i in idx])
    ends = np.stack([high_replay[i][2] for i in idx])
    n = len(idx)

    bits = agent.env.goal_bits(ends)                       # (n, n_high)
    next_q = np.stack([agent.high_values(ends, np.full(n, g)).max(axis=1)
                       for g in range(agent.n_high)], axis=1)
    rewards = np.where(bits > 0.5, 0.0, -1.0)
    targets = rewards + config.gamma_high * (1.0 - bits) * next_q
    targets = np.clip(targets, -1.0 / (1.0 - config.gamma_high), 0.0)

    grad = np.zeros(agent.q_high.parameter_count)
    for g in range(agent.n_high):
        onehot = np.zeros((n, agent.n_high))
        onehot[:, g] = 1.0
        x = np.concatenate([agent.norm.normalize(states), onehot], axis=1)
        q = agent.q_high.forward(x)
        d_q = np.zeros_like(q)
        rows = np.arange(n)
        d_q[rows, h] = (q[rows, h] - targets[:, g]) / (n * agent.n_high)
        grad += agent.q_high.backward(d_q)
    adam_step(agent.q_high, opt["high"], grad)


def uof_train(agent: UofAgent, runner, config: UofConfig, eval_fn=None):
    """Episode-based training against a single runner (P-MDP session or true
    env wrapper); returns (agent, curve rows with per-goal successes)."""
    for g in range(agent.n_high):
        if g not in agent.demos:
            raise ValueError(f"missing abstract demonstration for goal {g}")
    rng = np.random.default_rng(config.seed)
    opt = {
        "high": AdamState.for_net(agent.q_high, config.lr_high),
        "actor": AdamState.for_net(agent.actor, config.lr_actor),
        "critic": AdamState.for_net(agent.critic, config.lr_critic),
    }
    replay = _Replay(config.buffer_transitions, agent.state_dim, agent.action_dim,
                     agent.goal_dim)
    high_replay = []
    env = agent.env
    rows = []
    recent_returns = []

    for episode in range(config.episodes):
        queried = int(rng.integers(agent.n_high))
        p_demo = max(0.1, 1.0 - episode / max(1, config.demo_decay_episodes))
        use_demo = rng.random() < p_demo
        demo_seq = agent.demos[queried]

        state = runner.reset(int(rng.integers(2 ** 31)))
        ep = {k: [] for k in ("states", "actions", "goals", "next_states", "achieved")}
        ep_return = 0.0
        done = False
        steps = 0
        while not done:
            # demonstrations supply the first not-yet-achieved high action
            pending = [h for h in demo_seq if env.goal_bits(state)[h] < 0.5]
            if use_demo and pending:
                h = int(pending[0])
            elif rng.random() < config.eps_high:
                h = int(rng.integers(agent.n_high))
            else:
                h = int(np.argmax(agent.high_values(state[None], [queried])[0]))

            segment_start = state.copy()
            for _ in range(config.low_budget):
                goal = env.low_goal_for(state, h)
                if hasattr(runner, "set_goal"):
                    runner.set_goal(goal)
                if rng.random() < config.eps_random:
                    action = rng.uniform(agent.act_center - agent.act_scale,
                                         agent.act_center + agent.act_scale)
                else:
                    action = agent.low_actions(state[None], goal[None])[0]
                    action = np.clip(action + agent.act_scale * rng.normal(
                        scale=config.action_noise, size=agent.action_dim),
                        agent.act_center - agent.act_scale,
                        agent.act_center + agent.act_scale)
                next_state, reward, done, info = runner.step(action)
                ep["states"].append(state)
                ep["actions"].append(action)
                ep["goals"].append(goal)
                ep["next_states"].append(next_state)
                ep["achieved"].append(env.achieved_goal(next_state))
                ep_return += reward
                steps += 1
                state = next_state
                if done or env.low_goal_achieved(state, goal):
                    break
            high_replay.append((segment_start, h, state.copy()))

        replay.add({k: np.asarray(v) for k, v in ep.items()})
        recent_returns.append(ep_return)
        recent_returns = recent_returns[-40:]

        if episode >= config.warmup_episodes:
            for _ in range(steps):
                batch = sample_her_batch(replay, config.batch_size, config.her_k, env, rng)
                _ddpg_update(agent, batch, config, opt)
            _high_update(agent, high_replay, config, opt, rng)

        if eval_fn and ((episode + 1) % config.eval_every == 0
                        or episode == config.episodes - 1):
            stats = eval_fn(agent)
            rows.append({"episode": episode + 1,
                         "step": (episode + 1) * env.spec.horizon,
                         "train_return": float(np.mean(recent_returns)),
                         "eval_return": stats["return"],
                         **{f"success_{g}": stats["success"][g]
                            for g in range(agent.n_high)}})
    return agent, rows


def finiteness_check(agent: UofAgent) -> bool:
    nets = (agent.q_high, agent.actor, agent.critic, agent.actor_target, agent.critic_target)
    return all(bool(np.all(np.isfinite(net.params))) for net in nets)
