"""Shared agent machinery: runners, Gaussian policy math, GAE, evaluation."""

from __future__ import annotations

import numpy as np

from ..data import NormStats
from ..pmdp import PmdpSession, step_many


class EpisodeRunner:
    """Session-like wrapper around a true environment: tracks the episode
    state and step count that the pure env.step deliberately does not."""

    def __init__(self, env, seed: int = 0):
        self.env = env
        self.horizon = env.spec.horizon
        self.rng = np.random.default_rng(seed)
        self.state = None
        self.steps = 0
        self.done = True
        self.goal = None

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.state = self.env.reset(int(self.rng.integers(2 ** 31)))
        self.steps = 0
        self.done = False
        return self.state.copy()

    def set_goal(self, goal) -> None:
        self.goal = goal

    def step(self, action):
        if self.done:
            raise RuntimeError("step on a finished episode; call reset first")
        next_state, reward, terminated = self.env.step(self.state, action)
        self.steps += 1
        truncated = not bool(terminated) and self.steps >= self.horizon
        self.done = bool(terminated) or truncated
        self.state = next_state
        return next_state.copy(), float(reward), self.done, {
            "terminated_by_pessimism": False, "truncated": truncated}


def step_runners(runners: list, actions) -> list:
    """Batched step when the runners are P-MDP sessions, plain loop otherwise."""
    if isinstance(runners[0], PmdpSession):
        return step_many(runners, actions)
    return [runner.step(action) for runner, action in zip(runners, actions)]


class GoaledRunner:
    """Observation wrapper for goal-conditioned flat baselines: appends the
    current low-level goal of a queried high-level goal to the state, and
    keeps the inner session's reward goal in sync."""

    def __init__(self, inner, goal_fn, n_goals: int, queried_goal: int | None = None):
        self.inner = inner
        self.goal_fn = goal_fn
        self.n_goals = n_goals
        self.fixed_goal = queried_goal
        self.queried = queried_goal if queried_goal is not None else 0
        self.horizon = inner.horizon
        self._goal = None

    @property
    def state(self) -> np.ndarray:
        return np.concatenate([self.inner.state, self._goal])

    @property
    def done(self) -> bool:
        return self.inner.done

    def _sync(self, state) -> None:
        self._goal = self.goal_fn(state, self.queried)
        if hasattr(self.inner, "set_goal"):
            self.inner.set_goal(self._goal)

    def reset(self, seed: int | None = None) -> np.ndarray:
        inner_state = self.inner.reset(seed)
        if self.fixed_goal is None:
            self.queried = int(self.inner.rng.integers(self.n_goals))
        self._sync(inner_state)
        return self.state

    def step(self, action):
        next_state, reward, done, info = self.inner.step(action)
        self._sync(next_state)
        return self.state, reward, done, info


def identity_stats(dim: int) -> NormStats:
    return NormStats(mean=np.zeros(dim), std=np.ones(dim))


def reinit_output_layer(net, seed: int) -> None:
    """Replace a net's final layer with a fresh draw, keeping earlier layers."""
    from ..nn import Mlp

    fresh = Mlp(net.layer_sizes, net.activations, seed=seed)
    last = net.n_layers - 1
    net.weights(last)[:] = fresh.weights(last)
    net.biases(last)[:] = fresh.biases(last)


def gaussian_logp(actions, means, log_stds) -> np.ndarray:
    """Row-wise diagonal Gaussian log density; broadcasting over option axes ok."""
    inv_var = np.exp(-2.0 * log_stds)
    quad = ((actions - means) ** 2) * inv_var
    return -0.5 * (quad + 2.0 * log_stds + np.log(2.0 * np.pi)).sum(axis=-1)


def discounted_gae(rewards, values, next_values, dones, gamma: float, lam: float):
    """Generalized advantage estimates over one time-ordered stream.

    ``dones`` cuts bootstrapping; arrays are 1-D of equal length.
    """
    deltas = rewards + gamma * next_values * (1.0 - dones) - values
    advantages = np.zeros_like(deltas)
    acc = 0.0
    for t in range(len(deltas) - 1, -1, -1):
        acc = deltas[t] + gamma * lam * (1.0 - dones[t]) * acc
        advantages[t] = acc
    return advantages


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))


def evaluate(agent, env, episodes: int, seed: int, codec=None, queried_goal=None):
    """Deterministic-policy evaluation in the true environment.

    Returns a dict with per-episode returns, per-goal success flags (when the
    env exposes goal bits) and per-timestep active-option traces (when the
    agent reports one). Latent agents are decoded through ``codec``.
    """
    reset_seeds = np.random.SeedSequence(seed).generate_state(episodes)
    horizon = env.spec.horizon
    returns = np.zeros(episodes)
    has_bits = hasattr(env, "goal_bits")
    successes = np.zeros((episodes, getattr(env, "N_GOALS", 0)))
    traces = -np.ones((episodes, horizon), dtype=np.int64)

    for ep in range(episodes):
        state = env.reset(int(reset_seeds[ep]))
        agent.begin_episode(state, queried_goal=queried_goal)
        total = 0.0
        for t in range(horizon):
            action = agent.env_action(state, codec=codec, deterministic=True)
            option = getattr(agent, "active_option", None)
            if option is not None:
                traces[ep, t] = option
            state, reward, terminated = env.step(state, action)
            total += reward
            agent.observe_step(state)
            if terminated:
                break
        returns[ep] = total
        if has_bits:
            successes[ep] = env.goal_bits(state)
    result = {"returns": returns}
    if has_bits:
        result["successes"] = successes
    if np.any(traces >= 0):
        result["option_traces"] = traces
    return result
