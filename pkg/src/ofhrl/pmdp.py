"""Pessimistic synthetic environment built from a trained world model.

Each episode draws one ensemble member and a start state from the dataset's
episode starts. Steps optionally decode latent actions through the codec,
then terminate with a reward penalty whenever ensemble disagreement exceeds
the calibrated threshold; otherwise the active member supplies the next state
(and reward, unless the environment's known sparse goal reward applies).
"""

from __future__ import annotations

import math

import numpy as np

from .cvae import LatentCodec
from .data import Dataset
from .world import WorldModel


class PmdpSession:
    """One synthetic episode stream. Single-threaded; many sessions may share
    the same immutable world/codec."""

    def __init__(self, world: WorldModel, codec: LatentCodec | None, start_states,
                 horizon: int, action_low, action_high, known_termination=None,
                 reward_fn=None, seed: int = 0, threshold_override: float | None = None):
        if world.reward_nets is None and reward_fn is None:
            raise ValueError("world has no reward nets; a reward_fn is required")
        self.world = world
        self.codec = codec
        self.use_decoder = codec is not None
        self.start_states = np.asarray(start_states, dtype=np.float64)
        if self.start_states.ndim != 2 or not len(self.start_states):
            raise ValueError("start_states must be a nonempty (n, state_dim) array")
        self.horizon = int(horizon)
        self.action_low = np.asarray(action_low, dtype=np.float64)
        self.action_high = np.asarray(action_high, dtype=np.float64)
        self.known_termination = known_termination or (lambda s: False)
        self.reward_fn = reward_fn
        self.threshold = world.threshold if threshold_override is None else threshold_override
        self.rng = np.random.default_rng(seed)

        self.active_member = 0
        self.state = None
        self.steps = 0
        self.done = True
        self.goal = None

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.active_member = int(self.rng.integers(self.world.ensemble_size))
        self.state = self.start_states[int(self.rng.integers(len(self.start_states)))].copy()
        self.steps = 0
        self.done = False
        return self.state.copy()

    def set_goal(self, goal) -> None:
        self.goal = None if goal is None else np.asarray(goal, dtype=np.float64)

    def detach_decoder(self) -> "PmdpSession":
        """Interpret subsequent actions as raw environment actions. Idempotent."""
        if self.codec is None:
            raise ValueError("no decoder attached")
        self.use_decoder = False
        return self

    def step(self, action):
        return step_many([self], [action])[0]


def step_many(sessions: list, actions) -> list:
    """Advance several sessions of the same world/codec in one batched call."""
    if not sessions:
        return []
    world = sessions[0].world
    states = np.stack([s.state for s in sessions])
    raw = np.asarray(actions, dtype=np.float64)

    if sessions[0].use_decoder:
        codec = sessions[0].codec
        goals = None
        if codec.goal_conditioned:
            goals = np.stack([s.goal for s in sessions])
        env_actions = codec.decode(states, raw, goals)
        env_actions = np.atleast_2d(env_actions)
    else:
        env_actions = np.clip(raw, sessions[0].action_low, sessions[0].action_high)

    deltas = world.deltas(states, env_actions)           # (K, B, sd)
    scores = deltas.var(axis=0).mean(axis=1)             # discrepancy per session
    members = np.array([s.active_member for s in sessions])
    next_states = states + deltas[members, np.arange(len(sessions))]

    rewards = np.empty(len(sessions))
    if world.reward_nets is not None:
        x = world.inputs(states, env_actions)
        for k in set(members.tolist()):
            rows = np.flatnonzero(members == k)
            rewards[rows] = world.reward_nets[k].forward(x[rows], cache=False)[:, 0]

    results = []
    for i, session in enumerate(sessions):
        if session.done:
            raise RuntimeError("step on a finished episode; call reset first")
        session.steps += 1
        pessimistic = bool(scores[i] > session.threshold)
        truncated = False
        if pessimistic:
            reward = -session.world.penalty
            next_state = session.state.copy()
            done = True
        else:
            next_state = next_states[i]
            if world.reward_nets is not None:
                reward = float(rewards[i])
            else:
                reward = float(session.reward_fn(next_state, session.goal))
            terminal = bool(session.known_termination(next_state))
            truncated = not terminal and session.steps >= session.horizon
            done = terminal or truncated
        session.state = next_state.copy()
        session.done = done
        results.append((next_state.copy(), reward, done,
                        {"terminated_by_pessimism": pessimistic,
                         "truncated": truncated,
                         "discrepancy": float(scores[i])}))
    return results


def make_session(world: WorldModel, codec: LatentCodec | None, dataset: Dataset, env,
                 seed: int = 0, pessimism: bool = True) -> PmdpSession:
    """Compose a session for an environment's P-MDP.

    Start states are the dataset's episode-start states when done markers
    exist, otherwise all dataset states. Disabling pessimism sets the
    termination threshold to +inf.
    """
    if dataset.dones.any():
        starts = dataset.states[dataset.episode_start_indices()]
    else:
        starts = dataset.states
    reward_fn = None
    if world.reward_nets is None:
        if not hasattr(env, "low_goal_reward"):
            raise ValueError("reward-free world needs an env with a defined goal reward")
        reward_fn = lambda state, goal: env.low_goal_reward(state, goal)
    return PmdpSession(world, codec, starts, horizon=env.spec.horizon,
                       action_low=env.spec.action_low, action_high=env.spec.action_high,
                       known_termination=env.spec.known_termination,
                       reward_fn=reward_fn, seed=seed,
                       threshold_override=None if pessimism else math.inf)
