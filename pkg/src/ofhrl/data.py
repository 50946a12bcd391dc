"""Offline transition datasets: container, normalization stats, splits, file IO.

On disk a dataset is the magic line ``OFHRL1``, one UTF-8 key=value header
line, then tightly packed little-endian float32 records in the order
(state, action, goal, reward, next_state, done). In memory everything is
float64; arrays are quantized through float32 at construction so write/read
round-trips are bit-exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

_MAGIC = b"OFHRL1\n"
_VERSION = 1


@dataclass
class Transition:
    """One offline sample (s, a, [g], r, s', d)."""

    state: np.ndarray
    action: np.ndarray
    goal: np.ndarray
    reward: float
    next_state: np.ndarray
    done: int


def _storage(x) -> np.ndarray:
    return np.asarray(x, dtype="<f4").astype(np.float64)


@dataclass
class Dataset:
    """Immutable-after-load collection of transitions plus provenance."""

    env_name: str
    policy_grade: str
    seed: int
    states: np.ndarray
    actions: np.ndarray
    goals: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray

    def __post_init__(self):
        self.states = _storage(self.states)
        self.actions = _storage(self.actions)
        self.goals = _storage(self.goals)
        if self.goals.ndim == 1:
            self.goals = self.goals.reshape(len(self.states), -1)
        self.rewards = _storage(self.rewards).reshape(-1)
        self.next_states = _storage(self.next_states)
        self.dones = _storage(self.dones).reshape(-1)
        n = len(self.states)
        for name in ("actions", "goals", "rewards", "next_states", "dones"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} rows, expected {n}")
        if self.next_states.shape != self.states.shape:
            raise ValueError("next_states shape must match states")
        if not np.all(np.isin(self.dones, (0.0, 1.0))):
            raise ValueError("done flags must be 0 or 1")

    @property
    def count(self) -> int:
        return len(self.states)

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    @property
    def goal_dim(self) -> int:
        return self.goals.shape[1]

    def __len__(self) -> int:
        return self.count

    def transition(self, i: int) -> Transition:
        return Transition(self.states[i], self.actions[i], self.goals[i],
                          float(self.rewards[i]), self.next_states[i], int(self.dones[i]))

    def episode_returns(self) -> np.ndarray:
        """Sum of rewards between done markers (trailing partial episode included)."""
        returns, acc, steps = [], 0.0, 0
        for r, d in zip(self.rewards, self.dones):
            acc += r
            steps += 1
            if d:
                returns.append(acc)
                acc, steps = 0.0, 0
        if steps:
            returns.append(acc)
        return np.asarray(returns)

    def episode_start_indices(self) -> np.ndarray:
        """Indices of transitions that begin an episode, per the done markers."""
        if self.count == 0:
            return np.zeros(0, dtype=np.int64)
        starts = np.flatnonzero(np.concatenate(([1.0], self.dones[:-1])))
        return starts


@dataclass
class NormStats:
    """Per-dimension mean and (floored) population std of dataset states."""

    mean: np.ndarray
    std: np.ndarray

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.std + self.mean


def compute_norm_stats(dataset: Dataset, std_floor: float = 1e-6) -> NormStats:
    if dataset.count < 2:
        raise ValueError("need at least 2 transitions to compute normalization stats")
    mean = dataset.states.mean(axis=0)
    std = dataset.states.std(axis=0)  # population std
    return NormStats(mean=mean, std=np.maximum(std, std_floor))


def split(dataset: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded shuffle split by transition; disjoint and exhaustive."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    order = rng.permutation(dataset.count)
    n_train = int(round(train_fraction * dataset.count))
    parts = []
    for idx in (order[:n_train], order[n_train:]):
        parts.append(Dataset(dataset.env_name, dataset.policy_grade, dataset.seed,
                             dataset.states[idx], dataset.actions[idx], dataset.goals[idx],
                             dataset.rewards[idx], dataset.next_states[idx], dataset.dones[idx]))
    return parts[0], parts[1]


def record_size(state_dim: int, action_dim: int, goal_dim: int) -> int:
    return 4 * (2 * state_dim + action_dim + goal_dim + 2)


def save_dataset(dataset: Dataset, path) -> None:
    header = (f"version={_VERSION} state_dim={dataset.state_dim} "
              f"action_dim={dataset.action_dim} goal_dim={dataset.goal_dim} "
              f"count={dataset.count} env={dataset.env_name} "
              f"grade={dataset.policy_grade} seed={dataset.seed}\n")
    payload = np.concatenate([
        dataset.states, dataset.actions, dataset.goals,
        dataset.rewards[:, None], dataset.next_states, dataset.dones[:, None],
    ], axis=1).astype("<f4")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(header.encode("utf-8"))
        f.write(payload.tobytes())


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise FormatError(f"{path}: bad magic, expected OFHRL1", offset=0)
    header_end = raw.index(b"\n", len(_MAGIC)) + 1
    fields = dict(item.split("=", 1)
                  for item in raw[len(_MAGIC):header_end].decode("utf-8").split())
    sd, ad, gd = int(fields["state_dim"]), int(fields["action_dim"]), int(fields["goal_dim"])
    count = int(fields["count"])
    rec = record_size(sd, ad, gd)
    payload = raw[header_end:]
    if len(payload) != count * rec:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {count * rec}",
                          offset=header_end + min(len(payload), count * rec))
    rows = np.frombuffer(payload, dtype="<f4").reshape(count, rec // 4)
    cols = np.cumsum([sd, ad, gd, 1, sd])
    return Dataset(env_name=fields["env"], policy_grade=fields["grade"], seed=int(fields["seed"]),
                   states=rows[:, :cols[0]], actions=rows[:, cols[0]:cols[1]],
                   goals=rows[:, cols[1]:cols[2]], rewards=rows[:, cols[2]],
                   next_states=rows[:, cols[3]:cols[4]], dones=rows[:, cols[4]])
