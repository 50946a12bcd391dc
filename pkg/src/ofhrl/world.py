"""Ensemble world model: residual dynamics and reward nets over normalized states.

Each member predicts the state delta (and optionally the reward) from
(normalized state, raw action). Disagreement across members -- the mean over
state dimensions of the population variance of predicted deltas -- is the
discrepancy score used by the pessimistic synthetic environment, with a
threshold calibrated on the dataset as a quantile or a fraction of the max.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, NormStats, compute_norm_stats, split
from .errors import FormatError, TrainingError
from .nn import AdamState, Mlp, adam_step, l1_loss, load_mlp, save_mlp

THRESHOLD_MODES = ("quantile", "fraction")


@dataclass
class WorldConfig:
    ensemble_size: int = 5
    hidden: tuple = (512, 512)
    learning_rate: float = 1e-4
    batch_size: int = 256
    epochs: int = 50
    train_fraction: float = 0.90
    learn_reward: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.ensemble_size < 2:
            raise ValueError("ensemble_size must be >= 2 (variance needs two members)")


@dataclass
class WorldModel:
    dynamics: list
    reward_nets: list | None
    norm_stats: NormStats
    threshold: float = math.inf
    threshold_mode: str = "quantile"
    threshold_value: float = 99.0
    penalty: float = 20.0
    validation_curves: dict = field(default_factory=dict)

    @property
    def ensemble_size(self) -> int:
        return len(self.dynamics)

    @property
    def state_dim(self) -> int:
        return self.dynamics[0].output_dim

    @property
    def action_dim(self) -> int:
        return self.dynamics[0].input_dim - self.state_dim

    def inputs(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        return np.concatenate([self.norm_stats.normalize(states), actions], axis=1)

    def deltas(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Predicted state deltas for every member, shape (K, B, state_dim)."""
        x = self.inputs(states, actions)
        return np.stack([net.forward(x, cache=False) for net in self.dynamics])

    def discrepancy_batch(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        d = self.deltas(states, actions)
        return d.var(axis=0).mean(axis=1)

    def discrepancy(self, state: np.ndarray, action: np.ndarray) -> float:
        return float(self.discrepancy_batch(state[None, :], action[None, :])[0])

    def predict_batch(self, member: int, states: np.ndarray, actions: np.ndarray):
        """Next states and rewards (None when reward nets are absent)."""
        x = self.inputs(states, actions)
        next_states = np.atleast_2d(states) + self.dynamics[member].forward(x, cache=False)
        rewards = None
        if self.reward_nets is not None:
            rewards = self.reward_nets[member].forward(x, cache=False)[:, 0]
        return next_states, rewards

    def predict(self, member: int, state: np.ndarray, action: np.ndarray):
        nxt, rew = self.predict_batch(member, state[None, :], action[None, :])
        return nxt[0], (None if rew is None else float(rew[0]))


def _train_member(x_train, y_train, x_val, y_val, hidden, lr, batch_size, epochs,
                  seed, label):
    net = Mlp([x_train.shape[1], *hidden, y_train.shape[1]], seed=seed)
    state = AdamState.for_net(net, learning_rate=lr)
    rng = np.random.default_rng(seed + 1)
    best_params, best_val = None, math.inf
    curve = []
    for epoch in range(epochs):
        order = rng.permutation(len(x_train))
        for lo in range(0, len(order), batch_size):
            idx = order[lo:lo + batch_size]
            out = net.forward(x_train[idx])
            loss, grad = l1_loss(out, y_train[idx])
            if not math.isfinite(loss):
                raise TrainingError(f"{label}: non-finite loss at epoch {epoch}")
            adam_step(net, state, net.backward(grad))
        val_loss, _ = l1_loss(net.forward(x_val, cache=False), y_val)
        curve.append(val_loss)
        if val_loss < best_val:
            best_val, best_params = val_loss, net.params.copy()
    net.params[:] = best_params
    return net, curve, best_val


def train_world(dataset: Dataset, config: WorldConfig) -> WorldModel:
    """Fit the ensemble on the offline dataset.

    Members share the train/validation split but get independent inits and
    independently shuffled batch streams so they disagree off-support.
    """
    if dataset.count < 2:
        raise ValueError("dataset too small to train a world model")
    stats = compute_norm_stats(dataset)
    train, val = split(dataset, config.train_fraction, seed=config.seed)

    def arrange(part):
        x = np.concatenate([stats.normalize(part.states), part.actions], axis=1)
        return x, part.next_states - part.states, part.rewards[:, None]

    x_tr, dyn_tr, rew_tr = arrange(train)
    x_va, dyn_va, rew_va = arrange(val)

    seeds = np.random.SeedSequence(config.seed).generate_state(2 * config.ensemble_size)
    dynamics, dyn_curves = [], []
    reward_nets, rew_curves = ([], []) if config.learn_reward else (None, [])
    for k in range(config.ensemble_size):
        net, curve, _ = _train_member(x_tr, dyn_tr, x_va, dyn_va, config.hidden,
                                      config.learning_rate, config.batch_size,
                                      config.epochs, int(seeds[k]),
                                      f"dynamics member {k}")
        dynamics.append(net)
        dyn_curves.append(curve)
        if config.learn_reward:
            net, curve, _ = _train_member(x_tr, rew_tr, x_va, rew_va, config.hidden,
                                          config.learning_rate, config.batch_size,
                                          config.epochs,
                                          int(seeds[config.ensemble_size + k]),
                                          f"reward member {k}")
            reward_nets.append(net)
            rew_curves.append(curve)

    return WorldModel(dynamics=dynamics, reward_nets=reward_nets, norm_stats=stats,
                      validation_curves={"dynamics": dyn_curves, "reward": rew_curves})


def dataset_discrepancies(world: WorldModel, dataset: Dataset,
                          batch: int = 8192) -> np.ndarray:
    values = np.empty(dataset.count)
    for lo in range(0, dataset.count, batch):
        hi = min(lo + batch, dataset.count)
        values[lo:hi] = world.discrepancy_batch(dataset.states[lo:hi], dataset.actions[lo:hi])
    return values


def calibrate_threshold(world: WorldModel, dataset: Dataset, mode: str, value: float,
                        penalty: float | None = None) -> float:
    """Set the pessimism threshold from dataset discrepancies.

    mode="quantile": value is a percentile in (0, 100]. mode="fraction":
    threshold = value * max dataset discrepancy.
    """
    if mode not in THRESHOLD_MODES:
        raise ValueError(f"unknown threshold mode {mode!r}")
    scores = dataset_discrepancies(world, dataset)
    if mode == "quantile":
        if not 0.0 < value <= 100.0:
            raise ValueError("quantile must be in (0, 100]")
        threshold = float(np.percentile(scores, value))
    else:
        if value <= 0.0:
            raise ValueError("fraction must be positive")
        threshold = float(value * scores.max())
    world.threshold = threshold
    world.threshold_mode = mode
    world.threshold_value = float(value)
    if penalty is not None:
        if penalty <= 0:
            raise ValueError("penalty must be positive")
        world.penalty = float(penalty)
    return threshold


def _hex_list(values) -> str:
    return ",".join(float(v).hex() for v in np.asarray(values, dtype=np.float64))


def _from_hex_list(text: str) -> np.ndarray:
    return np.array([float.fromhex(v) for v in text.split(",")])


def save_world(world: WorldModel, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for k, net in enumerate(world.dynamics):
        save_mlp(net, directory / f"dyn_{k}.ofnn1")
    if world.reward_nets is not None:
        for k, net in enumerate(world.reward_nets):
            save_mlp(net, directory / f"rew_{k}.ofnn1")
    lines = [
        f"ensemble_size={world.ensemble_size}",
        f"learn_reward={int(world.reward_nets is not None)}",
        f"threshold_mode={world.threshold_mode}",
        f"threshold_value={float(world.threshold_value).hex()}",
        f"threshold={float(world.threshold).hex()}",
        f"penalty={float(world.penalty).hex()}",
        f"norm_mean={_hex_list(world.norm_stats.mean)}",
        f"norm_std={_hex_list(world.norm_stats.std)}",
    ]
    (directory / "world.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_world(directory) -> WorldModel:
    directory = Path(directory)
    meta_path = directory / "world.txt"
    if not meta_path.exists():
        raise FormatError(f"{directory}: missing world.txt", offset=0)
    fields = dict(line.split("=", 1)
                  for line in meta_path.read_text(encoding="utf-8").splitlines() if line)
    k = int(fields["ensemble_size"])
    dynamics = [load_mlp(directory / f"dyn_{i}.ofnn1") for i in range(k)]
    reward_nets = None
    if int(fields["learn_reward"]):
        reward_nets = [load_mlp(directory / f"rew_{i}.ofnn1") for i in range(k)]
    stats = NormStats(mean=_from_hex_list(fields["norm_mean"]),
                      std=_from_hex_list(fields["norm_std"]))
    return WorldModel(dynamics=dynamics, reward_nets=reward_nets, norm_stats=stats,
                      threshold=float.fromhex(fields["threshold"]),
                      threshold_mode=fields["threshold_mode"],
                      threshold_value=float.fromhex(fields["threshold_value"]),
                      penalty=float.fromhex(fields["penalty"]))
