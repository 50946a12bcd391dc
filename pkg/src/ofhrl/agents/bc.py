"""Behavior cloning: l1 regression of dataset actions on (state [, goal])."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..data import Dataset, NormStats, compute_norm_stats, split
from ..errors import FormatError, TrainingError
from ..nn import AdamState, Mlp, adam_step, l1_loss, load_mlp, save_mlp


@dataclass
class BcConfig:
    hidden: tuple = (64, 64)
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 20
    train_fraction: float = 0.9
    seed: int = 0


class BcPolicy:
    kind = "bc"
    latent = False  # clones raw environment actions

    def __init__(self, net: Mlp, norm: NormStats, state_dim: int, goal_dim: int,
                 goal_fn=None):
        self.net = net
        self.norm = norm
        self.state_dim = state_dim
        self.goal_dim = goal_dim
        self.goal_fn = goal_fn
        self._queried = None

    def begin_episode(self, state, queried_goal=None) -> None:
        self._queried = queried_goal

    def env_action(self, state, codec=None, deterministic: bool = True, rng=None):
        x = self.norm.normalize(np.asarray(state, dtype=np.float64))
        if self.goal_dim:
            goal = self.goal_fn(state, self._queried)
            x = np.concatenate([x, goal])
        return self.net.forward(x, cache=False)

    def observe_step(self, next_state) -> None:
        pass

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_mlp(self.net, directory / "policy.ofnn1")
        hexes = lambda v: ",".join(float(x).hex() for x in np.asarray(v).ravel())
        lines = [
            "kind=bc",
            f"state_dim={self.state_dim}",
            f"goal_dim={self.goal_dim}",
            f"norm_mean={hexes(self.norm.mean)}",
            f"norm_std={hexes(self.norm.std)}",
        ]
        (directory / "agent.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, directory, goal_fn=None) -> "BcPolicy":
        directory = Path(directory)
        meta = directory / "agent.txt"
        if not meta.exists():
            raise FormatError(f"{directory}: missing agent.txt", offset=0)
        fields = dict(line.split("=", 1)
                      for line in meta.read_text(encoding="utf-8").splitlines() if line)
        unhex = lambda t: np.array([float.fromhex(v) for v in t.split(",")])
        norm = NormStats(mean=unhex(fields["norm_mean"]), std=unhex(fields["norm_std"]))
        return cls(load_mlp(directory / "policy.ofnn1"), norm,
                   int(fields["state_dim"]), int(fields["goal_dim"]), goal_fn=goal_fn)


def bc_train(dataset: Dataset, config: BcConfig, goal_fn=None):
    """Supervised fit; returns (policy, per-epoch validation l1 history)."""
    if dataset.count < 2:
        raise ValueError("dataset too small for behavior cloning")
    stats = compute_norm_stats(dataset)
    train, val = split(dataset, config.train_fraction, seed=config.seed)

    def inputs(part):
        x = stats.normalize(part.states)
        if dataset.goal_dim:
            x = np.concatenate([x, part.goals], axis=1)
        return x

    x_tr, y_tr = inputs(train), train.actions
    x_va, y_va = inputs(val), val.actions
    net = Mlp([x_tr.shape[1], *config.hidden, dataset.action_dim], seed=config.seed)
    state = AdamState.for_net(net, config.learning_rate)
    rng = np.random.default_rng(config.seed + 1)

    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(x_tr))
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            out = net.forward(x_tr[idx])
            loss, grad = l1_loss(out, y_tr[idx])
            if not math.isfinite(loss):
                raise TrainingError(f"bc: non-finite loss at epoch {epoch}")
            adam_step(net, state, net.backward(grad))
        val_l1, _ = l1_loss(net.forward(x_va, cache=False), y_va)
        history.append({"epoch": epoch, "val_l1": val_l1})
    policy = BcPolicy(net, stats, dataset.state_dim, dataset.goal_dim, goal_fn=goal_fn)
    return policy, history
