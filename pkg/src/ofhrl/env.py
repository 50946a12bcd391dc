"""Two desk-scale ground-truth environments and scripted offline collectors.

`CorridorRunner` is a 2-D thruster rewarded for velocity along the corridor
(forward or backward task) that terminates when it drifts too far sideways.
`GripperChain` is a pick-place-return chain with three ordered goals and
sparse {-1, 0} rewards. Both are deterministic given (state, action); all
randomness lives in resets and in the scripted behavior policies.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import Dataset


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    goal_dim: int
    horizon: int
    action_low: np.ndarray
    action_high: np.ndarray
    known_termination: Callable[[np.ndarray], bool]


class CorridorRunner:
    """Velocity-reward locomotion analog.

    State (x, y, vx, vy); thrust action in [-1, 1]^2. Per axis:
    v' = clamp(v + 0.1 a, +-1), pos' = pos + 0.05 v'. Reward is vx' for the
    forward task, -vx' for backward. Unhealthy (terminal) when |y| > 1.
    """

    TASKS = ("forward", "backward")

    def __init__(self, task: str = "forward"):
        if task not in self.TASKS:
            raise ValueError(f"unknown task {task!r}")
        self.task = task
        self.spec = EnvSpec(name=f"corridor-{task}", state_dim=4, action_dim=2, goal_dim=0,
                            horizon=200,
                            action_low=np.array([-1.0, -1.0]),
                            action_high=np.array([1.0, 1.0]),
                            known_termination=self.known_termination)

    @staticmethod
    def known_termination(state: np.ndarray) -> bool:
        return bool(abs(state[1]) > 1.0)

    def reset(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        state = np.zeros(4)
        state[:2] = rng.uniform(-0.05, 0.05, size=2)
        return state

    def step(self, state: np.ndarray, action: np.ndarray):
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        v = np.clip(state[2:4] + 0.1 * a, -1.0, 1.0)
        pos = state[0:2] + 0.05 * v
        next_state = np.concatenate([pos, v])
        reward = v[0] if self.task == "forward" else -v[0]
        return next_state, float(reward), self.known_termination(next_state)


class GripperChain:
    """Pick-place-return manipulation analog with three chained goals.

    State: gripper p, block b1, block b2 (all in [0, 1]^2), grasp flag, and
    three sticky goal-achieved indicators. Action: (dp in [-0.1, 0.1]^2,
    grip in [-1, 1]). Goals: (0) grasp b1, (1) place b1 on b2 and release,
    (2) return the gripper home; each requires the previous. Reward for the
    queried goal is 0 once its indicator is set, -1 before.
    """

    HOME = np.array([0.5, 0.15])
    POS_TOL = 0.05
    N_GOALS = 3

    def __init__(self, queried_goal: int = 2):
        if not 0 <= queried_goal < self.N_GOALS:
            raise ValueError("queried_goal must be 0, 1 or 2")
        self.queried_goal = queried_goal
        self.spec = EnvSpec(name="gripper-chain", state_dim=10, action_dim=3, goal_dim=5,
                            horizon=25,
                            action_low=np.array([-0.1, -0.1, -1.0]),
                            action_high=np.array([0.1, 0.1, 1.0]),
                            known_termination=self.known_termination)

    @staticmethod
    def known_termination(state: np.ndarray) -> bool:
        return False  # episodes end on the horizon only

    def reset(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        state = np.zeros(10)
        state[0:2] = self.HOME
        state[2] = rng.uniform(0.20, 0.35)   # b1 region, disjoint from b2's
        state[3] = rng.uniform(0.45, 0.60)
        state[4] = rng.uniform(0.65, 0.80)
        state[5] = rng.uniform(0.45, 0.60)
        return state

    def step(self, state: np.ndarray, action: np.ndarray):
        a = np.clip(np.asarray(action, dtype=np.float64),
                    self.spec.action_low, self.spec.action_high)
        p = np.clip(state[0:2] + a[0:2], 0.0, 1.0)
        b1, b2 = state[2:4].copy(), state[4:6]
        grasp = state[6] > 0.5
        grip = a[2]

        if grip < 0.0:
            grasp = False
        elif not grasp and grip > 0.0 and np.linalg.norm(p - b1) <= self.POS_TOL:
            grasp = True
        if grasp:
            b1 = p.copy()  # block rides with the gripper

        bits = state[7:10] > 0.5
        g0 = bits[0] or grasp
        g1 = bits[1] or (g0 and not grasp and np.linalg.norm(b1 - b2) <= self.POS_TOL)
        g2 = bits[2] or (g1 and np.linalg.norm(p - self.HOME) <= self.POS_TOL)

        next_state = np.concatenate([p, b1, b2, [float(grasp), float(g0), float(g1), float(g2)]])
        reward = 0.0 if (g0, g1, g2)[self.queried_goal] else -1.0
        return next_state, reward, False

    # --- goal machinery (pure functions of state, usable on synthetic states) ---

    @staticmethod
    def goal_bits(state: np.ndarray) -> np.ndarray:
        return (state[..., 7:10] > 0.5).astype(np.float64)

    @staticmethod
    def achieved_goal(state: np.ndarray) -> np.ndarray:
        """(gripper position, block-1 position, grasp flag) summary of a state."""
        return np.concatenate([state[..., 0:2], state[..., 2:4],
                               (state[..., 6:7] > 0.5).astype(np.float64)], axis=-1)

    def low_goal_for(self, state: np.ndarray, k: int) -> np.ndarray:
        """The k-th predefined low-level goal as a function of the current state."""
        b1, b2 = state[2:4], state[4:6]
        if k == 0:
            return np.concatenate([b1, b1, [1.0]])
        if k == 1:
            return np.concatenate([b2, b2, [0.0]])
        if k == 2:
            return np.concatenate([self.HOME, b2, [0.0]])
        raise ValueError(f"no low-level goal {k}")

    def low_goal_achieved(self, state: np.ndarray, goal: np.ndarray) -> bool:
        ach = self.achieved_goal(state)
        return (np.linalg.norm(ach[0:2] - goal[0:2]) <= self.POS_TOL
                and np.linalg.norm(ach[2:4] - goal[2:4]) <= self.POS_TOL
                and abs(ach[4] - goal[4]) <= 0.5)

    def low_goal_reward(self, state: np.ndarray, goal: np.ndarray) -> float:
        return 0.0 if self.low_goal_achieved(state, goal) else -1.0

    def high_goal_reward(self, state: np.ndarray, k: int) -> float:
        return 0.0 if self.goal_bits(state)[k] else -1.0


def make_env(name: str):
    if name == "corridor-forward":
        return CorridorRunner("forward")
    if name == "corridor-backward":
        return CorridorRunner("backward")
    if name == "gripper-chain":
        return GripperChain()
    raise ValueError(f"unknown environment {name!r}; "
                     "expected corridor-forward, corridor-backward or gripper-chain")


# --------------------------------------------------------------------------
# Scripted behavior policies and dataset generation
# --------------------------------------------------------------------------

def _corridor_controller(state, v_target, kp, sigma, rng):
    raw = np.array([kp * (v_target - state[2]), -kp * state[3] - 1.0 * state[1]])
    return np.clip(raw + rng.normal(scale=sigma, size=2), -1.0, 1.0)


class _GripperController:
    """Phase machine over the three low-level goals, with optional abort
    after the first goal (emulating a partially trained collector)."""

    def __init__(self, env: GripperChain, final_goal: int, abort_after_first: bool, sigma: float):
        self.env = env
        self.final_goal = final_goal
        self.abort = abort_after_first
        self.sigma = sigma

    def current_goal_index(self, state) -> int:
        bits = self.env.goal_bits(state)
        if not bits[0]:
            return 0
        if self.abort or self.final_goal == 0:
            return 0
        if not bits[1]:
            return 1
        return 2 if self.final_goal >= 2 else 1

    def act(self, state, rng):
        k = self.current_goal_index(state)
        bits = self.env.goal_bits(state)
        p = state[0:2]
        goal = self.env.low_goal_for(state, k)
        done_with_plan = (self.abort and bits[0]) or bits[self.final_goal]

        if done_with_plan:
            dp = np.zeros(2)
            grip = 1.0 if (self.abort and not bits[1]) else -1.0
        else:
            dp = np.clip(goal[0:2] - p, -0.1, 0.1)
            if k == 0:
                grip = 1.0 if np.linalg.norm(p - state[2:4]) <= 0.12 else -1.0
            elif k == 1:
                grip = -1.0 if np.linalg.norm(p - state[4:6]) <= 0.04 else 1.0
            else:
                grip = -1.0
        action = np.concatenate([dp, [grip]])
        action += rng.normal(scale=self.sigma, size=3)
        return np.clip(action, self.env.spec.action_low, self.env.spec.action_high), k


GRADES = ("medium", "expert", "medium_expert")


def behavior_rollout(env, policy_grade: str, n_transitions: int, seed: int) -> Dataset:
    """Manufacture an offline dataset with the scripted policy of the given grade."""
    if policy_grade not in GRADES:
        raise ValueError(f"unknown policy grade {policy_grade!r}")
    if n_transitions <= 0:
        raise ValueError("n_transitions must be positive")
    rng = np.random.default_rng(seed)
    is_corridor = isinstance(env, CorridorRunner)

    states, actions, goals, rewards, next_states, dones = [], [], [], [], [], []
    while len(states) < n_transitions:
        if policy_grade == "medium_expert":
            episode_grade = "medium" if rng.random() < 0.5 else "expert"
        else:
            episode_grade = policy_grade

        if is_corridor:
            sign = 1.0 if env.task == "forward" else -1.0
            v_target, kp, sigma = {"medium": (0.5, 1.0, 0.3),
                                   "expert": (1.0, 2.0, 0.1)}[episode_grade]
            params = (sign * v_target, kp, sigma)
        else:
            abort = episode_grade == "medium" and rng.random() < 0.5
            sigma = 0.05 if episode_grade == "medium" else 0.01
            controller = _GripperController(env, final_goal=2, abort_after_first=abort,
                                            sigma=sigma)

        state = env.reset(int(rng.integers(2 ** 31)))
        for _ in range(env.spec.horizon):
            if is_corridor:
                action = _corridor_controller(state, *params, rng)
                goal = np.zeros(0)
            else:
                action, k = controller.act(state, rng)
                goal = env.low_goal_for(state, k)
            next_state, reward, terminated = env.step(state, action)
            if not is_corridor:
                reward = env.low_goal_reward(next_state, goal)

            states.append(state)
            actions.append(action)
            goals.append(goal)
            rewards.append(reward)
            next_states.append(next_state)
            dones.append(0.0)
            state = next_state
            if terminated or len(states) >= n_transitions:
                break
        dones[-1] = 1.0  # episode boundary marker (termination or horizon)

    return Dataset(env_name=env.spec.name, policy_grade=policy_grade, seed=seed,
                   states=np.array(states), actions=np.array(actions), goals=np.array(goals),
                   rewards=np.array(rewards), next_states=np.array(next_states),
                   dones=np.array(dones))
