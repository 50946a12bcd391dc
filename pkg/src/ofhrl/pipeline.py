"""End-to-end orchestration: run configs, the six pipeline commands, CSV logs.

Every command serializes its RunConfig and a manifest of input-checkpoint
hashes next to its outputs, and all randomness flows from the config seed, so
re-running a config reproduces outputs bit for bit. Reported returns always
come from the true environment; synthetic-environment returns are logged in a
separate column.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .agents.bc import BcConfig, BcPolicy, bc_train
from .agents.common import EpisodeRunner, GoaledRunner, evaluate
from .agents.flat import FlatAgent, FlatConfig, flat_train
from .agents.moc import MocConfig, OptionSet, moc_train
from .agents.uof import UofAgent, UofConfig, uof_train
from .cvae import CvaeConfig, load_codec, save_codec, train_cvae
from .data import load_dataset, save_dataset
from .env import GRADES, GripperChain, behavior_rollout, make_env
from .errors import OfhrlError
from .pmdp import make_session
from .world import (WorldConfig, calibrate_threshold, load_world, save_world,
                    train_world)

# mean returns of scripted random/expert policies over 30 seeded episodes,
# used for normalized scores: 100 * (score - random) / (expert - random)
REFERENCE_RETURNS = {
    "corridor-forward": (-7.208, 194.5),
    "corridor-backward": (7.208, 194.5),
    "gripper-chain": (-25.0, -12.533),
}

AGENT_KINDS = ("moc", "flat", "uof", "bc")


@dataclass
class RunConfig:
    """Flat description of one experiment; every field is a CLI flag."""

    env: str = "corridor-forward"
    seed: int = 0
    out: str = "run"
    data: str = ""
    world_dir: str = ""
    agent_dir: str = ""
    agent: str = "moc"
    goal: int = 2                    # queried high-level goal for gripper eval

    # ablation switches
    cvae: bool = True
    pessimistic_termination: bool = True
    goal_conditioned_cvae: bool = True

    # dataset generation
    grade: str = "medium"
    n_transitions: int = 100_000

    # world model
    world_ensemble_size: int = 5
    world_hidden: str = "512,512"
    world_learning_rate: float = 1e-4
    world_batch_size: int = 256
    world_epochs: int = 50
    threshold_mode: str = ""         # quantile | fraction; per-env default when empty
    threshold_value: float = 0.0
    penalty: float = 0.0

    # latent codec
    cvae_hidden: str = "720,720"
    cvae_learning_rate: float = 1e-4
    cvae_batch_size: int = 0         # per-env default when 0
    cvae_epochs: int = 50
    cvae_kl_weight: float = 0.1

    # agent training
    agent_hidden: str = "64,64"
    n_options: int = 4
    total_steps: int = 150_000
    episodes: int = 2000             # uof episode budget
    eval_every: int = 15_000
    train_eval_episodes: int = 5
    eval_episodes: int = 30
    stop_at_return: float = math.inf

    def to_text(self) -> str:
        lines = []
        for field in sorted(fields(self), key=lambda f: f.name):
            value = getattr(self, field.name)
            if isinstance(value, bool):
                value = int(value)
            lines.append(f"{field.name}={value!r}" if isinstance(value, str)
                         else f"{field.name}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, mapping: dict) -> "RunConfig":
        kwargs = {}
        for field in fields(cls):
            if field.name not in mapping:
                continue
            raw = mapping[field.name]
            if field.type == "bool" or isinstance(getattr(cls(), field.name), bool):
                kwargs[field.name] = bool(int(raw)) if not isinstance(raw, bool) else raw
            elif isinstance(getattr(cls(), field.name), int):
                kwargs[field.name] = int(raw)
            elif isinstance(getattr(cls(), field.name), float):
                kwargs[field.name] = float(raw)
            else:
                kwargs[field.name] = str(raw).strip("'\"")
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        mapping = {}
        for line in text.splitlines():
            line = line.strip()
            if line and not line.startswith("#"):
                key, _, value = line.partition("=")
                mapping[key.strip()] = value.strip()
        return cls.from_mapping(mapping)


def parse_hidden(text: str) -> tuple:
    return tuple(int(x) for x in text.split(",") if x)


def _is_gripper(env_name: str) -> bool:
    return env_name == "gripper-chain"


def resolved_defaults(config: RunConfig) -> RunConfig:
    """Fill per-environment defaults the spec pins in the appendices."""
    out = replace(config)
    gripper = _is_gripper(config.env)
    if not out.threshold_mode:
        out.threshold_mode = "quantile" if gripper else "fraction"
    if out.threshold_value == 0.0:
        out.threshold_value = 99.0 if gripper else 1.08
    if out.penalty == 0.0:
        out.penalty = 50.0 if gripper else 20.0
    if out.cvae_batch_size == 0:
        out.cvae_batch_size = 128 if gripper else 256
    return out


def train_fraction_for(env_name: str) -> float:
    return 0.85 if _is_gripper(env_name) else 0.90


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


def _hash_tree(path: Path) -> list:
    path = Path(path)
    if path.is_file():
        return [(str(path), _sha256(path))]
    return [(str(p), _sha256(p)) for p in sorted(path.rglob("*")) if p.is_file()]


def write_run_metadata(out_dir: Path, config: RunConfig, inputs: list) -> None:
    """Serialize the config plus the hashes of every input checkpoint/file."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(config.to_text(), encoding="utf-8")
    lines = []
    for item in inputs:
        for name, digest in _hash_tree(Path(item)):
            lines.append(f"input={name} sha256={digest}")
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_csv(path, header: list, rows: list) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v
                             for v in row])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(config: RunConfig) -> Path:
    if config.grade not in GRADES:
        raise OfhrlError(f"unknown grade {config.grade!r}; expected one of {GRADES}")
    env = make_env(config.env)
    dataset = behavior_rollout(env, config.grade, config.n_transitions, config.seed)
    out = Path(config.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(dataset, out)
    Path(str(out) + ".run.txt").write_text(config.to_text(), encoding="utf-8")
    returns = dataset.episode_returns()
    print(f"gen-data: wrote {dataset.count} transitions to {out} "
          f"(episodes {len(returns)}, mean return {returns.mean():.3f})")
    return out


def cmd_train_world(config: RunConfig) -> Path:
    config = resolved_defaults(config)
    if not config.data:
        raise OfhrlError("train-world requires --data")
    dataset = load_dataset(config.data)
    gripper = _is_gripper(config.env)
    seeds = np.random.SeedSequence(config.seed).generate_state(2)

    world_cfg = WorldConfig(ensemble_size=config.world_ensemble_size,
                            hidden=parse_hidden(config.world_hidden),
                            learning_rate=config.world_learning_rate,
                            batch_size=config.world_batch_size,
                            epochs=config.world_epochs,
                            train_fraction=train_fraction_for(config.env),
                            learn_reward=not gripper,
                            seed=int(seeds[0]))
    world = train_world(dataset, world_cfg)
    calibrate_threshold(world, dataset, config.threshold_mode, config.threshold_value,
                        penalty=config.penalty)

    cvae_cfg = CvaeConfig(hidden=parse_hidden(config.cvae_hidden),
                          learning_rate=config.cvae_learning_rate,
                          batch_size=config.cvae_batch_size,
                          epochs=config.cvae_epochs,
                          kl_weight=config.cvae_kl_weight,
                          goal_conditioned=gripper and config.goal_conditioned_cvae,
                          train_fraction=train_fraction_for(config.env),
                          seed=int(seeds[1]))
    env = make_env(config.env)
    codec, history = train_cvae(dataset, cvae_cfg, env.spec.action_low, env.spec.action_high)

    out = Path(config.out)
    save_world(world, out / "world")
    save_codec(codec, out / "codec")
    write_run_metadata(out, config, [config.data])

    val_rows = []
    for member, curve in enumerate(world.validation_curves["dynamics"]):
        for epoch, loss in enumerate(curve):
            val_rows.append((member, "dynamics", epoch, loss))
        print(f"train-world: dynamics member {member} validation l1 {min(curve):.6f}")
    for member, curve in enumerate(world.validation_curves.get("reward") or []):
        for epoch, loss in enumerate(curve):
            val_rows.append((member, "reward", epoch, loss))
        print(f"train-world: reward member {member} validation l1 {min(curve):.6f}")
    _write_csv(out / "world_validation.csv", ["member", "net", "epoch", "val_l1"], val_rows)
    _write_csv(out / "cvae_history.csv", ["epoch", "train_loss", "val_recon_l1", "val_kl"],
               [(h["epoch"], h["train_loss"], h["val_recon_l1"], h["val_kl"]) for h in history])
    print(f"train-world: threshold[{world.threshold_mode}={world.threshold_value}] "
          f"= {world.threshold!r}, penalty {world.penalty}")
    return out


def _load_world_and_codec(config: RunConfig):
    if not config.world_dir:
        raise OfhrlError("this command requires --world-dir")
    world = load_world(Path(config.world_dir) / "world")
    codec = load_codec(Path(config.world_dir) / "codec") if config.cvae else None
    return world, codec


def _true_env_eval_fn(config: RunConfig, env, codec):
    gripper = _is_gripper(config.env)

    def eval_fn(agent):
        result = evaluate(agent, env, episodes=config.train_eval_episodes,
                          seed=10_000 + config.seed, codec=codec,
                          queried_goal=config.goal if gripper else None)
        if gripper:
            return {"return": float(result["returns"].mean()),
                    "success": result["successes"].mean(axis=0)}
        return float(result["returns"].mean())

    return eval_fn


def cmd_train_agent(config: RunConfig) -> Path:
    config = resolved_defaults(config)
    if config.agent not in AGENT_KINDS:
        raise OfhrlError(f"unknown agent kind {config.agent!r}")
    if not config.data:
        raise OfhrlError("train-agent requires --data")
    dataset = load_dataset(config.data)
    env = make_env(config.env)
    gripper = _is_gripper(config.env)
    out = Path(config.out)
    hidden = parse_hidden(config.agent_hidden)

    if config.agent == "bc":
        policy, history = bc_train(dataset, BcConfig(hidden=hidden, seed=config.seed),
                                   goal_fn=env.low_goal_for if gripper else None)
        out.mkdir(parents=True, exist_ok=True)
        policy.save(out / "agent")
        write_run_metadata(out, config, [config.data])
        _write_csv(out / "curve.csv", ["epoch", "val_l1"],
                   [(h["epoch"], h["val_l1"]) for h in history])
        print(f"train-agent: bc final validation l1 {history[-1]['val_l1']:.4f}")
        return out

    world, codec = _load_world_and_codec(config)
    latent = config.cvae
    sessions_seed = np.random.SeedSequence(config.seed + 424242).generate_state(16)

    def session(i):
        return make_session(world, codec, dataset, env, seed=int(sessions_seed[i]),
                            pessimism=config.pessimistic_termination)

    eval_fn = _true_env_eval_fn(config, env, codec)
    columns = ["step", "pmdp_return", "true_env_eval_return"]

    if config.agent == "moc":
        cfg = MocConfig(n_options=config.n_options, hidden=hidden,
                        total_steps=config.total_steps, eval_every=config.eval_every,
                        seed=config.seed)
        agent = OptionSet(env.spec.state_dim, env.spec.action_dim, cfg,
                          norm_stats=world.norm_stats, latent=latent, seed=config.seed)
        runners = [session(i) for i in range(cfg.n_runners)]
        scalar_eval = eval_fn
        if gripper:
            scalar_eval = lambda a: eval_fn(a)["return"]
        agent, rows = moc_train(agent, runners, cfg, eval_fn=scalar_eval)
        curve = [(r["step"], r["train_return"], r["eval_return"]) for r in rows]
    elif config.agent == "flat":
        cfg = FlatConfig(hidden=hidden, total_steps=config.total_steps,
                         eval_every=config.eval_every, seed=config.seed)
        goal_dim = env.spec.goal_dim if gripper else 0
        agent = FlatAgent(env.spec.state_dim, env.spec.action_dim, cfg, goal_dim=goal_dim,
                          goal_fn=env.low_goal_for if gripper else None,
                          norm_stats=world.norm_stats, latent=latent, seed=config.seed)
        if gripper:
            runners = [GoaledRunner(session(i), env.low_goal_for, GripperChain.N_GOALS)
                       for i in range(cfg.n_runners)]
            raw_eval = eval_fn
            eval_fn = lambda a: raw_eval(a)["return"]
        else:
            runners = [session(i) for i in range(cfg.n_runners)]
        agent, rows = flat_train(agent, runners, cfg, eval_fn=eval_fn)
        curve = [(r["step"], r["train_return"], r["eval_return"]) for r in rows]
    else:  # uof
        if not gripper:
            raise OfhrlError("the goal-conditioned agent runs on gripper-chain only")
        cfg = UofConfig(hidden=hidden, episodes=config.episodes,
                        eval_every=max(1, config.episodes // 10), seed=config.seed)
        action_dim = codec.latent_dim if latent else env.spec.action_dim
        agent = UofAgent(env, cfg, action_dim=action_dim, norm_stats=world.norm_stats,
                         latent=latent, seed=config.seed)
        agent, rows = uof_train(agent, session(0), cfg, eval_fn=eval_fn)
        columns += [f"success_{g}" for g in range(agent.n_high)]
        curve = [(r["step"], r["train_return"], r["eval_return"],
                  *[r[f"success_{g}"] for g in range(agent.n_high)]) for r in rows]

    out.mkdir(parents=True, exist_ok=True)
    agent.save(out / "agent")
    (out / "agent" / "kind.txt").write_text(config.agent + "\n", encoding="utf-8")
    write_run_metadata(out, config, [config.data, config.world_dir])
    _write_csv(out / "curve.csv", columns, curve)
    last = curve[-1] if curve else ("-",) * 3
    print(f"train-agent: {config.agent} finished at step {last[0]}; "
          f"true-env eval return {last[2]}")
    return out


def load_agent(agent_dir, env, goal_fn=None):
    agent_dir = Path(agent_dir)
    kind = (agent_dir / "agent" / "kind.txt").read_text().strip() \
        if (agent_dir / "agent" / "kind.txt").exists() else None
    meta = dict(line.split("=", 1) for line in
                (agent_dir / "agent" / "agent.txt").read_text().splitlines() if line)
    kind = kind or meta["kind"]
    if kind == "moc":
        return OptionSet.load(agent_dir / "agent")
    if kind == "flat":
        return FlatAgent.load(agent_dir / "agent", goal_fn=goal_fn)
    if kind == "uof":
        return UofAgent.load(agent_dir / "agent", env)
    if kind == "bc":
        return BcPolicy.load(agent_dir / "agent", goal_fn=goal_fn)
    raise OfhrlError(f"unknown agent kind {kind!r} in {agent_dir}")


def cmd_transfer(config: RunConfig) -> Path:
    """Fine-tune an offline-trained agent online on a new task, decoder discarded."""
    if not config.agent_dir:
        raise OfhrlError("transfer requires --agent-dir")
    env = make_env(config.env)
    agent = load_agent(config.agent_dir, env)
    if not hasattr(agent, "prepare_transfer"):
        raise OfhrlError(f"agent kind {type(agent).__name__} does not support transfer")
    agent.prepare_transfer(seed=config.seed + 31337)

    runner_seeds = np.random.SeedSequence(config.seed + 777).generate_state(16)
    eval_fn = _true_env_eval_fn(config, env, codec=None)
    stop = None if math.isinf(config.stop_at_return) else config.stop_at_return

    if isinstance(agent, OptionSet):
        cfg = MocConfig(n_options=agent.n_options, total_steps=config.total_steps,
                        eval_every=config.eval_every, seed=config.seed)
        runners = [EpisodeRunner(make_env(config.env), seed=int(runner_seeds[i]))
                   for i in range(cfg.n_runners)]
        agent, rows = moc_train(agent, runners, cfg, eval_fn=eval_fn, stop_at=stop)
    else:
        cfg = FlatConfig(total_steps=config.total_steps, eval_every=config.eval_every,
                         seed=config.seed)
        runners = [EpisodeRunner(make_env(config.env), seed=int(runner_seeds[i]))
                   for i in range(cfg.n_runners)]
        agent, rows = flat_train(agent, runners, cfg, eval_fn=eval_fn, stop_at=stop)

    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    agent.save(out / "agent")
    (out / "agent" / "kind.txt").write_text(
        ("moc" if isinstance(agent, OptionSet) else "flat") + "\n", encoding="utf-8")
    write_run_metadata(out, config, [config.agent_dir])
    _write_csv(out / "curve.csv", ["step", "online_return", "true_env_eval_return"],
               [(r["step"], r["train_return"], r["eval_return"]) for r in rows])
    print(f"transfer: finished at step {rows[-1]['step']}, "
          f"eval return {rows[-1]['eval_return']!r}")
    return out


def cmd_eval(config: RunConfig) -> Path:
    if not config.agent_dir:
        raise OfhrlError("eval requires --agent-dir")
    env = make_env(config.env)
    gripper = _is_gripper(config.env)
    if gripper:
        env = GripperChain(queried_goal=config.goal)
    agent = load_agent(config.agent_dir, env, goal_fn=env.low_goal_for if gripper else None)
    codec = None
    if getattr(agent, "latent", False):
        world_dir = config.world_dir
        if not world_dir:
            manifest = Path(config.agent_dir) / "config.txt"
            if manifest.exists():
                world_dir = RunConfig.from_text(manifest.read_text()).world_dir
        if not world_dir:
            raise OfhrlError("latent agent needs --world-dir for its decoder")
        codec = load_codec(Path(world_dir) / "codec")

    result = evaluate(agent, env, episodes=config.eval_episodes, seed=config.seed,
                      codec=codec, queried_goal=config.goal if gripper else None)
    random_ref, expert_ref = REFERENCE_RETURNS[config.env]
    rows = []
    for ep, ret in enumerate(result["returns"]):
        normalized = 100.0 * (ret - random_ref) / (expert_ref - random_ref)
        row = [ep, float(ret), float(normalized)]
        if "successes" in result:
            row += [int(b) for b in result["successes"][ep]]
        rows.append(row)
    header = ["episode", "return", "normalized_score"]
    if "successes" in result:
        header += [f"success_{g}" for g in range(result["successes"].shape[1])]
    out = Path(config.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(out, header, rows)
    Path(str(out) + ".run.txt").write_text(config.to_text(), encoding="utf-8")
    mean, std = result["returns"].mean(), result["returns"].std()
    print(f"eval: return {mean:.3f} +/- {std:.3f} over {config.eval_episodes} episodes; "
          f"normalized {100.0 * (mean - random_ref) / (expert_ref - random_ref):.2f}")
    if "successes" in result:
        print("eval: success rates", result["successes"].mean(axis=0).round(3).tolist())
    return out


def cmd_options_trace(config: RunConfig) -> Path:
    if not config.agent_dir:
        raise OfhrlError("options-trace requires --agent-dir")
    env = make_env(config.env)
    gripper = _is_gripper(config.env)
    if gripper:
        env = GripperChain(queried_goal=config.goal)
    agent = load_agent(config.agent_dir, env)
    codec = None
    if getattr(agent, "latent", False):
        world_dir = config.world_dir or RunConfig.from_text(
            (Path(config.agent_dir) / "config.txt").read_text()).world_dir
        codec = load_codec(Path(world_dir) / "codec")

    result = evaluate(agent, env, episodes=config.eval_episodes, seed=config.seed,
                      codec=codec, queried_goal=config.goal if gripper else None)
    traces = result.get("option_traces")
    if traces is None:
        raise OfhrlError("agent does not expose an active option to trace")
    n_options = int(traces.max()) + 1
    rows = []
    for t in range(traces.shape[1]):
        active = traces[:, t] >= 0
        if not active.any():
            break
        counts = np.bincount(traces[active, t], minlength=n_options)
        rows.append([t] + [float(c) / active.sum() for c in counts])
    out = Path(config.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(out, ["t"] + [f"option_{w}" for w in range(n_options)], rows)
    Path(str(out) + ".run.txt").write_text(config.to_text(), encoding="utf-8")
    print(f"options-trace: wrote {len(rows)} timesteps x {n_options} options to {out}")
    return out
