"""Acceptance suite: one test per acceptance criterion, at stated tolerances.

Heavy artifacts (datasets, world models, codecs, trained agents) are built
once in session fixtures and shared across criteria. Each test prints one
PASS line when its criterion holds; budgets are desk-scale configurations
recorded in the fixtures.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from conftest import fd_param_grad, max_rel_error, sample_kink_free_input
from ofhrl.agents.bc import BcConfig, bc_train
from ofhrl.agents.common import EpisodeRunner, GoaledRunner, evaluate
from ofhrl.agents.flat import FlatAgent, FlatConfig, flat_train
from ofhrl.agents.moc import MocConfig, OptionSet, moc_train
from ofhrl.agents.uof import UofAgent, UofConfig, uof_train
from ofhrl.cli import main as cli_main
from ofhrl.cvae import CvaeConfig, save_codec, train_cvae
from ofhrl.data import NormStats, load_dataset
from ofhrl.env import GripperChain, behavior_rollout, make_env
from ofhrl.nn import Mlp
from ofhrl.pipeline import RunConfig, cmd_options_trace
from ofhrl.pmdp import PmdpSession, make_session
from ofhrl.world import (WorldConfig, WorldModel, calibrate_threshold,
                         dataset_discrepancies, save_world, train_world)

SEEDS = (0, 1, 2, 3, 4)


def _report(criterion: str, detail: str) -> None:
    print(f"ACCEPTANCE PASS [{criterion}]: {detail}")


# ---------------------------------------------------------------------------
# shared artifacts
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def corridor_bundle():
    start = time.monotonic()
    env = make_env("corridor-forward")
    dataset = behavior_rollout(env, "medium", 50_000, seed=7)
    world = train_world(dataset, WorldConfig(
        ensemble_size=5, hidden=(64, 64), learning_rate=1e-3, batch_size=256,
        epochs=12, train_fraction=0.90, seed=1))
    calibrate_threshold(world, dataset, "fraction", 1.08, penalty=20.0)
    codec, _ = train_cvae(dataset, CvaeConfig(
        hidden=(64, 64), learning_rate=1e-3, batch_size=256, epochs=15,
        train_fraction=0.90, seed=2),
        action_low=env.spec.action_low, action_high=env.spec.action_high)
    return {"env": env, "dataset": dataset, "world": world, "codec": codec,
            "build_seconds": time.monotonic() - start}


@pytest.fixture(scope="session")
def gripper_bundle(tmp_path_factory):
    env = make_env("gripper-chain")
    dataset = behavior_rollout(env, "medium_expert", 50_000, seed=11)
    world = train_world(dataset, WorldConfig(
        ensemble_size=5, hidden=(128, 128), learning_rate=1e-3, batch_size=256,
        epochs=25, train_fraction=0.85, learn_reward=False, seed=1))
    calibrate_threshold(world, dataset, "quantile", 99.0, penalty=50.0)
    codec, _ = train_cvae(dataset, CvaeConfig(
        hidden=(64, 64), learning_rate=1e-3, batch_size=256, epochs=15,
        train_fraction=0.85, goal_conditioned=True, seed=2),
        action_low=env.spec.action_low, action_high=env.spec.action_high)
    saved = tmp_path_factory.mktemp("gripper_world")
    save_world(world, saved / "world")
    save_codec(codec, saved / "codec")
    return {"env": env, "dataset": dataset, "world": world, "codec": codec,
            "world_dir": saved}


def _offline_moc(bundle, seed, latent=True, pessimism=True, eval_every=8192):
    env, dataset = bundle["env"], bundle["dataset"]
    world, codec = bundle["world"], bundle["codec"]
    cfg = MocConfig(total_steps=150_000, eval_every=eval_every, seed=seed)
    agent = OptionSet(env.spec.state_dim, env.spec.action_dim, cfg,
                      norm_stats=world.norm_stats, latent=latent, seed=seed)
    runners = [make_session(world, codec if latent else None, dataset, env,
                            seed=50 * seed + i, pessimism=pessimism) for i in range(8)]
    used_codec = codec if latent else None
    start = time.monotonic()
    agent, rows = moc_train(agent, runners, cfg,
                            eval_fn=lambda a: evaluate(a, env, episodes=5, seed=321,
                                                       codec=used_codec)["returns"].mean())
    seconds = time.monotonic() - start
    final = evaluate(agent, env, episodes=30, seed=999, codec=used_codec)["returns"].mean()
    return {"agent": agent, "rows": rows, "final": float(final), "seconds": seconds}


@pytest.fixture(scope="session")
def moc_runs(corridor_bundle):
    return {seed: _offline_moc(corridor_bundle, seed) for seed in SEEDS}


@pytest.fixture(scope="session")
def moc_raw_runs(corridor_bundle):
    return {seed: _offline_moc(corridor_bundle, seed, latent=False) for seed in SEEDS}


@pytest.fixture(scope="session")
def corridor_bc(corridor_bundle):
    policy, _ = bc_train(corridor_bundle["dataset"], BcConfig(seed=3))
    final = evaluate(policy, corridor_bundle["env"], episodes=30, seed=999)["returns"].mean()
    return {"policy": policy, "final": float(final)}


def _offline_uof(bundle, seed, pessimism=True, episodes=3000):
    env, dataset = bundle["env"], bundle["dataset"]
    world, codec = bundle["world"], bundle["codec"]
    cfg = UofConfig(episodes=episodes, eval_every=episodes,
                    demo_decay_episodes=900, seed=seed)
    agent = UofAgent(env, cfg, action_dim=codec.latent_dim, norm_stats=world.norm_stats,
                     latent=True, seed=seed)
    session = make_session(world, codec, dataset, env, seed=5 + seed, pessimism=pessimism)
    agent, _ = uof_train(agent, session, cfg)
    result = evaluate(agent, env, episodes=30, seed=777, codec=codec, queried_goal=2)
    return {"agent": agent, "success": result["successes"].mean(axis=0),
            "returns": result["returns"]}


@pytest.fixture(scope="session")
def uof_runs(gripper_bundle):
    return {seed: _offline_uof(gripper_bundle, seed) for seed in SEEDS}


# ---------------------------------------------------------------------------
# criterion 1: gradient correctness
# ---------------------------------------------------------------------------

ARCHITECTURES = [
    # (layer sizes, activations) for every net family used in the repo
    ((6, 512, 512, 4), None),                       # corridor dynamics
    ((6, 512, 512, 1), None),                       # corridor reward
    ((13, 512, 512, 10), None),                     # gripper dynamics
    ((6, 720, 720, 4), None),                       # corridor cvae encoder
    ((6, 720, 720, 2), None),                       # corridor cvae decoder
    ((18, 720, 720, 6), None),                      # gripper cvae encoder
    ((18, 720, 720, 3), None),                      # gripper cvae decoder
    ((4, 64, 64), ("tanh", "tanh")),                # option trunk
    ((64, 8), ("identity",)),                       # option heads
    ((4, 64, 64, 2), ("tanh", "tanh", "identity")),  # flat policy/value
    ((13, 64, 64, 3), ("tanh", "tanh", "identity")),  # uof actor
    ((18, 64, 64, 1), ("tanh", "tanh", "identity")),  # uof critic
    ((15, 64, 64, 3), None),                        # behavior cloning
]


def test_criterion_1_gradient_correctness():
    start = time.monotonic()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for layers, acts in ARCHITECTURES:
        for seed in range(100):
            net = Mlp(layers, acts, seed=seed)
            x = sample_kink_free_input(net, rng, margin=1e-4)
            weights = rng.normal(size=net.output_dim)
            net.forward(x)
            analytic = net.backward(weights)
            idx = rng.choice(net.parameter_count, size=4, replace=False)
            fd = fd_param_grad(net, x, weights, idx, step=1e-5)
            worst = max(worst, max_rel_error(analytic[idx], fd))
    elapsed = time.monotonic() - start
    assert worst < 1e-3, f"worst relative error {worst}"
    assert elapsed < 60.0, f"gradient checks took {elapsed:.1f}s"
    _report("1 gradients", f"max rel err {worst:.2e} over "
            f"{len(ARCHITECTURES)} architectures x 100 seeds in {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 2: P-MDP mechanics
# ---------------------------------------------------------------------------

def _two_member_world(delta_a, delta_b, threshold, penalty=20.0):
    nets = []
    for bias in (delta_a, delta_b):
        net = Mlp([2, 1], activations=["identity"], init="zero")
        net.biases(0)[:] = bias
        nets.append(net)
    rewards = [Mlp([2, 1], activations=["identity"], init="zero") for _ in nets]
    return WorldModel(dynamics=nets, reward_nets=rewards,
                      norm_stats=NormStats(np.zeros(1), np.ones(1)),
                      threshold=threshold, penalty=penalty)


def test_criterion_2_pmdp_mechanics():
    starts = np.array([[0.0]])
    # deltas 0 and 2 -> population variance 1.0 (arithmetic oracle)
    fires = PmdpSession(_two_member_world(0.0, 2.0, threshold=0.5), None, starts,
                        horizon=10, action_low=[-1], action_high=[1], seed=0)
    fires.reset(seed=1)
    _, reward, done, info = fires.step(np.zeros(1))
    assert done and info["terminated_by_pessimism"] and reward == -20.0

    holds = PmdpSession(_two_member_world(0.0, 2.0, threshold=1.5), None, starts,
                        horizon=10, action_low=[-1], action_high=[1], seed=0)
    holds.reset(seed=1)
    _, _, done, info = holds.step(np.zeros(1))
    assert not info["terminated_by_pessimism"] and not done

    five = WorldModel(dynamics=[Mlp([2, 1], activations=["identity"], init="zero")
                                for _ in range(5)],
                      reward_nets=[Mlp([2, 1], activations=["identity"], init="zero")
                                   for _ in range(5)],
                      norm_stats=NormStats(np.zeros(1), np.ones(1)))
    session = PmdpSession(five, None, starts, horizon=10,
                          action_low=[-1], action_high=[1], seed=3)
    counts = np.zeros(5)
    for _ in range(10_000):
        session.reset()
        counts[session.active_member] += 1
    p_value = stats.chisquare(counts).pvalue
    assert p_value > 0.01, f"member sampling chi-square p={p_value}"
    assert np.all(np.abs(counts / 10_000 - 0.20) <= 0.02)
    _report("2 pmdp mechanics", f"variance oracle fires at 1.0 > 0.5 only; "
            f"member chi-square p={p_value:.3f} over 10k resets")


# ---------------------------------------------------------------------------
# criterion 3: discrepancy separation
# ---------------------------------------------------------------------------

def test_criterion_3_discrepancy_separation(corridor_bundle):
    start = time.monotonic()
    world, dataset = corridor_bundle["world"], corridor_bundle["dataset"]
    scores = dataset_discrepancies(world, dataset)
    q99 = float(np.percentile(scores, 99.0))

    rng = np.random.default_rng(17)
    idx = rng.choice(dataset.count, size=1000, replace=False)
    probes = dataset.states[idx].copy()
    probes[:, 1] += 5.0
    actions = rng.uniform(-1.0, 1.0, size=(1000, dataset.action_dim))
    ood = world.discrepancy_batch(probes, actions)

    separation = float((ood > q99).mean())
    elapsed = corridor_bundle["build_seconds"] + (time.monotonic() - start)
    assert separation >= 0.90, f"only {separation:.2%} of far-OOD probes exceed q99"
    assert np.median(scores) < q99
    assert elapsed < 300.0, f"separation check incl. world training took {elapsed:.0f}s"
    _report("3 separation", f"{separation:.1%} of 1000 far-OOD probes above the "
            f"99%-quantile threshold; in-dist median {np.median(scores):.2e} < {q99:.2e}; "
            f"{elapsed:.0f}s incl. world training")


# ---------------------------------------------------------------------------
# criterion 4: empirical pessimism
# ---------------------------------------------------------------------------

def _pmdp_return(agent, bundle, episodes, seed):
    env, dataset = bundle["env"], bundle["dataset"]
    world, codec = bundle["world"], bundle["codec"]
    totals = []
    session = make_session(world, codec, dataset, env, seed=seed)
    for ep in range(episodes):
        state = session.reset(seed=seed + ep)
        agent.begin_episode(state)
        total, done = 0.0, False
        while not done:
            out = agent.heads(state)
            latent = out["means"][0, agent.active_option]
            state, reward, done, _ = session.step(latent)
            total += reward
            agent.observe_step(state)
        totals.append(total)
    return float(np.mean(totals))


def test_criterion_4_empirical_pessimism(corridor_bundle, moc_runs):
    agent = moc_runs[0]["agent"]
    true_return = evaluate(agent, corridor_bundle["env"], episodes=100, seed=555,
                           codec=corridor_bundle["codec"])["returns"].mean()
    synthetic = _pmdp_return(agent, corridor_bundle, episodes=100, seed=31_000)
    bound = true_return + 0.1 * abs(true_return)
    assert synthetic <= bound, f"P-MDP return {synthetic:.1f} > bound {bound:.1f}"
    _report("4 pessimism", f"P-MDP return {synthetic:.1f} <= true {true_return:.1f} "
            f"+ 10% over 100 episodes")


# ---------------------------------------------------------------------------
# criterion 5: standard setting
# ---------------------------------------------------------------------------

def test_criterion_5_standard_setting(corridor_bundle, moc_runs, corridor_bc):
    behavior_mean = corridor_bundle["dataset"].episode_returns().mean()
    target = 1.1 * behavior_mean
    finals = [moc_runs[seed]["final"] for seed in SEEDS]
    times = [moc_runs[seed]["seconds"] for seed in SEEDS]
    for seed, final in zip(SEEDS, finals):
        assert final >= target, f"seed {seed}: {final:.1f} < 1.1x behavior {target:.1f}"
        assert final > corridor_bc["final"], f"seed {seed} does not beat cloning"
    assert max(times) < 600.0, f"slowest run took {max(times):.0f}s"
    _report("5 standard", f"offline returns {[round(f, 1) for f in finals]} all >= "
            f"{target:.1f} (1.1x behavior) and > BC {corridor_bc['final']:.1f}; "
            f"slowest run {max(times):.0f}s")


# ---------------------------------------------------------------------------
# criterion 6: transfer
# ---------------------------------------------------------------------------

def _fine_tune_steps(agent, pre_return, seed, make_cfg, train_fn):
    target = 0.8 * abs(pre_return)
    agent.prepare_transfer(seed=seed + 31_337)
    cfg = make_cfg(seed)
    seeds = np.random.SeedSequence(seed + 777).generate_state(8)
    runners = [EpisodeRunner(make_env("corridor-backward"), seed=int(s)) for s in seeds]
    env = make_env("corridor-backward")
    agent, rows = train_fn(agent, runners, cfg,
                           eval_fn=lambda a: evaluate(a, env, episodes=5,
                                                      seed=321)["returns"].mean(),
                           stop_at=target)
    reached = rows[-1]["eval_return"] >= target
    return (rows[-1]["step"] if reached else math.inf), rows


def test_criterion_6_transfer(corridor_bundle, moc_runs):
    env, dataset = corridor_bundle["env"], corridor_bundle["dataset"]
    world, codec = corridor_bundle["world"], corridor_bundle["codec"]
    moc_steps, flat_steps = [], []
    dips = []
    for seed in SEEDS:
        moc_pre = moc_runs[seed]["final"]
        steps, rows = _fine_tune_steps(
            moc_runs[seed]["agent"], moc_pre, seed,
            lambda s: MocConfig(total_steps=204_800, eval_every=4096, seed=s + 100),
            moc_train)
        moc_steps.append(steps)
        dips.append(rows[0]["eval_return"] < moc_pre)

        fcfg = FlatConfig(total_steps=120_000, eval_every=120_000, seed=seed)
        flat = FlatAgent(env.spec.state_dim, env.spec.action_dim, fcfg,
                         norm_stats=world.norm_stats, latent=True, seed=seed)
        runners = [make_session(world, codec, dataset, env, seed=70 * seed + i)
                   for i in range(8)]
        flat, _ = flat_train(flat, runners, fcfg)
        flat_pre = evaluate(flat, env, episodes=30, seed=999, codec=codec)["returns"].mean()
        steps, _ = _fine_tune_steps(
            flat, flat_pre, seed,
            lambda s: FlatConfig(total_steps=204_800, eval_every=4096, seed=s + 100),
            flat_train)
        flat_steps.append(steps)

    moc_median, flat_median = np.median(moc_steps), np.median(flat_steps)
    assert all(dips), "no post-detachment dip observed"
    assert moc_median < flat_median, (
        f"hierarchical median {moc_median} !< flat median {flat_median} "
        f"({moc_steps} vs {flat_steps})")
    _report("6 transfer", f"steps to 80% of pre-transfer return: hierarchical "
            f"{moc_steps} (median {moc_median:.0f}) < flat {flat_steps} "
            f"(median {flat_median:.0f}); reward dips at switch in 5/5 runs")


# ---------------------------------------------------------------------------
# criterion 7: goal-conditioned setting
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def gripper_baselines(gripper_bundle):
    env, dataset = gripper_bundle["env"], gripper_bundle["dataset"]
    world, codec = gripper_bundle["world"], gripper_bundle["codec"]
    out = {"bc": [], "flat": []}
    for seed in (0, 1):
        policy, _ = bc_train(dataset, BcConfig(epochs=30, seed=seed),
                             goal_fn=env.low_goal_for)
        res = evaluate(policy, GripperChain(queried_goal=2), episodes=30,
                       seed=777, queried_goal=2)
        res0 = evaluate(policy, GripperChain(queried_goal=0), episodes=30,
                        seed=777, queried_goal=0)
        out["bc"].append({"success": res["successes"].mean(axis=0),
                          "success_goal0": res0["successes"][:, 0].mean()})

        fcfg = FlatConfig(total_steps=60_000, eval_every=60_000, seed=seed)
        flat = FlatAgent(env.spec.state_dim, codec.latent_dim, fcfg,
                         goal_dim=env.spec.goal_dim, goal_fn=env.low_goal_for,
                         norm_stats=world.norm_stats, latent=True, seed=seed)
        runners = [GoaledRunner(make_session(world, codec, dataset, env, seed=90 + 10 * seed + i),
                                env.low_goal_for, GripperChain.N_GOALS)
                   for i in range(8)]
        flat, _ = flat_train(flat, runners, fcfg)
        res = evaluate(flat, GripperChain(queried_goal=2), episodes=30, seed=777,
                       codec=codec, queried_goal=2)
        out["flat"].append({"success": res["successes"].mean(axis=0)})
    return out


def test_criterion_7_goal_conditioned(uof_runs, gripper_baselines):
    # paper reports around 0.8 final-goal success; gate is >= 0.7 per seed
    finals = [uof_runs[seed]["success"][2] for seed in SEEDS]
    for seed, success in zip(SEEDS, finals):
        assert success >= 0.7, f"seed {seed}: goal-(iii) success {success:.2f} < 0.7"
    for row in gripper_baselines["bc"]:
        assert row["success"][2] < 0.5, "cloning should not reach goal (iii)"
    for row in gripper_baselines["flat"]:
        assert row["success"][2] < 0.5, "flat baseline should not reach goal (iii)"
    bc_goal0 = [row["success_goal0"] for row in gripper_baselines["bc"]]
    _report("7 goal-conditioned", f"uof goal-(iii) success {[round(s, 2) for s in finals]} "
            f">= 0.7; BC goal-(iii) {[round(r['success'][2], 2) for r in gripper_baselines['bc']]} "
            f"and flat {[round(r['success'][2], 2) for r in gripper_baselines['flat']]} < 0.5 "
            f"(BC goal-(i) {[round(v, 2) for v in bc_goal0]})")


# ---------------------------------------------------------------------------
# criterion 8: option ordering
# ---------------------------------------------------------------------------

def test_criterion_8_option_ordering(uof_runs, gripper_bundle, tmp_path):
    agent_dir = tmp_path / "uof0"
    (agent_dir / "agent").mkdir(parents=True)
    uof_runs[0]["agent"].save(agent_dir / "agent")
    (agent_dir / "agent" / "kind.txt").write_text("uof\n")
    (agent_dir / "config.txt").write_text(
        RunConfig(env="gripper-chain", world_dir=str(gripper_bundle["world_dir"])).to_text())

    out = tmp_path / "trace.csv"
    cmd_options_trace(RunConfig(env="gripper-chain", agent_dir=str(agent_dir),
                                world_dir=str(gripper_bundle["world_dir"]),
                                goal=2, eval_episodes=30, seed=777, out=str(out)))
    rows = np.genfromtxt(out, delimiter=",", names=True)
    fractions = np.stack([rows[f"option_{w}"] for w in range(3)], axis=1)
    sums = fractions.sum(axis=1)
    assert np.all(np.abs(sums - 1.0) <= 1e-9), "fractions must sum to 1"

    dominance = []
    for w in range(3):
        dominant = np.flatnonzero(fractions.argmax(axis=1) == w)
        assert len(dominant), f"option {w} never dominates"
        dominance.append(dominant[0])
    assert dominance[0] < dominance[1] < dominance[2], f"dominance order {dominance}"
    _report("8 option ordering", f"first-dominance times {dominance} strictly ordered; "
            f"per-step fractions sum to 1 within 1e-9 over {len(fractions)} steps")


# ---------------------------------------------------------------------------
# criterion 9: ablations
# ---------------------------------------------------------------------------

def _steps_to_fraction_of_final(rows, final, fraction=0.9):
    target = fraction * final
    for row in rows:
        if row["eval_return"] >= target:
            return row["step"]
    return math.inf


def test_criterion_9_cvae_ablation_final_return(moc_runs, moc_raw_runs):
    on_finals = [moc_runs[s]["final"] for s in SEEDS]
    off_finals = [moc_raw_runs[s]["final"] for s in SEEDS]
    assert np.median(off_finals) < np.median(on_finals), (
        f"latent-off median {np.median(off_finals):.1f} !< "
        f"latent-on median {np.median(on_finals):.1f}")
    _report("9 cvae ablation (final return)",
            f"median off {np.median(off_finals):.1f} < on {np.median(on_finals):.1f} "
            f"({[round(f, 1) for f in off_finals]} vs {[round(f, 1) for f in on_finals]})")


def test_criterion_9_cvae_ablation_convergence(moc_runs, moc_raw_runs):
    # As stated: the ablated run should take more steps to reach 90% of its
    # OWN final return. The lower ablated plateau makes that bar easier, so
    # this operationalization inverts at every budget tried (see the
    # decisions ledger); asserted literally regardless.
    on_steps = [_steps_to_fraction_of_final(moc_runs[s]["rows"], moc_runs[s]["final"])
                for s in SEEDS]
    off_steps = [_steps_to_fraction_of_final(moc_raw_runs[s]["rows"],
                                             moc_raw_runs[s]["final"]) for s in SEEDS]
    assert np.median(off_steps) > np.median(on_steps), (
        f"latent-off reaches 90% of its own final in median {np.median(off_steps):.0f} "
        f"steps vs latent-on {np.median(on_steps):.0f}: the ablated plateau is lower, "
        f"so its own-90% bar is easier, inverting the stated direction")
    _report("9 cvae ablation (convergence)",
            f"off median {np.median(off_steps):.0f} > on median {np.median(on_steps):.0f}")


def test_criterion_9_termination_ablation_corridor(corridor_bundle, moc_runs):
    # Fig. 6d analog: removing penalty termination should lower the final return
    off_finals = [_offline_moc(corridor_bundle, seed, pessimism=False,
                               eval_every=150_000)["final"] for seed in SEEDS[:3]]
    on_finals = [moc_runs[seed]["final"] for seed in SEEDS[:3]]
    assert np.median(off_finals) < np.median(on_finals), (
        f"termination-off median {np.median(off_finals):.1f} !< "
        f"termination-on median {np.median(on_finals):.1f}: the corridor's smooth, "
        f"globally extrapolable dynamics make model exploitation benign here")
    _report("9 termination ablation (corridor)",
            f"off median {np.median(off_finals):.1f} < on median {np.median(on_finals):.1f}")


def test_criterion_9_termination_ablation_gripper(gripper_bundle, uof_runs):
    on_success = np.mean([uof_runs[seed]["success"][2] for seed in SEEDS[:2]])
    off_success = np.mean([_offline_uof(gripper_bundle, seed, pessimism=False)["success"][2]
                           for seed in SEEDS[:2]])
    delta = abs(on_success - off_success)
    assert delta < 0.1, f"termination ablation moved goal-(iii) success by {delta:.2f}"
    _report("9 termination ablation (gripper)",
            f"goal-(iii) success on={on_success:.2f} off={off_success:.2f}, |delta| < 0.1")


# ---------------------------------------------------------------------------
# criterion 10: plumbing
# ---------------------------------------------------------------------------

def _tree_digests(root: Path) -> dict:
    import hashlib
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_10_plumbing(tmp_path):
    data = tmp_path / "tiny.ofhrl1"
    args = ["gen-data", "--env", "corridor-forward", "--grade", "medium",
            "--n-transitions", "600", "--seed", "3", "--out", str(data)]
    assert cli_main(args) == 0
    first = data.read_bytes()
    assert cli_main(args) == 0
    assert data.read_bytes() == first, "same config must reproduce the same dataset"

    world_dir = tmp_path / "w"
    world_args = ["train-world", "--env", "corridor-forward", "--data", str(data),
                  "--world-hidden", "16", "--world-learning-rate", "1e-3",
                  "--world-epochs", "2", "--cvae-hidden", "16",
                  "--cvae-learning-rate", "1e-3", "--cvae-epochs", "2",
                  "--seed", "5", "--out", str(world_dir)]
    assert cli_main(world_args) == 0
    world_digests = _tree_digests(world_dir)
    assert cli_main(world_args) == 0
    assert _tree_digests(world_dir) == world_digests, "world outputs must reproduce"

    agent_dir = tmp_path / "a"
    agent_args = ["train-agent", "--env", "corridor-forward", "--data", str(data),
                  "--world-dir", str(world_dir), "--agent", "moc",
                  "--total-steps", "1024", "--eval-every", "1024",
                  "--train-eval-episodes", "2", "--seed", "6", "--out", str(agent_dir)]
    assert cli_main(agent_args) == 0
    agent_digests = _tree_digests(agent_dir)
    assert cli_main(agent_args) == 0
    assert _tree_digests(agent_dir) == agent_digests, "agent outputs must reproduce"

    # bit-exact reload of every artifact kind
    dataset = load_dataset(data)
    reload_path = tmp_path / "again.ofhrl1"
    from ofhrl.data import save_dataset
    save_dataset(dataset, reload_path)
    assert reload_path.read_bytes() == first

    from ofhrl.world import load_world
    from ofhrl.cvae import load_codec
    world = load_world(world_dir / "world")
    rt = tmp_path / "w2"
    save_world(world, rt / "world")
    assert _tree_digests(rt / "world") == {k.split("/", 1)[1]: v
                                           for k, v in world_digests.items()
                                           if k.startswith("world/")}
    codec = load_codec(world_dir / "codec")
    save_codec(codec, rt / "codec")
    assert _tree_digests(rt / "codec") == {k.split("/", 1)[1]: v
                                           for k, v in world_digests.items()
                                           if k.startswith("codec/")}

    agent = OptionSet.load(agent_dir / "agent")
    agent.save(rt / "agent")
    saved = {k.split("/", 1)[1]: v for k, v in agent_digests.items()
             if k.startswith("agent/") and not k.endswith("kind.txt")}
    assert _tree_digests(rt / "agent") == saved
    _report("10 plumbing", "dataset/world/codec/agent round-trips bit-exact; "
            "identical configs reproduce identical output hashes")


# ---------------------------------------------------------------------------
# supporting online-reference bound from the spec's agent examples
# ---------------------------------------------------------------------------

def test_supporting_uof_online_reference():
    env = make_env("gripper-chain")
    cfg = UofConfig(episodes=3500, eval_every=3500, seed=0)
    agent = UofAgent(env, cfg, action_dim=env.spec.action_dim, latent=False, seed=0)
    runner = EpisodeRunner(make_env("gripper-chain"), seed=1)
    agent, _ = uof_train(agent, runner, cfg)
    res = evaluate(agent, env, episodes=30, seed=777, queried_goal=2)
    success = res["successes"][:, 2].mean()
    assert success >= 0.9, f"online goal-(iii) success {success:.2f} < 0.9"
    _report("supporting uof online", f"true-env goal-(iii) success {success:.2f} >= 0.9")
