"""End-to-end acceptance checks at their stated tolerances and time limits.

Each test records a PASS/FAIL line (shown in the terminal summary) and then
asserts, so a failing criterion also fails the run.
"""

import json
import time

import numpy as np

from raillab.cli import main
from raillab.comm import CommConfig, random_route_baseline, train_comm, transcript_variability
from raillab.env.core import Status, step
from raillab.env.gen import CurriculumStage, GeneratorParams, generate_env
from raillab.env.grid import shortest_path_distance
from raillab.metrics import ReplayRecorder, replay, run_ablation
from raillab.net import LstmState, Trajectory, a3c_gradients, init_params
from raillab.obs import OBS_DIM, is_decision_point, observe
from raillab.trainer import TrainerConfig, chain_reaction_probability

from oracles import bfs_distance, gradient_check

MINUTE = 60.0


def test_chain_reaction_probability(criterion):
    value = chain_reaction_probability(0.9, 10)
    ok = abs(value - 0.6513215599) <= 1e-9
    assert criterion("chain reaction", ok, f"P(0.9, 10) = {value:.10f} (expected 0.6513215599 +- 1e-9)")


def _trajectory(rng, length=5, input_dim=6, n_actions=3):
    traj = Trajectory(init_state=LstmState(rng.normal(0, 0.3, 64), rng.normal(0, 0.3, 64)))
    for _ in range(length):
        traj.append(rng.random(input_dim), int(rng.integers(n_actions)), None)
        traj.rewards[-1] = float(rng.normal())
    traj.bootstrap = float(rng.normal())
    return traj


def test_gradient_fidelity(criterion):
    start = time.perf_counter()
    worst, worst_block = 0.0, None
    for seed in range(10):
        rng = np.random.default_rng(seed)
        params = init_params(6, 3, seed=seed)
        traj = _trajectory(rng)
        grads, _ = a3c_gradients(params, traj, 0.99, 0.5, 0.01)
        errors = gradient_check(params, traj, 0.99, 0.5, 0.01, grads, rng)
        assert set(errors) == set(params.names)
        for name, err in errors.items():
            if err > worst:
                worst, worst_block = err, f"{name} (seed {seed})"
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < MINUTE
    assert criterion(
        "gradient fidelity", ok,
        f"10 seeds, every block, max relative error {worst:.2e} at {worst_block}; {elapsed:.1f}s (< 60s)",
    )


def _occupancy_ok(env):
    cells = [a.position for a in env.agents if a.status == Status.ACTIVE]
    return len(cells) == len(set(cells))


def _obs_ok(env, agent_ids):
    for aid in agent_ids:
        o = observe(env, aid)
        if o.shape != (OBS_DIM,) or not (np.all(o >= 0.0) and np.all(o <= 1.0)):
            return False
    return True


def test_environment_fuzz(criterion):
    """10,000 random-action episodes: 1,000 generated grids x 10 action streams.

    Occupancy is checked after every step. Observations are checked for every
    deciding agent at every step, and for every live agent at every step in
    one episode out of ten. That same tenth of the episodes is recorded and
    replayed, and must reproduce every state hash.
    """
    start = time.perf_counter()
    n_grids, per_grid = 1000, 10
    episodes = occupancy_bad = obs_bad = replay_bad = replayed = steps = 0
    for g in range(n_grids):
        rate = 0.01 if g % 2 else 0.0
        base = generate_env(GeneratorParams(25, 25, 4, seed=g, malfunction_rate=rate, speeds=(1, 0.5)))
        for k in range(per_grid):
            env = base.clone()
            rng = np.random.default_rng([g, k])
            full = k == 0
            rec = ReplayRecorder(env) if full else None
            while not env.done:
                live = [a.id for a in env.agents if a.status != Status.DONE]
                check = live if full else [i for i in live if is_decision_point(env, i)]
                if not _obs_ok(env, check):
                    obs_bad += 1
                actions = {i: int(rng.integers(5)) for i in live}
                step(env, actions)
                steps += 1
                if rec is not None:
                    rec.record(env, actions)
                if not _occupancy_ok(env):
                    occupancy_bad += 1
            if rec is not None:
                replayed += 1
                if replay(rec.text()).final_hash != env.state_hash():
                    replay_bad += 1
            episodes += 1
    elapsed = time.perf_counter() - start
    ok = episodes == 10_000 and occupancy_bad == obs_bad == replay_bad == 0 and elapsed < 10 * MINUTE
    assert criterion(
        "environment fuzz", ok,
        f"{episodes} episodes / {steps} steps on 25x25/4: occupancy violations {occupancy_bad}, "
        f"out-of-range observations {obs_bad}, replay mismatches {replay_bad}/{replayed}; "
        f"{elapsed:.0f}s (< 600s)",
    )


def test_path_oracle(criterion):
    start = time.perf_counter()
    pairs = mismatches = 0
    for seed in range(100):
        env = generate_env(GeneratorParams(15, 15, 3, seed=1000 + seed, rails_per_link=1 + seed % 2))
        grid = env.grid
        for target in sorted({a.target for a in env.agents}):
            for cell in grid.rail_cells():
                for h in grid.valid_headings(cell):
                    pairs += 1
                    if shortest_path_distance(grid, (cell, h), target) != bfs_distance(grid.masks, (cell, h), target):
                        mismatches += 1
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 5 * MINUTE
    assert criterion(
        "path oracle", ok,
        f"100 grids 15x15, {pairs} (cell, heading, target) queries, {mismatches} mismatches; {elapsed:.0f}s (< 300s)",
    )


def _ablation_base(budget, **kw):
    return TrainerConfig(
        n_workers=1, total_decision_steps=budget, eval_every=budget // 2, eval_episodes=40, lr=7e-4,
        curriculum=[CurriculumStage(GeneratorParams(25, 25, 4))], **kw,
    )


def test_masking_ablation(criterion):
    start = time.perf_counter()
    report = run_ablation(_ablation_base(25_000), "masking", seeds=(0, 1, 2))
    elapsed = time.perf_counter() - start
    gap = report.absolute_delta
    per_seed = ", ".join(f"seed {r['seed']}: {r['on']:.3f} vs {r['off']:.3f}" for r in report.per_seed)
    ok = gap >= 0.15 and elapsed <= 60 * MINUTE
    assert criterion(
        "masking ablation", ok,
        f"25x25/4, 25k decisions each: {report.summary()} [{per_seed}]; gap {gap * 100:.1f} pp (>= 15); "
        f"{elapsed:.0f}s (<= 3600s)",
    )


def test_communication_experiment(criterion):
    start = time.perf_counter()
    talk = train_comm(CommConfig(episodes=30_000, seed=0))
    mute = train_comm(CommConfig(episodes=10_000, seed=0, comm_enabled=False))
    elapsed = time.perf_counter() - start
    on, off = talk.success_rate(1000), mute.success_rate(1000)
    hist = talk.round_histogram(1000)
    talked = sum(v for k, v in hist.items() if k >= 1)
    one_to_four = sum(v for k, v in hist.items() if 1 <= k <= 4)
    share = one_to_four / talked if talked else 0.0
    ok = on >= 0.85 and off <= 0.60 and elapsed <= 60 * MINUTE
    assert criterion(
        "communication", ok,
        f"trailing-1000 success with comm {on:.3f} (>= 0.85, 30k episodes), without {off:.3f} (<= 0.60, "
        f"random-route baseline {random_route_baseline():.2f}); rounds of successful episodes {hist}, "
        f"{share:.0%} of talking episodes in 1-4 rounds; transcript variability "
        f"{transcript_variability(talk.log):.2f}; {elapsed:.0f}s (<= 3600s)",
    )


def test_lstm_ablation_report(criterion):
    report = run_ablation(_ablation_base(10_000), "lstm", seeds=(0, 1, 2))
    d = report.to_dict()
    ok = all(k in d for k in ("absolute_delta", "relative_delta")) and 0 <= report.arrival_on <= 1
    assert criterion(
        "LSTM ablation (report only)", ok,
        f"25x25/4, 10k decisions each: {report.summary()}; absolute {report.absolute_delta:+.3f}, "
        f"relative {report.relative_delta:+.1%}",
    )


def test_single_worker_determinism(criterion, tmp_path):
    config = {
        "trainer": {"n_workers": 1, "total_decision_steps": 600, "eval_every": 200, "eval_episodes": 3,
                    "seed": 4},
        "curriculum": [{"params": {"width": 15, "height": 15, "n_agents": 3}}],
        "comm": {"episodes": 200, "log_every": 100, "window": 100},
    }
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps(config))
    outs = []
    for name in ("a", "b"):
        root = tmp_path / name
        assert main(["train", "--config", str(cfg), "--out", str(root / "train")]) == 0
        assert main(["eval", "--checkpoint", str(root / "train" / "final.ckpt"), "--envs", "3", "--width", "15",
                     "--height", "15", "--agents", "3", "--out", str(root / "eval")]) == 0
        assert main(["comm-train", "--config", str(cfg), "--out", str(root / "comm")]) == 0
        outs.append(root)
    compared, differing = 0, []
    skip = {"wallclock.csv", "wallclock.txt"}
    for path in sorted(p for p in outs[0].rglob("*") if p.is_file()):
        if path.name in skip:
            continue
        twin = outs[1] / path.relative_to(outs[0])
        compared += 1
        if not twin.exists() or twin.read_bytes() != path.read_bytes():
            differing.append(str(path.relative_to(outs[0])))
    ok = compared > 0 and not differing
    assert criterion(
        "determinism", ok,
        f"train, eval and comm-train repeated: {compared} files compared (metrics, checkpoints, replays, "
        f"transcripts), {len(differing)} differ {differing[:3]}",
    )
