"""Asynchronous advantage actor-critic training with decision masking.

With masking on, an agent that is not at a decision point is driven Forward
automatically and produces no experience. Rewards earned while driven are
added to the agent's most recent decision (semi-Markov credit), and its LSTM
state only advances when it actually decides.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from raillab.env.core import ActionKind, EnvState, N_MOVE_ACTIONS, Status, step
from raillab.env.gen import CurriculumTracker, default_curriculum, generate_env, validate_curriculum
from raillab.errors import DomainError, TrainingFault
from raillab.net import (
    LstmState, SharedModel, Trajectory, a3c_gradients, forward, init_params, zero_state,
)
from raillab.obs import OBS_DIM, is_decision_point, observe

log = logging.getLogger(__name__)

EVAL_SEED_OFFSET = 7_919_000


def derive_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass
class TrainerConfig:
    n_workers: int = 8
    total_decision_steps: int = 200_000
    t_max: int = 20
    gamma: float = 0.99
    lr: float = 1e-4
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    curriculum: list = field(default_factory=default_curriculum)
    seed: int = 0
    masking_enabled: bool = True
    eval_every: int = 10_000
    eval_episodes: int = 20
    eval_mode: str = "sample"
    use_lstm: bool = True

    def __post_init__(self):
        if self.n_workers < 1:
            raise DomainError("n_workers must be at least 1")
        if self.total_decision_steps < 0 or self.eval_every < 1 or self.t_max < 1:
            raise DomainError("budgets must be positive")
        if self.eval_episodes < 1:
            raise DomainError("eval_episodes must be positive")
        if self.eval_mode not in ("sample", "argmax"):
            raise DomainError(f"unknown eval mode {self.eval_mode!r}")
        validate_curriculum(self.curriculum)


@dataclass
class EvalRecord:
    decision_steps: int
    episodes: int
    arrival_rate: float
    mean_return: float
    stage: int
    wall_clock: float


@dataclass
class TrainMetrics:
    records: list = field(default_factory=list)
    params: object = None

    CSV_FIELDS = ("decision_steps", "episodes", "arrival_rate", "mean_return", "stage")

    def to_csv(self) -> str:
        lines = [",".join(self.CSV_FIELDS)]
        for r in self.records:
            lines.append(
                f"{r.decision_steps},{r.episodes},{r.arrival_rate:.6f},{r.mean_return:.6f},{r.stage}"
            )
        return "\n".join(lines) + "\n"

    def comparable(self):
        """Records without wall-clock time, for reproducibility checks."""
        return [(r.decision_steps, r.episodes, r.arrival_rate, r.mean_return, r.stage) for r in self.records]


# -- rollouts -----------------------------------------------------------------

def _sample(probs, rng, greedy):
    if greedy:
        return int(np.argmax(probs))
    return int(min(np.searchsorted(np.cumsum(probs), rng.random() * probs.sum(), side="right"), len(probs) - 1))


class Rollout:
    """Drives one episode, turning decisions into trajectory segments.

    ``step`` advances the environment one tick and returns the segments that
    closed during it: those that reached ``t_max`` records (bootstrapped from
    the value of the agent's new decision) and those ended by arrival or by
    the episode running out of time.
    """

    def __init__(self, env: EnvState, masking=True, t_max=20, use_lstm=True, observe_fn=observe):
        self.env = env
        self.masking = masking
        self.t_max = t_max
        self.observe_fn = observe_fn
        n = env.n_agents
        self.lstm = [zero_state() if use_lstm else None for _ in range(n)]
        self.open = [None] * n
        self.decisions = 0
        self.returns = np.zeros(n)
        self.last_actions = {}

    def _new_segment(self, aid):
        seg = Trajectory(init_state=self.lstm[aid])
        seg.agent = aid
        seg.steps = []
        self.open[aid] = seg
        return seg

    def deciding_agents(self):
        env = self.env
        out = []
        for a in env.agents:
            if a.status == Status.DONE:
                continue
            if not self.masking or is_decision_point(env, a.id):
                out.append(a.id)
        return out

    def step(self, params, rng, greedy=False):
        env = self.env
        closed = []
        actions = {a.id: ActionKind.FORWARD for a in env.agents if a.status != Status.DONE}
        deciders = self.deciding_agents()
        if deciders:
            obs = np.stack([self.observe_fn(env, i) for i in deciders])
            if params.use_lstm:
                state = LstmState(
                    np.stack([self.lstm[i].hidden for i in deciders]),
                    np.stack([self.lstm[i].cell for i in deciders]),
                )
            else:
                state = None
            probs, values, new_state = forward(params, obs, state)
            for k, aid in enumerate(deciders):
                seg = self.open[aid]
                if seg is not None and len(seg) >= self.t_max:
                    seg.bootstrap = float(values[k])
                    closed.append(seg)
                    seg = None
                if seg is None:
                    seg = self._new_segment(aid)
                action = _sample(probs[k], rng, greedy)
                seg.append(obs[k], action)
                seg.steps.append(env.step_count)
                actions[aid] = action
                if params.use_lstm:
                    self.lstm[aid] = LstmState(new_state.hidden[k], new_state.cell[k])
            self.decisions += len(deciders)
        self.last_actions = actions
        _, rewards, dones, _ = step(env, actions)
        for aid, r in rewards.items():
            self.returns[aid] += r
            seg = self.open[aid]
            if seg is not None and len(seg):
                seg.rewards[-1] += r
        for a in env.agents:
            seg = self.open[a.id]
            if seg is None:
                continue
            if dones[a.id] or env.done:
                seg.dones[-1] = True
                seg.bootstrap = 0.0
                closed.append(seg)
                self.open[a.id] = None
        closed.sort(key=lambda s: s.agent)
        return closed, len(deciders)

    def arrivals(self):
        return sum(a.status == Status.DONE for a in self.env.agents)


def masked_rollout(env: EnvState, params, lstm_states=None, rng=None, masking=True, t_max=20, greedy=False):
    """Run ``env`` to completion without learning; return every segment."""
    rng = rng if rng is not None else np.random.default_rng(0)
    ro = Rollout(env, masking=masking, t_max=t_max, use_lstm=params.use_lstm)
    if lstm_states is not None:
        ro.lstm = list(lstm_states)
    segments = []
    while not env.done:
        closed, _ = ro.step(params, rng, greedy)
        segments.extend(closed)
    return segments


# -- evaluation -----------------------------------------------------------------

@dataclass
class EpisodeStats:
    seed: int
    n_agents: int
    arrived: int
    mean_return: float
    steps: int
    decisions: int


@dataclass
class EvalResult:
    arrival_rate: float
    episodes: list
    replays: list = field(default_factory=list)

    @property
    def mean_return(self):
        return float(np.mean([e.mean_return for e in self.episodes]))


def evaluate(params, envs, mode="sample", masking=True, seed=0, record=False) -> EvalResult:
    """Play each environment once; ``mode`` is "sample" or "argmax".

    With ``record`` the result also carries one replay text per episode.
    """
    if not envs:
        raise DomainError("evaluate needs at least one environment")
    if mode not in ("sample", "argmax"):
        raise DomainError(f"unknown mode {mode!r}")
    from raillab.metrics import ReplayRecorder, arrival_rate

    episodes, replays = [], []
    for env in envs:
        env = env.clone()
        rng = np.random.default_rng([seed, env.seed])
        ro = Rollout(env, masking=masking, t_max=1 << 30, use_lstm=params.use_lstm)
        rec = ReplayRecorder(env) if record else None
        while not env.done:
            ro.step(params, rng, greedy=(mode == "argmax"))
            if rec is not None:
                rec.record(env, ro.last_actions)
        if rec is not None:
            replays.append(rec.text())
        episodes.append(EpisodeStats(
            env.seed, env.n_agents, ro.arrivals(), float(ro.returns.mean()),
            env.step_count, ro.decisions,
        ))
    return EvalResult(arrival_rate(episodes), episodes, replays)


def chain_reaction_probability(p_best, n_agents) -> float:
    """Chance that at least one of ``n_agents`` skips its best action."""
    if not 0.0 <= p_best <= 1.0:
        raise DomainError("p_best must lie in [0, 1]")
    if n_agents < 1:
        raise DomainError("n_agents must be at least 1")
    return 1.0 - p_best ** n_agents


def eval_envs(stage_params, n, seed):
    return [
        generate_env(stage_params.with_seed(derive_seed(seed, EVAL_SEED_OFFSET, k)))
        for k in range(n)
    ]


# -- training -------------------------------------------------------------------

class _Run:
    """Shared bookkeeping for one training run."""

    def __init__(self, config: TrainerConfig, shared: SharedModel, checkpoint_cb=None):
        self.config = config
        self.shared = shared
        self.tracker = CurriculumTracker(list(config.curriculum))
        self.lock = threading.Lock()
        self.consumed = 0
        self.episodes = 0
        self.next_eval = config.eval_every
        self.metrics = TrainMetrics()
        self.start = time.perf_counter()
        self.stop = threading.Event()
        self.fault = None
        self.checkpoint_cb = checkpoint_cb
        self._eval_cache = {}

    def _eval_set(self, stage_index):
        if stage_index not in self._eval_cache:
            params = self.config.curriculum[stage_index].params
            self._eval_cache[stage_index] = eval_envs(params, self.config.eval_episodes, self.config.seed)
        return self._eval_cache[stage_index]

    def evaluate_now(self, steps):
        params = self.shared.snapshot()
        stage = self.tracker.index
        result = evaluate(
            params, self._eval_set(stage), self.config.eval_mode,
            masking=self.config.masking_enabled, seed=self.config.seed,
        )
        rec = EvalRecord(
            steps, self.episodes, result.arrival_rate, result.mean_return, stage,
            time.perf_counter() - self.start,
        )
        self.metrics.records.append(rec)
        log.info("steps=%d arrival=%.3f return=%.3f stage=%d", steps, rec.arrival_rate, rec.mean_return, stage)
        if self.checkpoint_cb is not None:
            self.checkpoint_cb(steps, params)

    def consume(self, n):
        """Count decisions; returns the evaluation boundaries crossed."""
        with self.lock:
            self.consumed += n
            due = []
            while self.next_eval <= min(self.consumed, self.config.total_decision_steps):
                due.append(self.next_eval)
                self.next_eval += self.config.eval_every
            if self.consumed >= self.config.total_decision_steps:
                self.stop.set()
            return due


def _worker(run: _Run, worker_id: int):
    cfg = run.config
    rng = np.random.default_rng([cfg.seed, worker_id, 1])
    episode = 0
    try:
        while not run.stop.is_set():
            with run.lock:
                stage = run.tracker.stage
            env = generate_env(stage.params.with_seed(derive_seed(cfg.seed, worker_id, episode)))
            episode += 1
            ro = Rollout(env, masking=cfg.masking_enabled, t_max=cfg.t_max, use_lstm=cfg.use_lstm)
            local = run.shared.snapshot()
            while not env.done and not run.stop.is_set():
                closed, n = ro.step(local, rng)
                for seg in closed:
                    grads, _ = a3c_gradients(local, seg, cfg.gamma, cfg.value_coef, cfg.entropy_coef)
                    run.shared.apply(grads)
                if closed:
                    local = run.shared.snapshot()
                for boundary in run.consume(n):
                    run.evaluate_now(boundary)
            if env.done:
                with run.lock:
                    run.episodes += 1
                    if run.tracker.record(ro.arrivals() / env.n_agents):
                        log.info("curriculum advanced to stage %d", run.tracker.index)
    except TrainingFault as exc:
        run.fault = (worker_id, exc)
        run.stop.set()


def train(config: TrainerConfig, checkpoint_cb=None) -> TrainMetrics:
    """Train a shared policy; returns evaluation records and final params."""
    params = init_params(OBS_DIM, N_MOVE_ACTIONS, config.seed, use_lstm=config.use_lstm)
    shared = SharedModel(params, config.lr)
    run = _Run(config, shared, checkpoint_cb)
    run.evaluate_now(0)
    if config.total_decision_steps > 0:
        if config.n_workers == 1:
            _worker(run, 0)
        else:
            threads = [threading.Thread(target=_worker, args=(run, w), daemon=True) for w in range(config.n_workers)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
        if run.fault is not None:
            worker_id, exc = run.fault
            raise TrainingFault(f"worker {worker_id} aborted after {run.consumed} decisions: {exc}") from exc
        final = min(run.consumed, config.total_decision_steps)
        if run.metrics.records[-1].decision_steps != final:
            run.evaluate_now(final)
    run.metrics.records.sort(key=lambda r: r.decision_steps)
    run.metrics.params = shared.snapshot()
    return run.metrics
