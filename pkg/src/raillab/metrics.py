"""Evaluation summaries, ablation runs and episode replay files."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace
from fractions import Fraction

from raillab.env.core import MalfunctionParams, reset, step
from raillab.env.grid import RailGrid
from raillab.errors import DomainError, ReplayError

REPLAY_FORMAT = "raillab-replay"
REPLAY_VERSION = 1


def arrival_rate(episodes) -> float:
    """Arrived agents over all agents, pooled across episodes."""
    total = sum(e.n_agents for e in episodes)
    if total == 0:
        raise DomainError("arrival rate of zero agents is undefined")
    return sum(e.arrived for e in episodes) / total


# -- ablations -------------------------------------------------------------------

AXES = ("masking", "lstm")


@dataclass
class AblationReport:
    axis: str
    label_on: str
    label_off: str
    arrival_on: float
    arrival_off: float
    seeds: tuple
    per_seed: list

    @property
    def absolute_delta(self) -> float:
        return self.arrival_on - self.arrival_off

    @property
    def relative_delta(self) -> float:
        if self.arrival_off == 0:
            return float("inf") if self.arrival_on > 0 else 0.0
        return self.absolute_delta / self.arrival_off

    def summary(self) -> str:
        return (
            f"{self.axis}: {self.label_on}={self.arrival_on:.3f} {self.label_off}={self.arrival_off:.3f} "
            f"delta={self.absolute_delta:+.3f} ({self.relative_delta:+.1%}) over seeds {list(self.seeds)}"
        )

    def to_dict(self):
        d = asdict(self)
        d["absolute_delta"] = self.absolute_delta
        d["relative_delta"] = self.relative_delta
        return d


def config_hash(config) -> str:
    d = asdict(config)
    d["curriculum"] = [s.to_dict() for s in config.curriculum]
    return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:16]


def final_arrival(metrics, tail=1) -> float:
    recs = metrics.records[-tail:]
    return sum(r.arrival_rate for r in recs) / len(recs)


def run_ablation(base_config, axis, seeds=(0, 1, 2), tail=1, train_fn=None) -> AblationReport:
    """Train both variants of ``axis`` with identical budgets and seeds.

    Each variant is evaluated with its own settings on the same evaluation
    environments (they share the run seed). ``tail`` averages the last few
    evaluation rows of each run.
    """
    if axis not in AXES:
        raise DomainError(f"unknown ablation axis {axis!r}; expected one of {AXES}")
    if train_fn is None:
        from raillab.trainer import train as train_fn
    key = {"masking": "masking_enabled", "lstm": "use_lstm"}[axis]
    on, off, per_seed = [], [], []
    for seed in seeds:
        row = {"seed": seed}
        for flag, tag in ((True, "on"), (False, "off")):
            cfg = replace(base_config, seed=seed, **{key: flag})
            metrics = train_fn(cfg)
            last = metrics.records[-1]
            row[tag] = final_arrival(metrics, tail)
            row[f"episodes_{tag}"] = last.episodes
            row[f"decisions_{tag}"] = last.decision_steps
            row[f"config_{tag}"] = config_hash(cfg)
        on.append(row["on"])
        off.append(row["off"])
        per_seed.append(row)
    labels = {"masking": ("masked", "unmasked"), "lstm": ("lstm", "feedforward")}[axis]
    return AblationReport(
        axis, labels[0], labels[1], sum(on) / len(on), sum(off) / len(off), tuple(seeds), per_seed
    )


# -- replay ---------------------------------------------------------------------

def _roster(env):
    return [
        {
            "start": list(a.start),
            "heading": int(a.start_heading),
            "target": list(a.target),
            "speed": str(a.speed),
        }
        for a in env.agents
    ]


def replay_header(env) -> dict:
    """Everything needed to rebuild ``env`` in its just-reset state."""
    if env.step_count:
        raise DomainError("replay recording must start from a freshly reset environment")
    m = env.malfunction
    return {
        "format": REPLAY_FORMAT,
        "version": REPLAY_VERSION,
        "grid": env.grid.to_text(),
        "grid_digest": env.grid.digest(),
        "seed": env.seed,
        "max_steps": env.max_steps,
        "malfunction": {"rate": m.rate, "min_duration": m.min_duration, "max_duration": m.max_duration},
        "agents": _roster(env),
        "initial_hash": env.state_hash(),
    }


def env_from_header(header):
    try:
        grid = RailGrid.from_text(header["grid"])
        if grid.digest() != header["grid_digest"]:
            raise ReplayError("grid digest mismatch", "header")
        roster = [
            (tuple(a["start"]), int(a["heading"]), tuple(a["target"]), Fraction(a["speed"]))
            for a in header["agents"]
        ]
        mal = MalfunctionParams(**header["malfunction"])
        return reset(grid, roster, max_steps=header["max_steps"], seed=header["seed"], malfunction=mal)
    except KeyError as exc:
        raise ReplayError(f"header missing field {exc}", "header") from None


class ReplayRecorder:
    """Collects per-step actions and state hashes as JSON lines."""

    def __init__(self, env):
        self.lines = [json.dumps(replay_header(env), sort_keys=True)]

    def record(self, env, actions):
        self.lines.append(json.dumps(
            {"t": env.step_count, "actions": {str(k): int(v) for k, v in sorted(actions.items())},
             "hash": env.state_hash()},
            sort_keys=True,
        ))

    def text(self) -> str:
        return "\n".join(self.lines) + "\n"


def record_episode(env, policy) -> str:
    """Run ``env`` to completion with ``policy(env) -> actions``; return replay text."""
    rec = ReplayRecorder(env)
    while not env.done:
        actions = policy(env)
        step(env, actions)
        rec.record(env, actions)
    return rec.text()


@dataclass
class ReplayResult:
    steps: int
    final_hash: str
    env: object


def replay(text: str) -> ReplayResult:
    """Re-simulate a replay, checking the state hash after every step."""
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise ReplayError("empty replay file", "line 1")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ReplayError(f"unreadable header: {exc.msg}", "line 1") from None
    if header.get("format") != REPLAY_FORMAT or header.get("version") != REPLAY_VERSION:
        raise ReplayError("not a version-1 replay file", "line 1")
    env = env_from_header(header)
    if env.state_hash() != header.get("initial_hash"):
        raise ReplayError("initial state does not match header", "line 1")
    for n, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            actions = {int(k): int(v) for k, v in rec["actions"].items()}
            expected = rec["hash"]
        except (json.JSONDecodeError, KeyError, AttributeError, ValueError):
            raise ReplayError("truncated or malformed step record", f"line {n}") from None
        if env.done:
            raise ReplayError("step recorded after the episode ended", f"line {n}")
        try:
            step(env, actions)
        except DomainError as exc:
            raise ReplayError(f"step rejected: {exc}", f"line {n}") from None
        if env.state_hash() != expected:
            raise ReplayError(f"state hash diverged at step {env.step_count}", f"line {n}")
    if not env.done:
        raise ReplayError("replay ends before the episode finished", f"line {len(lines) + 1}")
    return ReplayResult(env.step_count, env.state_hash(), env)
