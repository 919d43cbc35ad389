"""Multi-agent rail dynamics: movement, malfunctions, conflicts, rewards."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from enum import IntEnum
from fractions import Fraction

import numpy as np

from raillab.env.grid import DELTAS, RailGrid, check_rail
from raillab.errors import DomainError

# cell progress is tracked in twelfths so every allowed speed is exact
PROGRESS_UNITS = 12
SPEEDS = {Fraction(1): 12, Fraction(1, 2): 6, Fraction(1, 3): 4, Fraction(1, 4): 3}


class ActionKind(IntEnum):
    NOTHING = 0
    LEFT = 1
    FORWARD = 2
    RIGHT = 3
    STOP = 4


N_MOVE_ACTIONS = len(ActionKind)


class Status(IntEnum):
    READY = 0
    ACTIVE = 1
    DONE = 2


@dataclass(frozen=True)
class MalfunctionParams:
    rate: float = 0.0
    min_duration: int = 2
    max_duration: int = 10

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise DomainError(f"malfunction rate {self.rate} outside [0, 1]")
        if not 1 <= self.min_duration <= self.max_duration:
            raise DomainError("malfunction durations must satisfy 1 <= min <= max")


STRESS_MALFUNCTIONS = MalfunctionParams(rate=1 / 2000, min_duration=2, max_duration=10)


@dataclass
class AgentState:
    id: int
    start: tuple[int, int]
    start_heading: int
    target: tuple[int, int]
    speed: Fraction = Fraction(1)
    position: tuple[int, int] = None
    heading: int = None
    progress_units: int = 0
    malfunction_remaining: int = 0
    status: Status = Status.READY
    moving: bool = False

    def __post_init__(self):
        if self.position is None:
            self.position = self.start
        if self.heading is None:
            self.heading = self.start_heading

    @property
    def cell_progress(self) -> float:
        return self.progress_units / PROGRESS_UNITS

    @property
    def speed_units(self) -> int:
        return SPEEDS[self.speed]

    def as_record(self):
        return [
            self.id, list(self.position), int(self.heading), list(self.target),
            str(self.speed), self.progress_units, self.malfunction_remaining,
            int(self.status), self.moving,
        ]


def resolve_exit(moves, heading, action):
    """Outgoing heading chosen by a directional action, or None if illegal.

    Forward follows the track wherever the cell offers a single exit (curves,
    dead ends); at switches it means the straight branch.
    """
    if action == ActionKind.FORWARD:
        if len(moves) == 1:
            return moves[0]
        return heading if heading in moves else None
    if action == ActionKind.LEFT:
        h = (heading - 1) % 4
    else:
        h = (heading + 1) % 4
    return h if h in moves else None


@dataclass
class EnvState:
    grid: RailGrid
    agents: list[AgentState]
    max_steps: int
    seed: int
    malfunction: MalfunctionParams = field(default_factory=MalfunctionParams)
    step_count: int = 0
    rng: np.random.Generator = None

    def __post_init__(self):
        if self.rng is None:
            self.rng = np.random.default_rng(self.seed)

    @property
    def done(self) -> bool:
        return self.step_count >= self.max_steps or all(
            a.status == Status.DONE for a in self.agents
        )

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    def occupancy(self) -> dict:
        return {a.position: a.id for a in self.agents if a.status == Status.ACTIVE}

    def clone(self) -> "EnvState":
        return copy.deepcopy(self)

    def __deepcopy__(self, memo):
        # the grid is immutable and shared between copies
        new = EnvState.__new__(EnvState)
        new.grid = self.grid
        new.agents = [copy.copy(a) for a in self.agents]
        new.max_steps = self.max_steps
        new.seed = self.seed
        new.malfunction = self.malfunction
        new.step_count = self.step_count
        new.rng = copy.deepcopy(self.rng, memo)
        return new

    def state_bytes(self) -> bytes:
        record = {
            "grid": self.grid.digest(),
            "step": self.step_count,
            "max_steps": self.max_steps,
            "agents": [a.as_record() for a in self.agents],
            "rng": self.rng.bit_generator.state,
        }
        return json.dumps(record, sort_keys=True, default=int).encode()

    def state_hash(self) -> str:
        return hashlib.sha256(self.state_bytes()).hexdigest()


def default_max_steps(grid: RailGrid) -> int:
    return 4 * (grid.width + grid.height)


def reset(grid, agents, max_steps=None, seed=0, malfunction=None) -> EnvState:
    """Place agents in Ready status.

    ``agents`` is a list of ``(start, heading, target, speed)`` tuples.
    """
    roster = []
    starts = set()
    for i, (start, heading, target, speed) in enumerate(agents):
        start, target = tuple(int(x) for x in start), tuple(int(x) for x in target)
        try:
            check_rail(grid, start)
            check_rail(grid, target)
        except DomainError as exc:
            raise DomainError(f"agent {i}: {exc}") from None
        if start in starts:
            raise DomainError(f"agent {i}: start {start} already taken")
        if start == target:
            raise DomainError(f"agent {i}: start equals target")
        if not grid.moves[grid.idx(start)][int(heading)]:
            raise DomainError(f"agent {i}: heading {int(heading)} not valid at {start}")
        speed = Fraction(speed).limit_denominator(12)
        if speed not in SPEEDS:
            raise DomainError(f"agent {i}: unsupported speed {speed}")
        starts.add(start)
        roster.append(AgentState(i, start, int(heading), target, speed))
    if not roster:
        raise DomainError("at least one agent is required")
    if max_steps is None:
        max_steps = default_max_steps(grid)
    if max_steps < 1:
        raise DomainError("max_steps must be positive")
    return EnvState(grid, roster, int(max_steps), int(seed), malfunction or MalfunctionParams())


def step(state: EnvState, actions):
    """Advance one tick in place.

    Returns ``(state, rewards, done, info)`` keyed by agent id. Agents are
    resolved in ascending id order against live occupancy, so a head-on swap
    blocks both trains.
    """
    if state.done:
        raise DomainError("episode already finished")
    ids = {a.id for a in state.agents}
    for k in actions:
        if k not in ids:
            raise DomainError(f"action for unknown agent {k}")
    grid = state.grid
    moves = grid.moves
    width = grid.width
    penalty = -1.0 / state.max_steps
    mal = state.malfunction
    occ = state.occupancy()
    rewards, info = {}, {}

    for agent in state.agents:
        aid = agent.id
        flags = {"invalid": False, "blocked": False, "malfunction": False, "arrived": False}
        info[aid] = flags
        if agent.status == Status.DONE:
            rewards[aid] = 0.0
            continue
        rewards[aid] = penalty
        if aid not in actions:
            raise DomainError(f"missing action for agent {aid}")
        action = ActionKind(int(actions[aid]))

        if agent.status == Status.READY:
            if action == ActionKind.FORWARD:
                if agent.start in occ:
                    flags["blocked"] = True
                else:
                    agent.status = Status.ACTIVE
                    agent.position = agent.start
                    agent.heading = agent.start_heading
                    agent.progress_units = 0
                    agent.moving = True
                    occ[agent.start] = aid
            elif action in (ActionKind.LEFT, ActionKind.RIGHT):
                flags["invalid"] = True
            continue

        if agent.malfunction_remaining == 0 and mal.rate > 0 and state.rng.random() < mal.rate:
            agent.malfunction_remaining = int(
                state.rng.integers(mal.min_duration, mal.max_duration + 1)
            )
        if agent.malfunction_remaining > 0:
            agent.malfunction_remaining -= 1
            flags["malfunction"] = True
            continue

        if action == ActionKind.STOP:
            agent.moving = False
            continue
        if action == ActionKind.NOTHING:
            if not agent.moving:
                continue
            action = ActionKind.FORWARD

        progress = agent.progress_units + agent.speed_units
        if progress < PROGRESS_UNITS:
            agent.progress_units = progress
            agent.moving = True
            continue
        r, c = agent.position
        out = resolve_exit(moves[r * width + c][agent.heading], agent.heading, action)
        if out is None:
            flags["invalid"] = True
            agent.moving = False
            continue
        agent.moving = True
        nxt = (r + DELTAS[out][0], c + DELTAS[out][1])
        if nxt in occ:
            flags["blocked"] = True
            continue
        del occ[agent.position]
        agent.position = nxt
        agent.heading = out
        agent.progress_units = 0
        if nxt == agent.target:
            agent.status = Status.DONE
            agent.moving = False
            rewards[aid] += 1.0
            flags["arrived"] = True
        else:
            occ[nxt] = aid

    state.step_count += 1
    done = {a.id: a.status == Status.DONE for a in state.agents}
    return state, rewards, done, info
