"""Two trains, one single-track section, and a learned talk channel.

The trains start at opposite ends of a 2x7 layout and must swap places. Row 0
is the main line; row 1 is a detour between switches at columns 1 and 5. At
the switches each train may start a communication loop in which the two
alternately append symbols to a shared buffer until both have sent EOT, and
only then pick a route.

Each train observes the world in its own reflected frame, so both see the
detour on their right and cannot tell which physical train they are.
"""

from __future__ import annotations

import logging
from collections import Counter, deque
from dataclasses import dataclass, field

import numpy as np

from raillab.env.core import ActionKind, Status, reset, step
from raillab.env.grid import GridBuilder
from raillab.errors import DomainError
from raillab.net import SharedModel, Trajectory, a3c_gradients, forward, init_params, zero_state
from raillab.obs import N_NODES, NODE_DIM, OBS_DIM, _trace, is_decision_point, observe

log = logging.getLogger(__name__)

N_SYMBOLS = 5
FIRST_SYMBOL = 5
EOT = FIRST_SYMBOL + N_SYMBOLS
N_COMM_ACTIONS = EOT + 1
BUFFER_CAPACITY = 8
MAX_ROUNDS = 8
SYMBOL_DIM = N_SYMBOLS + 2  # one-hot over C1..C5, EOT plus a "written by me" bit
BUFFER_DIM = BUFFER_CAPACITY * SYMBOL_DIM
COMM_OBS_DIM = OBS_DIM + BUFFER_DIM + 1
TREE_DIM = N_NODES * NODE_DIM
# The only thing telling the two trains apart is which buffer symbols they
# wrote themselves. With the narrow default init that difference barely
# reaches the logits and the symmetric start is never left.
RECTIFIER_GAIN = float(np.sqrt(6.0))

LAYOUT_WIDTH, LAYOUT_HEIGHT = 7, 2
SPAN = ((0, 2), (0, 3), (0, 4))
# physical trains: (start, heading, target)
TRAINS = (((0, 0), 1, (0, 6)), ((0, 6), 3, (0, 0)))


def symbol_name(action) -> str:
    return "EOT" if action == EOT else f"C{action - FIRST_SYMBOL + 1}"


def is_symbol(action) -> bool:
    return FIRST_SYMBOL <= action < EOT


def comm_layout():
    b = GridBuilder(LAYOUT_WIDTH, LAYOUT_HEIGHT)
    b.add_path([(0, c) for c in range(7)])
    b.add_path([(0, 0), (0, 1)] + [(1, c) for c in range(1, 6)] + [(0, 5), (0, 6)], node_ends=False)
    return b.build()


_LAYOUT = None


def layout():
    global _LAYOUT
    if _LAYOUT is None:
        _LAYOUT = comm_layout()
    return _LAYOUT


@dataclass
class CommEnvState:
    env: object
    slot_agent: tuple
    comm_enabled: bool
    rng: np.random.Generator
    seed: int
    phase: str = "move"
    buffer: deque = field(default_factory=lambda: deque(maxlen=BUFFER_CAPACITY))
    eot_flags: list = field(default_factory=lambda: [False, False])
    round_count: int = 0
    turn: int = None
    turns_in_round: int = 0
    loop_used: bool = False
    forced_end: bool = False
    transcript: list = field(default_factory=list)
    rounds_total: int = 0
    outcome: str = None

    @property
    def done(self):
        return self.phase == "done"

    @property
    def success(self):
        return self.outcome == "arrived"

    def agent_slot(self, agent_id):
        return self.slot_agent.index(agent_id)

    def mirrored(self, agent_id):
        # train 1 heads west; its frame is the left-right reflection
        return agent_id == 1

    def acting(self):
        if self.phase == "done":
            return []
        if self.phase == "loop":
            return [self.agent_slot(self.turn)]
        return [
            self.agent_slot(a.id) for a in self.env.agents
            if a.status != Status.DONE and is_decision_point(self.env, a.id)
        ]


def _route_action(action, mirrored):
    if mirrored and action in (ActionKind.LEFT, ActionKind.RIGHT):
        return ActionKind.RIGHT if action == ActionKind.LEFT else ActionKind.LEFT
    return action


def _facing(env, a, b):
    geo = _trace(env.grid, (a.position, a.heading), a.target)
    return b.position in geo.cells


def _collided(env):
    a, b = env.agents
    if a.status != Status.ACTIVE or b.status != Status.ACTIVE:
        return False
    return _facing(env, a, b) and _facing(env, b, a)


def _advance(state: CommEnvState):
    """Drive both trains Forward until someone must decide or the episode ends."""
    rewards = [0.0, 0.0]
    env = state.env
    while True:
        if _collided(env):
            state.outcome = "collision"
            rewards = [-1.0, -1.0]
            break
        if all(a.status == Status.DONE for a in env.agents):
            state.outcome = "arrived"
            rewards = [1.0, 1.0]
            break
        if env.done:
            state.outcome = "timeout"
            break
        if state.acting():
            return rewards
        step(env, {a.id: ActionKind.FORWARD for a in env.agents if a.status != Status.DONE})
    state.phase = "done"
    return rewards


def comm_env(seed=0):
    """The layout with both trains waiting at their start cells."""
    return reset(layout(), [(s, h, t, 1) for s, h, t in TRAINS], seed=int(seed))


def comm_reset(seed, comm_enabled=True) -> CommEnvState:
    rng = np.random.default_rng([int(seed), 17])
    env = comm_env(seed)
    slots = (0, 1) if rng.integers(2) == 0 else (1, 0)
    state = CommEnvState(env, slots, comm_enabled, rng, int(seed))
    step(env, {0: ActionKind.FORWARD, 1: ActionKind.FORWARD})
    _advance(state)
    return state


def legal_mask(state: CommEnvState, slot) -> np.ndarray:
    mask = np.zeros(N_COMM_ACTIONS, bool)
    if slot not in state.acting():
        return mask
    if state.phase == "loop":
        mask[FIRST_SYMBOL:] = True
        return mask
    agent = state.env.agents[state.slot_agent[slot]]
    if agent.status == Status.READY:
        mask[ActionKind.FORWARD] = True
    else:
        opts = state.env.grid.moves[state.env.grid.idx(agent.position)][agent.heading]
        for act in (ActionKind.LEFT, ActionKind.FORWARD, ActionKind.RIGHT):
            from raillab.env.core import resolve_exit

            if resolve_exit(opts, agent.heading, _route_action(act, state.mirrored(agent.id))) is not None:
                mask[act] = True
    if state.comm_enabled and not state.loop_used:
        mask[FIRST_SYMBOL:EOT] = True
    return mask


def encode_buffer(buffer, observer) -> np.ndarray:
    out = np.zeros(BUFFER_DIM)
    for k, (symbol, writer) in enumerate(buffer):
        base = k * SYMBOL_DIM
        out[base + symbol - FIRST_SYMBOL] = 1.0
        out[base + SYMBOL_DIM - 1] = 1.0 if writer == observer else 0.0
    return out


def comm_observation(state: CommEnvState, slot) -> np.ndarray:
    aid = state.slot_agent[slot]
    agent = state.env.agents[aid]
    out = np.zeros(COMM_OBS_DIM)
    if agent.status != Status.DONE:
        out[:OBS_DIM] = observe(state.env, aid, mirror=state.mirrored(aid))
    if state.phase == "loop":
        out[:TREE_DIM] = 0.0
        out[-1] = 1.0
    out[OBS_DIM:OBS_DIM + BUFFER_DIM] = encode_buffer(state.buffer, aid)
    return out


def comm_step(state: CommEnvState, actions):
    """Apply the acting slots' actions.

    Returns ``(state, rewards, done)`` with rewards indexed by slot.
    """
    if state.done:
        raise DomainError("episode already finished")
    acting = state.acting()
    for slot in acting:
        if slot not in actions:
            raise DomainError(f"slot {slot} must act")
    for slot, act in actions.items():
        if slot not in acting:
            raise DomainError(f"slot {slot} is not due to act")
        if not legal_mask(state, slot)[int(act)]:
            if state.phase == "loop":
                raise DomainError(f"action {int(act)} is not a symbol; movement is frozen during the loop")
            raise DomainError(f"illegal action {int(act)} for slot {slot}")

    if state.phase == "loop":
        (slot,) = acting
        symbol = int(actions[slot])
        writer = state.turn
        state.buffer.append((symbol, writer))
        state.transcript.append(symbol)
        if symbol == EOT:
            state.eot_flags[writer] = True
        state.turn = 1 - writer
        state.turns_in_round += 1
        if state.turns_in_round == 2:
            state.round_count += 1
            state.turns_in_round = 0
        if all(state.eot_flags) or state.round_count >= MAX_ROUNDS:
            if not all(state.eot_flags):
                state.forced_end = True
                state.eot_flags = [True, True]
            if state.turns_in_round:
                state.round_count += 1
                state.turns_in_round = 0
            state.rounds_total += state.round_count
            state.phase = "move"
        return state, [0.0, 0.0], False

    initiators = [s for s in acting if is_symbol(int(actions[s]))]
    if initiators:
        first = initiators[0] if len(initiators) == 1 else int(state.rng.integers(2))
        state.phase = "loop"
        state.loop_used = True
        state.turn = state.slot_agent[first]
        state.eot_flags = [False, False]
        state.round_count = 0
        state.turns_in_round = 0
        state.buffer.clear()
        return state, [0.0, 0.0], False

    env_actions = {}
    for a in state.env.agents:
        if a.status == Status.DONE:
            continue
        slot = state.agent_slot(a.id)
        if slot in actions:
            env_actions[a.id] = _route_action(ActionKind(int(actions[slot])), state.mirrored(a.id))
        else:
            env_actions[a.id] = ActionKind.FORWARD
    step(state.env, env_actions)
    state.loop_used = False
    by_agent = _advance(state)
    rewards = [by_agent[state.slot_agent[s]] for s in (0, 1)]
    return state, rewards, state.done


# -- training ------------------------------------------------------------------

@dataclass
class CommConfig:
    episodes: int = 100_000
    lr: float = 3e-4
    gamma: float = 0.99
    seed: int = 0
    comm_enabled: bool = True
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    log_every: int = 1_000
    window: int = 1_000
    use_lstm: bool = False
    init_gain: float = RECTIFIER_GAIN

    def __post_init__(self):
        if self.init_gain <= 0:
            raise DomainError("init_gain must be positive")
        if self.episodes < 0 or self.log_every < 1 or self.window < 1:
            raise DomainError("episode counts must be positive")


@dataclass
class EpisodeLog:
    episode: int
    seed: int
    success: bool
    rounds: int
    symbols: tuple
    forced: bool = False

    def line(self) -> str:
        syms = " ".join(symbol_name(s) for s in self.symbols) or "-"
        return f"{self.seed}\t{int(self.success)}\t{self.rounds}\t{syms}"


@dataclass
class CommResult:
    curve: list
    log: list
    params: object

    def success_rate(self, window=1000) -> float:
        tail = self.log[-window:]
        return sum(e.success for e in tail) / len(tail) if tail else 0.0

    def round_histogram(self, window=None, successful_only=True) -> dict:
        logs = self.log if window is None else self.log[-window:]
        return dict(sorted(Counter(e.rounds for e in logs if e.success or not successful_only).items()))

    def curve_csv(self) -> str:
        lines = ["episode,success_rate"]
        lines += [f"{ep},{rate:.6f}" for ep, rate in self.curve]
        return "\n".join(lines) + "\n"

    def transcript_text(self) -> str:
        return "".join(e.line() + "\n" for e in self.log)


def play_episode(params, seed, comm_enabled, rng, greedy=False):
    """One episode with the shared policy; returns (state, per-slot trajectories)."""
    state = comm_reset(seed, comm_enabled)
    lstm = [zero_state(), zero_state()] if params.use_lstm else [None, None]
    trajs = [Trajectory(init_state=lstm[0]), Trajectory(init_state=lstm[1])]
    while not state.done:
        actions = {}
        for slot in state.acting():
            obs = comm_observation(state, slot)
            mask = legal_mask(state, slot)
            probs, _, lstm[slot] = forward(params, obs, lstm[slot], mask=mask)
            if greedy:
                act = int(np.argmax(probs))
            else:
                act = int(min(np.searchsorted(np.cumsum(probs), rng.random(), side="right"), N_COMM_ACTIONS - 1))
                while not mask[act]:
                    act -= 1
            trajs[slot].append(obs, act, mask)
            actions[slot] = act
        _, rewards, done = comm_step(state, actions)
        for slot in (0, 1):
            if len(trajs[slot]):
                trajs[slot].rewards[-1] += rewards[slot]
                if done:
                    trajs[slot].dones[-1] = True
    return state, trajs


def train_comm(config: CommConfig) -> CommResult:
    n_actions = N_COMM_ACTIONS
    params = init_params(COMM_OBS_DIM, n_actions, config.seed, use_lstm=config.use_lstm, gain=config.init_gain)
    shared = SharedModel(params, config.lr)
    rng = np.random.default_rng([config.seed, 23])
    logs, curve = [], []
    wins = deque(maxlen=config.window)
    for ep in range(config.episodes):
        seed = config.seed * 1_000_003 + ep
        state, trajs = play_episode(shared.params, seed, config.comm_enabled, rng)
        for traj in trajs:
            if len(traj):
                grads, _ = a3c_gradients(shared.params, traj, config.gamma, config.value_coef, config.entropy_coef)
                shared.apply(grads)
        rounds = state.rounds_total
        logs.append(EpisodeLog(ep, seed, state.success, rounds, tuple(state.transcript), state.forced_end))
        wins.append(state.success)
        if (ep + 1) % config.log_every == 0:
            rate = sum(wins) / len(wins)
            curve.append((ep + 1, rate))
            log.info("episode %d success %.3f", ep + 1, rate)
    return CommResult(curve, logs, shared.snapshot())


def random_route_baseline() -> float:
    """Success chance when both trains pick a route uniformly at random.

    Enumerates the four joint choices on the real layout.
    """
    wins = 0
    for a in (ActionKind.FORWARD, ActionKind.RIGHT):
        for b in (ActionKind.FORWARD, ActionKind.RIGHT):
            state = comm_reset(0, comm_enabled=False)
            acts = {state.agent_slot(0): a, state.agent_slot(1): b}
            while not state.done:
                state, _, _ = comm_step(state, {s: acts[s] for s in state.acting()})
            wins += state.success
    return wins / 4


def transcript_variability(log, window=1000) -> float:
    """Distinct / total symbol sequences among recent successful episodes."""
    if not log:
        raise DomainError("empty transcript log")
    tail = [tuple(e.symbols) for e in log[-window:] if e.success]
    if not tail:
        return 0.0
    return len(set(tail)) / len(tail)
