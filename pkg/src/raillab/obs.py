"""Section-tree observations.

A section is the run of track an agent is forced along until the next cell
where it has a choice (a switch usable in its travel direction), a dead end,
or its own target. The agent sees the section it is on plus, recursively,
the two branches at each section end, down to a fixed depth.
"""

from __future__ import annotations

from dataclasses import astuple, dataclass, field

import numpy as np

from raillab.env.core import PROGRESS_UNITS, EnvState, Status
from raillab.env.grid import DELTAS, shortest_path_distance
from raillab.errors import DomainError

DEPTH = 3
N_NODES = 2 ** (DEPTH + 1) - 1
NODE_DIM = 7
AGENT_DIM = 7
OBS_DIM = N_NODES * NODE_DIM + AGENT_DIM

NODE_FIELDS = (
    "present", "length_cells", "agent_count", "opposing_count",
    "dist_to_target", "contains_target", "min_malfunction",
)


@dataclass
class SectionNode:
    present: int = 0
    length_cells: int = 0
    agent_count: int = 0
    opposing_count: int = 0
    dist_to_target: int = 0
    contains_target: int = 0
    min_malfunction: int = 0


@dataclass
class SectionTree:
    nodes: list = field(default_factory=lambda: [SectionNode() for _ in range(N_NODES)])
    truncated: int = 0

    def present(self):
        return [n.present for n in self.nodes]

    def validate(self):
        for k in range(1, len(self.nodes)):
            if self.nodes[k].present and not self.nodes[(k - 1) // 2].present:
                raise DomainError(f"tree slot {k} present under an absent parent")
            if not self.nodes[k].present and any(astuple(self.nodes[k])):
                raise DomainError(f"absent tree slot {k} carries attributes")


@dataclass(frozen=True)
class _Geometry:
    cells: tuple
    # headings an oncoming train would have in each cell
    oncoming: tuple
    last: tuple
    switch_end: bool
    contains_target: bool


def _trace(grid, start, target) -> _Geometry:
    key = (start, target)
    geo = grid._section_cache.get(key)
    if geo is not None:
        return geo
    (r, c), h = start
    width, moves = grid.width, grid.moves
    cells, oncoming = [], []
    seen = set()
    switch_end = contains_target = False
    while True:
        seen.add((r, c, h))
        cells.append((r, c))
        opts = moves[r * width + c][h]
        oncoming.append(frozenset((o + 2) % 4 for o in opts))
        if (r, c) == target:
            contains_target = True
            break
        if len(opts) >= 2:
            switch_end = True
            break
        o = opts[0]
        nr, nc = r + DELTAS[o][0], c + DELTAS[o][1]
        # a dead-end reversal or a switchless loop closes the section
        if o == (h + 2) % 4 or (nr, nc, o) in seen:
            break
        r, c, h = nr, nc, o
    geo = _Geometry(tuple(cells), tuple(oncoming), ((r, c), h), switch_end, contains_target)
    grid._section_cache[key] = geo
    return geo


def _node(env: EnvState, geo: _Geometry, others, target) -> SectionNode:
    # a crossing can appear twice on one section; its train counts once
    hits = {}
    for cell, oncoming in zip(geo.cells, geo.oncoming):
        if cell in others:
            hits[cell] = hits.get(cell, frozenset()) | oncoming
    count = len(hits)
    opposing = 0
    mal = None
    for cell, oncoming in hits.items():
        other = others[cell]
        if other.heading in oncoming:
            opposing += 1
        if mal is None or other.malfunction_remaining < mal:
            mal = other.malfunction_remaining
    if target is None:
        dist = 0
    else:
        dist = shortest_path_distance(env.grid, geo.last, target)
    if dist is None:
        dist = env.grid.width + env.grid.height
    return SectionNode(
        1, len(geo.cells), count, opposing, dist, int(geo.contains_target), mal or 0
    )


def _others(env: EnvState, agent_id):
    return {
        a.position: a for a in env.agents if a.status == Status.ACTIVE and a.id != agent_id
    }


def trace_section(env: EnvState, start, target=None, observer=None):
    """Walk forced moves from ``start = (cell, heading)``.

    ``target`` stops the walk and anchors ``dist_to_target``; ``observer`` is
    the agent id excluded from the counts.

    Returns the filled ``SectionNode`` and the switch config ending the section,
    or ``None`` when it ends at a dead end, the target, or closes a loop.
    """
    start = (tuple(start[0]), int(start[1]))
    geo = _trace(env.grid, start, None if target is None else tuple(target))
    node = _node(env, geo, _others(env, observer), None if target is None else tuple(target))
    return node, (geo.last if geo.switch_end else None)


def _branches(grid, end, target, mirror):
    (r, c), h = end
    opts = grid.moves[r * grid.width + c][h]
    truncated = 0
    if len(opts) > 2:
        def dist(o):
            nxt = ((r + DELTAS[o][0], c + DELTAS[o][1]), o)
            d = shortest_path_distance(grid, nxt, target)
            return (d if d is not None else 1 << 30, o)
        opts = sorted(opts, key=dist)[:2]
        truncated = 1
    # leftmost first: relative turn of -1 (left), 0 (straight), +1 (right)
    rel = sorted(opts, key=lambda o: (o - h + 1) % 4, reverse=mirror)
    return [((r + DELTAS[o][0], c + DELTAS[o][1]), o) for o in rel], truncated


def agent_config(agent):
    return (agent.position, agent.heading)


def build_tree(env: EnvState, agent_id, depth=DEPTH, mirror=False) -> SectionTree:
    """Section tree ahead of an agent in breadth-first slot order.

    ``mirror`` lists branches right-to-left, giving the view of the
    left-right reflected layout.
    """
    agent = env.agents[agent_id]
    if agent.status == Status.DONE:
        raise DomainError(f"agent {agent_id} has already arrived")
    grid = env.grid
    target = agent.target
    others = _others(env, agent_id)
    tree = SectionTree([SectionNode() for _ in range(2 ** (depth + 1) - 1)])
    frontier = [(0, agent_config(agent))]
    while frontier:
        slot, start = frontier.pop(0)
        geo = _trace(grid, start, target)
        tree.nodes[slot] = _node(env, geo, others, target)
        if geo.switch_end and 2 * slot + 2 < len(tree.nodes):
            children, cut = _branches(grid, geo.last, target, mirror)
            tree.truncated += cut
            for k, child in enumerate(children):
                frontier.append((2 * slot + 1 + k, child))
    return tree


# N, E, S, W one-hot positions under a left-right reflection
_MIRROR_HEADING = (0, 3, 2, 1)


def flatten_normalize(tree: SectionTree, agent, env: EnvState, mirror=False) -> np.ndarray:
    grid = env.grid
    scale = float(grid.width + grid.height)
    n = float(env.n_agents)
    max_dur = env.malfunction.max_duration if env.malfunction.rate > 0 else 0
    out = np.zeros(len(tree.nodes) * NODE_DIM + AGENT_DIM)
    for k, node in enumerate(tree.nodes):
        if not node.present:
            continue
        base = k * NODE_DIM
        out[base] = 1.0
        out[base + 1] = min(node.length_cells / scale, 1.0)
        out[base + 2] = node.agent_count / n
        out[base + 3] = node.opposing_count / n
        out[base + 4] = min(node.dist_to_target / scale, 1.0)
        out[base + 5] = node.contains_target
        out[base + 6] = min(node.min_malfunction / max_dur, 1.0) if max_dur else 0.0
    base = len(tree.nodes) * NODE_DIM
    out[base] = float(agent.speed)
    heading = _MIRROR_HEADING[agent.heading] if mirror else agent.heading
    out[base + 1 + heading] = 1.0
    out[base + 5] = min(agent.malfunction_remaining / max_dur, 1.0) if max_dur else 0.0
    out[base + 6] = agent.cell_progress
    return out


def observe(env: EnvState, agent_id, mirror=False) -> np.ndarray:
    tree = build_tree(env, agent_id, mirror=mirror)
    return flatten_normalize(tree, env.agents[agent_id], env, mirror=mirror)


def is_decision_point(env: EnvState, agent_id) -> bool:
    """Ready agents choose when to depart; active agents choose only when
    they are about to leave a cell offering two or more exits."""
    agent = env.agents[agent_id]
    if agent.status == Status.READY:
        return True
    if agent.status == Status.DONE or agent.malfunction_remaining > 0:
        return False
    if agent.progress_units + agent.speed_units < PROGRESS_UNITS:
        return False
    r, c = agent.position
    return len(env.grid.moves[r * env.grid.width + c][agent.heading]) >= 2
