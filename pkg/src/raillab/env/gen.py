"""Random grid-like rail networks and the curriculum over their sizes.

Hubs sit on a jittered lattice and are joined by L-shaped corridors along a
minimum spanning tree, plus optional extra links and passing loops. Every
corridor is rejected if it would give any incoming heading more than two
outgoing options, which keeps observation trees binary.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction

import numpy as np

from raillab.env.core import EnvState, MalfunctionParams, reset
from raillab.env.grid import DELTAS, GridBuilder, RailGrid, shortest_path_distance, validate_grid
from raillab.errors import DomainError, GenerationError

MAX_ATTEMPTS = 25
MIN_TRIP = 3


def default_hubs(width, height):
    return max(2, min(8, (width * height) // 90))


@dataclass(frozen=True)
class GeneratorParams:
    width: int
    height: int
    n_agents: int
    n_hubs: int = None
    corridor_density: float = 0.5
    seed: int = 0
    speeds: tuple = (1,)
    malfunction_rate: float = 0.0
    max_steps: int = None
    rails_per_link: int = 2

    def __post_init__(self):
        if self.n_hubs is None:
            object.__setattr__(self, "n_hubs", default_hubs(self.width, self.height))
        if self.n_agents < 1:
            raise DomainError("n_agents must be at least 1")
        if self.n_hubs < 2:
            raise DomainError("n_hubs must be at least 2")
        if self.width < 5 or self.height < 5:
            raise DomainError("generated grids need at least 5x5 cells")
        if self.rails_per_link not in (1, 2):
            raise DomainError("rails_per_link must be 1 or 2")
        if not 0.0 < self.corridor_density <= 1.0:
            raise DomainError("corridor_density must lie in (0, 1]")
        object.__setattr__(self, "speeds", tuple(self.speeds))

    def with_seed(self, seed) -> "GeneratorParams":
        return replace(self, seed=int(seed))

    def to_dict(self):
        d = asdict(self)
        d["speeds"] = [str(Fraction(s).limit_denominator(12)) for s in self.speeds]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "speeds" in d:
            d["speeds"] = tuple(Fraction(s) for s in d["speeds"])
        return cls(**d)


def _place_hubs(p: GeneratorParams, rng):
    inner_h, inner_w = p.height - 2, p.width - 2
    ky = max(1, round(math.sqrt(p.n_hubs * inner_h / inner_w)))
    kx = max(1, math.ceil(p.n_hubs / ky))
    while kx * ky < p.n_hubs:
        ky += 1
    if inner_h // ky < 3 or inner_w // kx < 3:
        raise GenerationError(f"{p.width}x{p.height} grid cannot hold {p.n_hubs} hubs")
    regions = rng.permutation(kx * ky)[: p.n_hubs]
    hubs = []
    for region in sorted(int(x) for x in regions):
        i, j = divmod(region, kx)
        r0 = 1 + i * inner_h // ky
        r1 = 1 + (i + 1) * inner_h // ky - 1
        c0 = 1 + j * inner_w // kx
        c1 = 1 + (j + 1) * inner_w // kx - 1
        # one-cell gap inside each region keeps hubs from touching
        hubs.append((int(rng.integers(r0, r1)), int(rng.integers(c0, c1))))
    return hubs


def _spanning_edges(hubs):
    def dist(a, b):
        return abs(a[0] - b[0]) + abs(a[1] - b[1])

    in_tree = {0}
    edges = []
    while len(in_tree) < len(hubs):
        best = min(
            ((dist(hubs[i], hubs[j]), i, j) for i in in_tree for j in range(len(hubs)) if j not in in_tree)
        )
        edges.append((best[1], best[2]))
        in_tree.add(best[2])
    return edges


def _l_path(a, b, vertical_first):
    cells = [a]
    r, c = a
    legs = ("r", "c") if vertical_first else ("c", "r")
    for leg in legs:
        if leg == "r":
            step = 1 if b[0] > r else -1
            while r != b[0]:
                r += step
                cells.append((r, c))
        else:
            step = 1 if b[1] > c else -1
            while c != b[1]:
                c += step
                cells.append((r, c))
    return cells


def _candidate_routes(a, b, rng, p):
    yield _l_path(a, b, False)
    yield _l_path(a, b, True)
    for _ in range(6):
        mid = (int(rng.integers(1, p.height - 1)), int(rng.integers(1, p.width - 1)))
        if mid in (a, b):
            continue
        first = _l_path(a, mid, bool(rng.integers(2)))
        second = _l_path(mid, b, bool(rng.integers(2)))
        path = first + second[1:]
        if len(set(path)) == len(path):
            yield path


def _route(builder, a, b, hubs, rng, p, one_way=False, avoid=()):
    forbidden = (set(hubs) - {a, b}) | set(avoid)
    for path in _candidate_routes(a, b, rng, p):
        if len(path) >= 3 and builder.add_path(path, max_options=2, forbidden=forbidden, one_way=one_way):
            return path
    return None


def _link(builder, a, b, hubs, rng, p):
    """Join two hubs; returns the single-track paths laid (for passing loops),
    or None when no route fits.

    With two rails per link, each direction gets its own one-way rail. If
    the return rail cannot be routed, the outbound rail is opened both ways.
    """
    if p.rails_per_link == 2:
        saved = builder.masks.copy(), {k: dict(v) for k, v in builder.nodes.items()}
        out = _route(builder, a, b, hubs, rng, p, one_way=True)
        if out is not None:
            back = _route(builder, b, a, hubs, rng, p, one_way=True, avoid=out[1:-1])
            if back is not None:
                return []
            if builder.add_path(out[::-1], one_way=True, max_options=2):
                return [out]
            builder.masks, builder.nodes = saved
    path = _route(builder, a, b, hubs, rng, p)
    return None if path is None else [path]


def _straight_runs(path):
    runs, start = [], 0
    for k in range(1, len(path) - 1):
        d_in = (path[k][0] - path[k - 1][0], path[k][1] - path[k - 1][1])
        d_out = (path[k + 1][0] - path[k][0], path[k + 1][1] - path[k][1])
        if d_in != d_out:
            runs.append((start, k))
            start = k
    runs.append((start, len(path) - 1))
    return runs


def _add_passing_loop(builder, path, hubs, rng, s, e):
    """Try to lay a siding alongside the straight run ``path[s..e]``."""
    i = int(rng.integers(s + 1, e - 3))
    j = int(rng.integers(i + 3, e))
    dr, dc = path[i + 1][0] - path[i][0], path[i + 1][1] - path[i][1]
    for side in rng.permutation(2):
        pr, pc = (dc, dr) if side else (-dc, -dr)
        siding = [(path[k][0] + pr, path[k][1] + pc) for k in range(i, j + 1)]
        if any(
            not (0 <= r < builder.height and 0 <= c < builder.width) or builder.masks[r, c] or (r, c) in hubs
            for r, c in siding
        ):
            continue
        cells = [path[i - 1], path[i]] + siding + [path[j], path[j + 1]]
        if builder.add_path(cells, node_ends=False, max_options=2, forbidden=set(hubs)):
            return True
    return False


def build_network(p: GeneratorParams, rng):
    hubs = _place_hubs(p, rng)
    builder = GridBuilder(p.width, p.height)
    paths = []
    for i, j in _spanning_edges(hubs):
        laid = _link(builder, hubs[i], hubs[j], hubs, rng, p)
        if laid is None:
            raise GenerationError("could not route a spanning corridor")
        paths.extend(laid)
    linked = {frozenset(e) for e in _spanning_edges(hubs)}
    for i, a in enumerate(hubs):
        others = sorted(
            (abs(a[0] - b[0]) + abs(a[1] - b[1]), j) for j, b in enumerate(hubs) if j != i
        )
        for _, j in others:
            if frozenset((i, j)) in linked:
                continue
            if rng.random() < p.corridor_density:
                laid = _link(builder, a, hubs[j], hubs, rng, p)
                if laid is not None:
                    paths.extend(laid)
                    linked.add(frozenset((i, j)))
            break
    for path in paths:
        for s, e in _straight_runs(path):
            if e - s >= 6 and rng.random() < p.corridor_density:
                _add_passing_loop(builder, path, set(hubs), rng, s, e)
    grid = builder.build()
    problems = validate_grid(grid)
    if problems:
        raise GenerationError(f"generator produced an inconsistent grid: {problems[:3]}")
    return grid, hubs


def _place_agents(grid: RailGrid, hubs, p: GeneratorParams, rng):
    cells = grid.rail_cells()
    taken = set()
    roster = []
    for k in range(p.n_agents):
        for _ in range(200):
            target = hubs[int(rng.integers(len(hubs)))]
            start = cells[int(rng.integers(len(cells)))]
            if start in taken or start == target:
                continue
            headings = grid.valid_headings(start)
            heading = headings[int(rng.integers(len(headings)))]
            d = shortest_path_distance(grid, (start, heading), target)
            if d is None or d < MIN_TRIP:
                continue
            speed = Fraction(p.speeds[int(rng.integers(len(p.speeds)))]).limit_denominator(12)
            roster.append((start, heading, target, speed))
            taken.add(start)
            break
        else:
            raise GenerationError(f"could not place agent {k}")
    return roster


def generate_env(params: GeneratorParams) -> EnvState:
    """Deterministic in ``params`` (including its seed)."""
    last = None
    for attempt in range(MAX_ATTEMPTS):
        rng = np.random.default_rng([params.seed, attempt])
        try:
            grid, hubs = build_network(params, rng)
            roster = _place_agents(grid, hubs, params, rng)
        except GenerationError as exc:
            last = exc
            if "cannot hold" in str(exc):
                break
            continue
        malfunction = MalfunctionParams(rate=params.malfunction_rate) if params.malfunction_rate else None
        return reset(
            grid, roster, max_steps=params.max_steps, seed=params.seed, malfunction=malfunction
        )
    raise GenerationError(f"generation failed for {params}: {last}")


# -- curriculum ----------------------------------------------------------------

@dataclass(frozen=True)
class CurriculumStage:
    params: GeneratorParams
    promote_threshold: float = 0.8
    window: int = 200

    def to_dict(self):
        return {
            "params": self.params.to_dict(),
            "promote_threshold": self.promote_threshold,
            "window": self.window,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(GeneratorParams.from_dict(d["params"]), d.get("promote_threshold", 0.8), d.get("window", 200))


def default_curriculum(**overrides):
    sizes = [(10, 2), (15, 3), (25, 4), (35, 8), (50, 14)]
    return [CurriculumStage(GeneratorParams(s, s, n, **overrides)) for s, n in sizes]


def validate_curriculum(stages):
    if not stages:
        raise DomainError("curriculum needs at least one stage")
    for a, b in zip(stages, stages[1:]):
        if (
            b.params.width * b.params.height < a.params.width * a.params.height
            or b.params.n_agents < a.params.n_agents
        ):
            raise DomainError("curriculum stages must not shrink in area or agent count")


def curriculum_advance(current: int, history, stages) -> int:
    """Move to the next stage once the trailing window clears the threshold."""
    if current >= len(stages) - 1:
        return len(stages) - 1
    stage = stages[current]
    if len(history) < stage.window:
        return current
    if float(np.mean(history[-stage.window:])) >= stage.promote_threshold:
        return current + 1
    return current


@dataclass
class CurriculumTracker:
    stages: list
    index: int = 0
    history: list = field(default_factory=list)

    @property
    def stage(self) -> CurriculumStage:
        return self.stages[self.index]

    def record(self, arrival_rate: float) -> bool:
        """Log one episode; returns True when the stage advanced."""
        self.history.append(arrival_rate)
        new = curriculum_advance(self.index, self.history, self.stages)
        if new != self.index:
            self.index = new
            self.history = []
            return True
        return False
