"""Rail grid topology.

Every cell stores a 16-bit transition mask. Bit ``4 * h_in + h_out`` is set
when a train that entered the cell travelling ``h_in`` may leave it
travelling ``h_out``. Headings double as movement directions.
"""

from __future__ import annotations

import hashlib
from collections import deque
from enum import IntEnum

import numpy as np

from raillab.errors import GridError, ReplayError


class Heading(IntEnum):
    N = 0
    E = 1
    S = 2
    W = 3

    def left(self) -> "Heading":
        return Heading((self - 1) % 4)

    def right(self) -> "Heading":
        return Heading((self + 1) % 4)

    def reverse(self) -> "Heading":
        return Heading((self + 2) % 4)


DELTAS = ((-1, 0), (0, 1), (1, 0), (0, -1))
UNREACHABLE = None

GRID_MAGIC = "RAILGRID"
GRID_VERSION = 1


def flag(h_in: int, h_out: int) -> int:
    return 1 << (4 * h_in + h_out)


def mask_moves(mask: int, h_in: int) -> tuple[int, ...]:
    nibble = (mask >> (4 * h_in)) & 0xF
    return tuple(h for h in range(4) if nibble & (1 << h))


def step_cell(cell, heading):
    dr, dc = DELTAS[heading]
    return (cell[0] + dr, cell[1] + dc)


class RailGrid:
    """Immutable rail topology with cached move tables and distance maps."""

    def __init__(self, masks):
        masks = np.asarray(masks, dtype=np.uint16)
        if masks.ndim != 2:
            raise GridError("transition masks must be a 2-D array")
        self.height, self.width = masks.shape
        if self.width < 2 or self.height < 1:
            raise GridError(f"grid too small: {self.width}x{self.height}")
        self.masks = masks.copy()
        self.masks.setflags(write=False)
        # moves[idx][h_in] -> tuple of legal outgoing headings
        self.moves = [
            tuple(mask_moves(int(m), h) for h in range(4)) for m in self.masks.ravel()
        ]
        self._dist_cache: dict[tuple[int, int], np.ndarray] = {}
        self._section_cache: dict = {}
        self._reverse = None

    # -- basic queries -------------------------------------------------------
    def in_bounds(self, cell) -> bool:
        return 0 <= cell[0] < self.height and 0 <= cell[1] < self.width

    def idx(self, cell) -> int:
        return cell[0] * self.width + cell[1]

    def is_rail(self, cell) -> bool:
        return self.in_bounds(cell) and self.masks[cell] != 0

    def rail_cells(self):
        rows, cols = np.nonzero(self.masks)
        return [(int(r), int(c)) for r, c in zip(rows, cols)]

    def valid_headings(self, cell):
        """Headings with which a train may occupy ``cell``."""
        m = self.moves[self.idx(cell)]
        return [h for h in range(4) if m[h]]

    def __eq__(self, other):
        return isinstance(other, RailGrid) and np.array_equal(self.masks, other.masks)

    def __hash__(self):
        return hash(self.masks.tobytes())

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    # -- serialization -------------------------------------------------------
    def to_text(self) -> str:
        lines = [f"{GRID_MAGIC} {GRID_VERSION}", f"{self.width} {self.height}"]
        for row in self.masks:
            lines.append(" ".join(f"{int(m):04x}" for m in row))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RailGrid":
        lines = text.splitlines()
        if not lines or lines[0].split()[:1] != [GRID_MAGIC]:
            raise ReplayError("missing grid header", "line 1")
        try:
            version = int(lines[0].split()[1])
        except (IndexError, ValueError):
            raise ReplayError("bad grid version", "line 1") from None
        if version != GRID_VERSION:
            raise ReplayError(f"unsupported grid version {version}", "line 1")
        try:
            width, height = (int(x) for x in lines[1].split())
        except (IndexError, ValueError):
            raise ReplayError("bad grid dimensions", "line 2") from None
        if len(lines) < 2 + height:
            raise ReplayError(f"expected {height} rows, got {len(lines) - 2}", f"line {len(lines) + 1}")
        masks = np.zeros((height, width), dtype=np.uint16)
        for r in range(height):
            fields = lines[2 + r].split()
            if len(fields) != width:
                raise ReplayError(f"expected {width} cells", f"line {r + 3}")
            try:
                masks[r] = [int(f, 16) for f in fields]
            except ValueError:
                raise ReplayError("bad cell mask", f"line {r + 3}") from None
        return cls(masks)

    # -- graph search ----------------------------------------------------------
    def _reverse_edges(self):
        if self._reverse is None:
            rev = [[] for _ in range(self.height * self.width * 4)]
            for r in range(self.height):
                for c in range(self.width):
                    i = r * self.width + c
                    for h in range(4):
                        for o in self.moves[i][h]:
                            nr, nc = r + DELTAS[o][0], c + DELTAS[o][1]
                            rev[(nr * self.width + nc) * 4 + o].append(i * 4 + h)
            self._reverse = rev
        return self._reverse

    def distance_map(self, target) -> np.ndarray:
        """Moves-to-target for every (cell, heading) config; -1 if unreachable."""
        target = (int(target[0]), int(target[1]))
        dist = self._dist_cache.get(target)
        if dist is not None:
            return dist
        rev = self._reverse_edges()
        dist = np.full(self.height * self.width * 4, -1, dtype=np.int64)
        ti = self.idx(target)
        queue = deque()
        for h in range(4):
            dist[ti * 4 + h] = 0
            queue.append(ti * 4 + h)
        while queue:
            node = queue.popleft()
            d = dist[node] + 1
            for prev in rev[node]:
                if dist[prev] < 0:
                    dist[prev] = d
                    queue.append(prev)
        dist.setflags(write=False)
        self._dist_cache[target] = dist
        return dist


def check_rail(grid: RailGrid, cell) -> None:
    if not grid.in_bounds(cell):
        raise GridError(f"cell {cell} out of bounds")
    if grid.masks[cell] == 0:
        raise GridError(f"cell {cell} is not a rail cell")


def allowed_moves(grid: RailGrid, cell, heading) -> set[Heading]:
    check_rail(grid, cell)
    return {Heading(h) for h in grid.moves[grid.idx(cell)][heading]}


def is_switch_for(grid: RailGrid, cell, heading) -> bool:
    """True when a train entering ``cell`` with ``heading`` has a real choice."""
    check_rail(grid, cell)
    return len(grid.moves[grid.idx(cell)][heading]) >= 2


def shortest_path_distance(grid: RailGrid, start, target):
    """Minimum cell-to-cell moves from config ``start = (cell, heading)``.

    Returns ``UNREACHABLE`` (None) when no directed path exists.
    """
    cell, heading = start
    if tuple(cell) == tuple(target):
        return 0
    if not grid.in_bounds(cell) or not grid.in_bounds(target):
        return UNREACHABLE
    d = int(grid.distance_map(target)[grid.idx(cell) * 4 + int(heading)])
    return UNREACHABLE if d < 0 else d


def validate_grid(grid: RailGrid) -> list[str]:
    """Return every consistency violation found (empty list means valid)."""
    problems = []
    for r in range(grid.height):
        for c in range(grid.width):
            m = int(grid.masks[r, c])
            if not m:
                continue
            out_dirs = {o for h in range(4) for o in mask_moves(m, h)}
            for h in range(4):
                for o in mask_moves(m, h):
                    nxt = step_cell((r, c), o)
                    if not grid.in_bounds(nxt):
                        problems.append(f"({r},{c}) {h}->{o} leaves the grid")
                        continue
                    if not grid.moves[grid.idx(nxt)][o]:
                        problems.append(f"({r},{c}) {h}->{o} enters {nxt} with no onward move")
                    if o == (h + 2) % 4 and len(out_dirs) != 1:
                        problems.append(f"({r},{c}) reverses {h}->{o} but is not a dead end")
    return problems


def direction(a, b) -> int:
    """Heading that moves from cell ``a`` to the adjacent cell ``b``."""
    return DELTAS.index((b[0] - a[0], b[1] - a[1]))


IN, OUT, BOTH = 1, 2, 3


class GridBuilder:
    """Accumulates track from cell paths.

    Path interiors get through-transitions in both travel directions, or in
    the path's own direction only for one-way paths. Path ends registered as
    nodes become junctions joining every incoming connection to every
    outgoing one, or dead ends (reverse plus depart) when they have a single
    connection.
    """

    def __init__(self, width, height):
        self.width, self.height = width, height
        self.masks = np.zeros((height, width), dtype=np.uint16)
        # node cell -> {side: IN | OUT | BOTH}
        self.nodes: dict[tuple[int, int], dict[int, int]] = {}

    def _through(self, masks, cells, one_way=False):
        for prev, cur, nxt in zip(cells, cells[1:], cells[2:]):
            masks[cur] |= flag(direction(prev, cur), direction(cur, nxt))
            if not one_way:
                masks[cur] |= flag(direction(nxt, cur), direction(cur, prev))

    def node_mask(self, conns) -> int:
        if not isinstance(conns, dict):
            conns = {d: BOTH for d in conns}
        m = 0
        if len(conns) == 1:
            (d,) = conns
            m |= flag((d + 2) % 4, d) | flag(d, d)
        else:
            for d1, mode1 in conns.items():
                for d2, mode2 in conns.items():
                    if d1 != d2 and mode1 & IN and mode2 & OUT:
                        m |= flag((d1 + 2) % 4, d2)
        return m

    def plan(self, cells, node_ends=True, one_way=False):
        """Masks and node table after adding ``cells``, without committing."""
        masks = self.masks.copy()
        nodes = {k: dict(v) for k, v in self.nodes.items()}
        self._through(masks, cells, one_way)
        if node_ends:
            first, last = (OUT, IN) if one_way else (BOTH, BOTH)
            side = direction(cells[0], cells[1])
            conns = nodes.setdefault(cells[0], {})
            conns[side] = conns.get(side, 0) | first
            side = direction(cells[-1], cells[-2])
            conns = nodes.setdefault(cells[-1], {})
            conns[side] = conns.get(side, 0) | last
        return masks, nodes

    def add_path(self, cells, node_ends=True, max_options=None, forbidden=(), one_way=False):
        """Add a path; returns False (and changes nothing) if it would break
        the option limit or pass through a forbidden cell."""
        cells = [tuple(c) for c in cells]
        for a, b in zip(cells, cells[1:]):
            if abs(a[0] - b[0]) + abs(a[1] - b[1]) != 1:
                raise GridError(f"path cells {a} and {b} are not adjacent")
        for c in cells:
            if not (0 <= c[0] < self.height and 0 <= c[1] < self.width):
                return False
        interior = cells[1:-1]
        if any(c in forbidden or c in self.nodes for c in interior):
            return False
        masks, nodes = self.plan(cells, node_ends, one_way)
        if max_options is not None:
            touched = set(cells)
            for c in touched:
                m = int(masks[c])
                if c in nodes:
                    m |= self.node_mask(nodes[c])
                if any(len(mask_moves(m, h)) > max_options for h in range(4)):
                    return False
        self.masks, self.nodes = masks, nodes
        return True

    def build(self) -> RailGrid:
        masks = self.masks.copy()
        for cell, conns in self.nodes.items():
            masks[cell] |= self.node_mask(conns)
        return RailGrid(masks)
