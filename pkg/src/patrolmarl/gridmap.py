"""Static patrol-area map: cell classification, adjacency and shortest paths.

Coordinates are ``(row, col)`` with the origin at the top-left cell; ``Up``
decreases the row index.  Every neighbour expansion in the package uses the
fixed order Up, Down, Left, Right.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import DisconnectedMap, LocIsObstacle, MalformedMap, NoStation, Unreachable

Loc = tuple[int, int]


class CellKind(IntEnum):
    """Cell codes exactly as they appear in map files."""

    VERTEX = 0
    OBSTACLE = -1
    STATION = 5


class Action(IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3


# (d_row, d_col) in action-index order
MOVES: tuple[Loc, ...] = ((-1, 0), (1, 0), (0, -1), (0, 1))


@dataclass(frozen=True, eq=False)
class GridMap:
    cells: np.ndarray  # int8 matrix of CellKind codes, read-only
    stations: tuple[Loc, ...]
    name: str = ""
    _dist_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        masks = {
            "vertex": self.cells == CellKind.VERTEX,
            "obstacle": self.cells == CellKind.OBSTACLE,
            "station": self.cells == CellKind.STATION,
        }
        for m in masks.values():
            m.setflags(write=False)
        object.__setattr__(self, "_masks", masks)
        # flat indices of the same cells; fancy indexing with these is faster than boolean masks
        object.__setattr__(self, "_flat", {k: np.flatnonzero(m) for k, m in masks.items()})
        table = np.zeros(self.cells.shape + (4,), dtype=np.float64)
        for r in range(self.rows):
            for c in range(self.cols):
                for a, (dr, dc) in enumerate(MOVES):
                    if self.passable((r + dr, c + dc)):
                        table[r, c, a] = 1.0
        table.setflags(write=False)
        object.__setattr__(self, "_action_table", table)
        object.__setattr__(self, "_station_set", frozenset(self.stations))
        adjacency = {}
        for r in range(self.rows):
            for c in range(self.cols):
                adjacency[(r, c)] = tuple((a, (r + dr, c + dc)) for a, (dr, dc) in zip(Action, MOVES)
                                          if table[r, c, a])
        object.__setattr__(self, "_adjacency", adjacency)

    @property
    def rows(self) -> int:
        return self.cells.shape[0]

    @property
    def cols(self) -> int:
        return self.cells.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.cells.shape

    @property
    def vertex_mask(self) -> np.ndarray:
        return self._masks["vertex"]

    @property
    def obstacle_mask(self) -> np.ndarray:
        return self._masks["obstacle"]

    @property
    def station_mask(self) -> np.ndarray:
        return self._masks["station"]

    @property
    def vertex_index(self) -> np.ndarray:
        """Flat indices of vertex cells, in row-major order."""
        return self._flat["vertex"]

    @property
    def n_vertices(self) -> int:
        return int(self._masks["vertex"].sum())

    def kind(self, loc: Loc) -> CellKind:
        return CellKind(int(self.cells[loc]))

    def in_bounds(self, loc: Loc) -> bool:
        return 0 <= loc[0] < self.rows and 0 <= loc[1] < self.cols

    def passable(self, loc: Loc) -> bool:
        return self.in_bounds(loc) and self.cells[loc] != CellKind.OBSTACLE

    def is_station(self, loc: Loc) -> bool:
        return tuple(loc) in self._station_set

    def free_cells(self) -> list[Loc]:
        """Non-obstacle cells in row-major order."""
        rr, cc = np.nonzero(self.cells != CellKind.OBSTACLE)
        return [(int(r), int(c)) for r, c in zip(rr, cc)]

    def neighbors(self, loc: Loc) -> list[tuple[Action, Loc]]:
        return list(self._adjacency[tuple(loc)])

    def distances_from(self, loc: Loc) -> np.ndarray:
        """BFS distance matrix from ``loc`` (-1 where unreachable); cached."""
        cached = self._dist_cache.get(loc)
        if cached is not None:
            return cached
        dist = np.full(self.shape, -1, dtype=np.int64)
        dist[loc] = 0
        queue = deque([loc])
        while queue:
            cur = queue.popleft()
            for _, nxt in self.neighbors(cur):
                if dist[nxt] < 0:
                    dist[nxt] = dist[cur] + 1
                    queue.append(nxt)
        dist.setflags(write=False)
        self._dist_cache[loc] = dist
        return dist


def load_map(text: str, name: str = "") -> GridMap:
    rows = [line.split() for line in text.strip().splitlines() if line.strip()]
    if not rows:
        raise MalformedMap("empty map")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise MalformedMap("ragged rows")
    try:
        values = np.array([[int(v) for v in r] for r in rows], dtype=np.int8)
    except ValueError as exc:
        raise MalformedMap(f"non-integer entry: {exc}") from None
    allowed = {int(k) for k in CellKind}
    bad = set(np.unique(values).tolist()) - allowed
    if bad:
        raise MalformedMap(f"unknown cell codes {sorted(bad)}")

    rr, cc = np.nonzero(values == CellKind.STATION)
    stations = tuple((int(r), int(c)) for r, c in zip(rr, cc))
    if not stations:
        raise NoStation("map has no charging station")

    values.setflags(write=False)
    gmap = GridMap(cells=values, stations=stations, name=name)
    reach = gmap.distances_from(stations[0])
    if np.any((reach < 0) & (values != CellKind.OBSTACLE)):
        raise DisconnectedMap("free cells do not form one connected component")
    return gmap


def load_map_file(path: str | Path) -> GridMap:
    """Load a map from disk; ``builtin:<name>`` resolves to a packaged map."""
    path = str(path)
    if path.startswith("builtin:"):
        key = path.split(":", 1)[1]
        text = resources.files("patrolmarl").joinpath(f"data/maps/{key}.txt").read_text()
        return load_map(text, name=key)
    p = Path(path)
    return load_map(p.read_text(), name=p.stem)


def builtin_maps() -> list[str]:
    root = resources.files("patrolmarl").joinpath("data/maps")
    return sorted(f.name[:-4] for f in root.iterdir() if f.name.endswith(".txt"))


def _check_free(gmap: GridMap, loc: Loc) -> None:
    if not gmap.in_bounds(loc) or gmap.obstacle_mask[loc]:
        raise LocIsObstacle(f"{loc} is not a free cell")


def valid_actions(gmap: GridMap, loc: Loc) -> np.ndarray:
    """4-vector of {0,1}: 1 where the move stays in bounds and off obstacles."""
    _check_free(gmap, loc)
    return gmap._action_table[loc].copy()


def apply_action(loc: Loc, action: int) -> Loc:
    dr, dc = MOVES[int(action)]
    return (loc[0] + dr, loc[1] + dc)


def shortest_path(gmap: GridMap, start: Loc, goal: Loc) -> list[Action]:
    """Minimum-length action list from ``start`` to ``goal`` (BFS, fixed expansion order)."""
    _check_free(gmap, start)
    _check_free(gmap, goal)
    if start == goal:
        return []
    parent: dict[Loc, tuple[Loc, Action]] = {start: (start, Action.UP)}
    queue = deque([start])
    while queue:
        cur = queue.popleft()
        for a, nxt in gmap.neighbors(cur):
            if nxt in parent:
                continue
            parent[nxt] = (cur, a)
            if nxt == goal:
                path = []
                node = goal
                while node != start:
                    prev, act = parent[node]
                    path.append(act)
                    node = prev
                return path[::-1]
            queue.append(nxt)
    raise Unreachable(f"no path from {start} to {goal}")


def nearest_station(gmap: GridMap, loc: Loc) -> tuple[Loc, list[Action]]:
    """Closest station by path length; ties go to the lexicographically smallest."""
    _check_free(gmap, loc)
    dist = gmap.distances_from(loc)
    best = min(gmap.stations, key=lambda s: (int(dist[s]), s))
    return best, shortest_path(gmap, loc, best)


def station_distance(gmap: GridMap, loc: Loc) -> int:
    """Path length from ``loc`` to its nearest station."""
    dist = gmap.distances_from(loc)
    return min(int(dist[s]) for s in gmap.stations)
