from collections import deque
import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from patrolmarl.errors import DisconnectedMap, LocIsObstacle, MalformedMap, NoStation
from patrolmarl.gridmap import (
    Action, CellKind, MOVES, apply_action, builtin_maps, load_map, load_map_file,
    nearest_station, shortest_path, valid_actions,
)


def bfs_length(cells, start, goal):
    """Independent oracle: plain BFS over a list-of-lists grid."""
    rows, cols = len(cells), len(cells[0])
    seen = {start: 0}
    q = deque([start])
    while q:
        r, c = q.popleft()
        if (r, c) == goal:
            return seen[(r, c)]
        for dr, dc in ((0, 1), (1, 0), (0, -1), (-1, 0)):
            n = (r + dr, c + dc)
            if 0 <= n[0] < rows and 0 <= n[1] < cols and cells[n[0]][n[1]] != -1 and n not in seen:
                seen[n] = seen[(r, c)] + 1
                q.append(n)
    return None


def random_map(rng, size=8, p_obstacle=0.25):
    while True:
        cells = np.where(rng.random((size, size)) < p_obstacle, -1, 0)
        free = np.argwhere(cells == 0)
        if len(free) < 2:
            continue
        s = free[rng.integers(len(free))]
        cells[tuple(s)] = 5
        text = "\n".join(" ".join(str(v) for v in row) for row in cells)
        try:
            return load_map(text)
        except DisconnectedMap:
            continue


def test_fig1_matrix(fig1):
    assert fig1.shape == (6, 6)
    assert len(fig1.stations) == 1
    assert fig1.cells[fig1.stations[0]] == CellKind.STATION


def test_fig1_mask_up_down_only(fig1):
    np.testing.assert_array_equal(valid_actions(fig1, (1, 2)), [1, 1, 0, 0])


def test_no_station():
    with pytest.raises(NoStation):
        load_map("0")


def test_open3(open3):
    assert open3.n_vertices == 8
    assert open3.stations == ((1, 1),)
    np.testing.assert_array_equal(valid_actions(open3, (1, 1)), [1, 1, 1, 1])
    assert valid_actions(open3, (0, 0)).sum() == 2


@pytest.mark.parametrize("text", ["0 0\n0", "0 7 5", "0 x 5", ""])
def test_malformed(text):
    with pytest.raises(MalformedMap):
        load_map(text)


def test_disconnected():
    with pytest.raises(DisconnectedMap):
        load_map("0 -1 5")


def test_obstacle_loc_rejected(fig1):
    with pytest.raises(LocIsObstacle):
        valid_actions(fig1, (1, 1))
    with pytest.raises(LocIsObstacle):
        valid_actions(fig1, (9, 9))


def test_action_order():
    assert [a.name for a in Action] == ["UP", "DOWN", "LEFT", "RIGHT"]
    assert MOVES[Action.UP] == (-1, 0)


def test_builtin_maps_load():
    names = builtin_maps()
    assert {"fig1", "open3", "map_a", "map_b", "map_c", "map_d"} <= set(names)
    for n in names:
        g = load_map_file(f"builtin:{n}")
        assert g.stations


def test_load_from_file(tmp_path):
    p = tmp_path / "m.txt"
    p.write_text("0 0\n0 5\n")
    assert load_map_file(p).name == "m"


def test_shortest_path_trivial(corridor):
    assert shortest_path(corridor, (0, 2), (0, 2)) == []
    assert shortest_path(corridor, (0, 0), (0, 4)) == [Action.RIGHT] * 4


def test_nearest_station_cases(corridor):
    assert nearest_station(corridor, (0, 4)) == ((0, 4), [])
    assert nearest_station(corridor, (0, 0))[0] == (0, 4)
    two = load_map("5 0 0 0 5")
    assert nearest_station(two, (0, 2))[0] == (0, 0)


@pytest.mark.parametrize("seed", range(10))
def test_shortest_path_matches_bfs_oracle(seed):
    rng = np.random.default_rng(seed)
    g = random_map(rng)
    cells = g.cells.tolist()
    free = g.free_cells()
    for _ in range(30):
        a = free[rng.integers(len(free))]
        b = free[rng.integers(len(free))]
        path = shortest_path(g, a, b)
        assert len(path) == bfs_length(cells, a, b)
        loc = a
        for act in path:
            assert valid_actions(g, loc)[act] == 1
            loc = apply_action(loc, act)
        assert loc == b


@pytest.mark.parametrize("seed", range(3))
def test_path_length_symmetric_exhaustive(seed):
    g = random_map(np.random.default_rng(100 + seed), size=7)
    for a, b in itertools.combinations(g.free_cells(), 2):
        assert len(shortest_path(g, a, b)) == len(shortest_path(g, b, a))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_every_free_cell_has_an_action(seed):
    g = random_map(np.random.default_rng(seed), size=6)
    for loc in g.free_cells():
        assert valid_actions(g, loc).sum() >= 1
