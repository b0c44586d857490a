import json

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mindqa import gridhouse as gh
from mindqa.gridhouse import Action, AgentPose


def pose_graph(house):
    g = nx.DiGraph()
    for p in house.walkable_poses():
        for a in gh.MOVES:
            q = gh.step(house, p, a)
            if q != p:
                g.add_edge(p, q)
    return g


def bfs_dist(graph, start, goal_cell):
    lengths = nx.single_source_shortest_path_length(graph, start)
    return min(d for p, d in lengths.items() if p.cell == tuple(goal_cell))


def open_room(size=7, tint_room=0):
    """A single walled room with no objects, built directly."""
    grid = np.full((size, size), gh.WALL)
    grid[1:-1, 1:-1] = gh.FLOOR
    room_of = np.where(grid == gh.FLOOR, 0, -1)
    return gh.HouseMap("open", grid, room_of, [tint_room], [])


# -------------------------------------------------------------- generation

def test_generation_is_deterministic():
    a = gh.generate_house(1, n_rooms=2, size=9)
    b = gh.generate_house(1, n_rooms=2, size=9)
    assert a.dumps() == b.dumps()


@pytest.mark.parametrize("seed,rooms,size", [(s, r, z) for s in range(6) for r, z in ((2, 7), (2, 9), (4, 15))])
def test_houses_connected_and_doors_join_two_rooms(seed, rooms, size):
    h = gh.generate_house(seed, n_rooms=rooms, size=size)
    free = np.argwhere(h.walkable)
    seen = gh._flood(h.walkable, tuple(free[0]))
    assert int(seen.sum()) == len(free)
    assert len(h.doors) >= 1
    for cell, a, b in h.doors:
        assert h.grid[cell] == gh.DOOR and a != b
        adj = {h.room_of[cell[0] + dr, cell[1] + dc] for dr, dc in gh.DIRS} - {-1}
        assert adj == {a, b}
    for o in h.objects:
        assert h.grid[o.cell] == gh.FLOOR
    assert len(set(h.rooms)) == rooms


def test_generation_errors():
    with pytest.raises(gh.HouseError):
        gh.generate_house(0, n_rooms=1, size=9)
    with pytest.raises(gh.HouseError):
        gh.generate_house(0, n_rooms=2, size=5)
    with pytest.raises(gh.HouseError):
        gh.generate_house(0, n_rooms=9, size=7, max_retries=3)


def test_json_round_trip(house15):
    back = gh.HouseMap.from_json(json.loads(house15.dumps()))
    assert back.dumps() == house15.dumps()
    assert (back.walkable == house15.walkable).all()


# -------------------------------------------------------------------- step

def test_forward_into_wall_is_blocked():
    h = open_room()
    p = AgentPose(1, 1, 0)  # north of row 1 is the outer wall
    assert gh.step(h, p, Action.FORWARD) == p


def test_four_left_turns_identity(house9):
    p = house9.walkable_poses()[5]
    q = p
    for _ in range(4):
        q = gh.step(house9, q, Action.TURN_LEFT)
    assert q == p


def test_forward_and_back():
    h = open_room()
    p = AgentPose(3, 3, 1)
    q = gh.step(h, p, Action.FORWARD)
    q = gh.step(h, gh.step(h, q, Action.TURN_LEFT), Action.TURN_LEFT)
    q = gh.step(h, q, Action.FORWARD)
    assert q.cell == p.cell


def test_stop_keeps_pose(house9):
    p = house9.walkable_poses()[0]
    assert gh.step(house9, p, Action.STOP) == p


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.sampled_from(list(Action)), max_size=40))
def test_step_never_enters_a_blocked_cell(seed, actions):
    h = gh.generate_house(seed % 7, n_rooms=2, size=9)
    poses = h.walkable_poses()
    p = poses[seed % len(poses)]
    for a in actions:
        p = gh.step(h, p, a)
        assert h.is_walkable(p.cell)


def test_action_symbols_round_trip():
    for a in Action:
        assert Action.from_symbol(a.symbol) == a
    assert len(Action) == 4


# ------------------------------------------------------------------ render

def test_render_deterministic_and_in_range(house15):
    for p in house15.walkable_poses()[::37]:
        f = gh.render(house15, p)
        assert f.shape == (32, 32, 3) and f.dtype == np.float32
        assert 0.0 <= f.min() and f.max() <= 1.0
        fresh = gh.HouseMap.from_json(house15.to_json())
        assert gh.render(fresh, p).tobytes() == f.tobytes()


def test_adjacent_wall_is_brightest():
    h = open_room(tint_room=9)  # white tint
    near = gh.render(h, AgentPose(1, 3, 0))[16, 16]
    for r in range(2, 6):
        far = gh.render(h, AgentPose(r, 3, 0))[16, 16]
        assert near.sum() > far.sum()
    wall_shades = [gh.render(h, p)[16, 16].max() for p in h.walkable_poses()]
    assert near.max() == max(wall_shades)


def test_rotation_symmetric_room():
    h = open_room(size=7)
    frames = [gh.render(h, AgentPose(3, 3, d)) for d in range(4)]
    for f in frames[1:]:
        assert f.tobytes() == frames[0].tobytes()


# --------------------------------------------------------- shortest paths

def test_goal_directly_ahead():
    h = open_room()
    assert gh.shortest_path(h, AgentPose(3, 3, 1), (3, 4)) == [Action.FORWARD, Action.STOP]


def test_goal_directly_behind():
    h = open_room()
    path = gh.shortest_path(h, AgentPose(3, 3, 1), (3, 2))
    assert len(path) - 1 == 3 and path[-1] == Action.STOP
    assert path[:3] == [Action.TURN_LEFT, Action.TURN_LEFT, Action.FORWARD]  # F < L < R tie-break


def test_on_target():
    h = open_room()
    assert gh.shortest_path(h, AgentPose(3, 3, 0), (3, 3)) == [Action.STOP]
    assert gh.geodesic_dist(h, AgentPose(3, 3, 0), (3, 3)) == 0
    assert gh.geodesic_dist(h, AgentPose(3, 3, 1), (3, 4)) == 1


def test_shortest_path_matches_networkx(house15):
    g = pose_graph(house15)
    rng = np.random.default_rng(0)
    poses = house15.walkable_poses()
    cells = [tuple(c) for c in np.argwhere(house15.walkable)]
    for _ in range(50):
        p = poses[rng.integers(len(poses))]
        goal = cells[rng.integers(len(cells))]
        path = gh.shortest_path(house15, p, goal)
        want = 0 if p.cell == goal else bfs_dist(g, p, goal)
        assert len(path) - 1 == want == gh.geodesic_dist(house15, p, goal)
        assert gh.replay(house15, p, path)[-1].cell == goal


def test_unreachable_goal_errors(house9):
    wall = tuple(np.argwhere(house9.grid == gh.WALL)[0])
    with pytest.raises(gh.HouseError):
        gh.geodesic_dist(house9, house9.walkable_poses()[0], wall)


def test_distance_field_is_bellman_consistent(house15):
    target = tuple(np.argwhere(house15.walkable)[7])
    d = gh.distance_field(house15, target)
    for p in house15.walkable_poses():
        succ = [int(d[gh.step(house15, p, a)]) for a in gh.MOVES]
        assert all(int(d[p]) <= s + 1 for s in succ)
        if d[p] > 0:
            assert min(succ) == int(d[p]) - 1


# ------------------------------------------------------------------ spawns

def test_spawn_exact_distance(house15):
    target = tuple(np.argwhere(house15.walkable)[3])
    for k in (1, 5, 10):
        s = gh.spawn_at_distance(house15, target, k, seed=k)
        assert not s.fallback and s.distance == k
        assert gh.geodesic_dist(house15, s.pose, target) == k


def test_spawn_fallback_flagged(house9):
    target = tuple(np.argwhere(house9.walkable)[0])
    s = gh.spawn_at_distance(house9, target, 10_000, seed=0)
    assert s.fallback
    assert s.distance == int(gh.distance_field(house9, target).max())


def test_spawn_covers_several_candidates(house15):
    target = tuple(np.argwhere(house15.walkable)[3])
    d = gh.distance_field(house15, target)
    n_cand = int((d == 6).sum())
    got = {gh.spawn_at_distance(house15, target, 6, seed=s).pose for s in range(100)}
    assert n_cand >= 2 and len(got) >= 2
