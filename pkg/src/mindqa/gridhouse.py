"""Procedural multi-room grid houses, pose dynamics, raycast rendering and
exact shortest-path oracles over the (cell, heading) pose graph."""

import json
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from typing import NamedTuple

import numpy as np

WALL, FLOOR, DOOR = 0, 1, 2

ROOM_KINDS = (
    "kitchen", "living_room", "dining_room", "bedroom", "bathroom",
    "office", "garage", "hallway", "laundry_room", "gym",
)

OBJECT_KINDS = (
    "bed", "table", "sofa", "chair", "refrigerator", "coffee_machine", "television",
    "bookshelf", "desk", "lamp", "plant", "piano", "wardrobe", "dresser", "mirror",
    "sink", "toilet", "bathtub", "shower", "oven", "microwave", "dishwasher",
    "washing_machine", "dryer", "ironing_board", "vacuum", "fireplace", "rug",
    "clock", "painting", "vase", "fish_tank", "computer", "printer", "speaker",
    "guitar", "treadmill", "bicycle", "car", "toolbox", "shoe_rack", "coat_rack",
    "cabinet", "stool", "bench", "trash_can", "kettle", "toaster", "blender", "fan",
)

COLORS = ("red", "green", "blue", "yellow", "white", "black", "brown", "purple")

_COLOR_RGB = np.array([
    (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0), (1.0, 1.0, 0.0),
    (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), (0.6, 0.3, 0.0), (0.6, 0.0, 1.0),
])


def _build_palette():
    # entry color * 8 + (kind % 8): the color attribute, pulled toward its
    # complement by a small kind-group dependent amount
    table = np.zeros((64, 3))
    for c in range(8):
        for g in range(8):
            mix = 0.3 * g / 7
            table[c * 8 + g] = _COLOR_RGB[c] * (1 - mix) + (1 - _COLOR_RGB[c]) * mix
    return table


PALETTE = _build_palette()

# saturated channels keep per-pixel Bernoulli entropy of frames low
ROOM_TINTS = np.array([
    (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0), (1.0, 1.0, 0.0), (1.0, 0.0, 1.0),
    (0.0, 1.0, 1.0), (1.0, 0.5, 0.0), (0.5, 0.0, 1.0), (0.0, 1.0, 0.5), (1.0, 1.0, 1.0),
])
DOOR_RGB = np.array((0.55, 0.27, 0.07))
CEILING_RGB = np.array((0.0, 0.0, 0.0))
FLOOR_RGB = np.array((1.0, 1.0, 1.0))

FRAME_SIZE = 32
MAX_DEPTH = 10.0

# heading order N, E, S, W; rows grow southward
DIRS = ((-1, 0), (0, 1), (1, 0), (0, -1))
HEADING_NAMES = "NESW"


class Action(IntEnum):
    FORWARD = 0
    TURN_LEFT = 1
    TURN_RIGHT = 2
    STOP = 3

    @property
    def symbol(self):
        return self.name.lower()

    @classmethod
    def from_symbol(cls, s):
        return cls[s.upper()]


MOVES = (Action.FORWARD, Action.TURN_LEFT, Action.TURN_RIGHT)


class AgentPose(NamedTuple):
    row: int
    col: int
    heading: int

    @property
    def cell(self):
        return (self.row, self.col)

    def to_json(self):
        return [self.row, self.col, HEADING_NAMES[self.heading]]

    @classmethod
    def from_json(cls, v):
        return cls(int(v[0]), int(v[1]), HEADING_NAMES.index(v[2]))


@dataclass(frozen=True)
class HouseObject:
    id: int
    kind: int
    color: int
    cell: tuple

    @property
    def name(self):
        return OBJECT_KINDS[self.kind]


class HouseError(RuntimeError):
    pass


@dataclass(eq=False)
class HouseMap:
    house_id: str
    grid: np.ndarray  # (R, C) of WALL/FLOOR/DOOR
    room_of: np.ndarray  # (R, C) room index, -1 off floor
    rooms: list  # room index -> ROOM_KINDS index
    objects: list
    doors: list = field(default_factory=list)  # (cell, room_a, room_b)
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.int8)
        self.room_of = np.asarray(self.room_of, dtype=np.int16)
        self.object_at = {o.cell: o for o in self.objects}
        walk = self.grid != WALL
        for o in self.objects:
            walk[o.cell] = False
        self.walkable = walk

    @property
    def shape(self):
        return self.grid.shape

    def is_walkable(self, cell):
        r, c = cell
        R, C = self.grid.shape
        return 0 <= r < R and 0 <= c < C and bool(self.walkable[r, c])

    def room_kind_at(self, cell):
        idx = self.room_of[cell]
        return None if idx < 0 else self.rooms[idx]

    def neighbors_of(self, obj):
        """Objects 4-adjacent to ``obj`` (the next-to relation)."""
        r, c = obj.cell
        out = []
        for dr, dc in DIRS:
            o = self.object_at.get((r + dr, c + dc))
            if o is not None:
                out.append(o)
        return out

    def walkable_poses(self):
        rows, cols = np.nonzero(self.walkable)
        return [AgentPose(int(r), int(c), h) for r, c in zip(rows, cols) for h in range(4)]

    # serialization
    def to_json(self):
        sym = {WALL: "#", FLOOR: ".", DOOR: "D"}
        grid = ["".join(sym[int(v)] for v in row) for row in self.grid]
        room_rows = [
            "".join("-" if v < 0 else str(int(v)) for v in row) for row in self.room_of
        ]
        return {
            "house_id": self.house_id,
            "grid": grid,
            "room_grid": room_rows,
            "rooms": [ROOM_KINDS[k] for k in self.rooms],
            "objects": [
                {"id": o.id, "kind": OBJECT_KINDS[o.kind], "color": COLORS[o.color], "cell": list(o.cell)}
                for o in self.objects
            ],
            "doors": [{"cell": list(cell), "rooms": [a, b]} for cell, a, b in self.doors],
        }

    @classmethod
    def from_json(cls, d):
        inv = {"#": WALL, ".": FLOOR, "D": DOOR}
        grid = np.array([[inv[ch] for ch in row] for row in d["grid"]], dtype=np.int8)
        room_of = np.array([[-1 if ch == "-" else int(ch) for ch in row] for row in d["room_grid"]])
        objects = [
            HouseObject(int(o["id"]), OBJECT_KINDS.index(o["kind"]), COLORS.index(o["color"]), tuple(o["cell"]))
            for o in d["objects"]
        ]
        doors = [(tuple(x["cell"]), x["rooms"][0], x["rooms"][1]) for x in d["doors"]]
        return cls(d["house_id"], grid, room_of, [ROOM_KINDS.index(k) for k in d["rooms"]], objects, doors)

    def dumps(self):
        return json.dumps(self.to_json(), sort_keys=True)


# ---------------------------------------------------------------- generation

def _flood(walkable, start):
    seen = np.zeros_like(walkable, dtype=bool)
    seen[start] = True
    queue = deque([start])
    R, C = walkable.shape
    while queue:
        r, c = queue.popleft()
        for dr, dc in DIRS:
            nr, nc = r + dr, c + dc
            if 0 <= nr < R and 0 <= nc < C and walkable[nr, nc] and not seen[nr, nc]:
                seen[nr, nc] = True
                queue.append((nr, nc))
    return seen


def is_connected(walkable):
    cells = np.argwhere(walkable)
    if len(cells) == 0:
        return False
    return bool(_flood(walkable, tuple(cells[0]))[walkable].all())


def _partition(rng, size, n_rooms):
    rects = [(1, 1, size - 2, size - 2)]
    walls = []
    for _ in range(n_rooms - 1):
        order = sorted(range(len(rects)), key=lambda i: -((rects[i][2] - rects[i][0] + 1) * (rects[i][3] - rects[i][1] + 1)))
        for i in order:
            r0, c0, r1, c1 = rects[i]
            h, w = r1 - r0 + 1, c1 - c0 + 1
            axes = []
            if w >= 5:
                axes.append("v")
            if h >= 5:
                axes.append("h")
            if not axes:
                continue
            if len(axes) == 2:
                axis = "v" if w > h else "h" if h > w else axes[rng.integers(2)]
            else:
                axis = axes[0]
            if axis == "v":
                x = int(rng.integers(c0 + 2, c1 - 1))
                rects[i:i + 1] = [(r0, c0, r1, x - 1), (r0, x + 1, r1, c1)]
                walls.append(("v", x, r0, r1))
            else:
                y = int(rng.integers(r0 + 2, r1 - 1))
                rects[i:i + 1] = [(r0, c0, y - 1, c1), (y + 1, c0, r1, c1)]
                walls.append(("h", y, c0, c1))
            break
        else:
            return None
    return rects


def generate_house(seed, n_rooms=4, size=15, house_id=None, max_retries=20):
    """Procedural house of ``n_rooms`` rectangular rooms on a ``size`` x ``size`` grid."""
    if n_rooms < 2 or size < 7:
        raise HouseError("need room-count >= 2 and grid-size >= 7")
    if n_rooms > len(ROOM_KINDS):
        raise HouseError(f"at most {len(ROOM_KINDS)} rooms")
    house_id = house_id or f"house-{seed}"
    for attempt in range(max_retries):
        rng = np.random.default_rng([int(seed), n_rooms, size, attempt])
        house = _try_generate(rng, n_rooms, size, house_id)
        if house is not None:
            return house
    raise HouseError(f"could not generate {n_rooms} rooms on a {size}x{size} grid after {max_retries} attempts")


def _try_generate(rng, n_rooms, size, house_id):
    rects = _partition(rng, size, n_rooms)
    if rects is None:
        return None
    grid = np.full((size, size), WALL, dtype=np.int8)
    room_of = np.full((size, size), -1, dtype=np.int16)
    for i, (r0, c0, r1, c1) in enumerate(rects):
        grid[r0:r1 + 1, c0:c1 + 1] = FLOOR
        room_of[r0:r1 + 1, c0:c1 + 1] = i

    # candidate door cells: wall cells separating two different rooms
    candidates = {}
    for r in range(1, size - 1):
        for c in range(1, size - 1):
            if grid[r, c] != WALL:
                continue
            for (a, b), (p, q) in ((((r, c - 1), (r, c + 1)), ((r - 1, c), (r + 1, c))),
                                   (((r - 1, c), (r + 1, c)), ((r, c - 1), (r, c + 1)))):
                ra, rb = room_of[a], room_of[b]
                if ra >= 0 and rb >= 0 and ra != rb and grid[p] == WALL and grid[q] == WALL:
                    key = (min(ra, rb), max(ra, rb))
                    candidates.setdefault(key, []).append((r, c))
    # random spanning tree over rooms
    edges = sorted(candidates)
    rng.shuffle(edges)
    parent = list(range(n_rooms))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    doors = []
    for a, b in edges:
        if find(a) != find(b):
            parent[find(a)] = find(b)
            cells = candidates[(a, b)]
            cell = cells[int(rng.integers(len(cells)))]
            grid[cell] = DOOR
            doors.append((tuple(int(v) for v in cell), int(a), int(b)))
    if len({find(i) for i in range(n_rooms)}) != 1:
        return None

    kinds = [int(k) for k in rng.permutation(len(ROOM_KINDS))[:n_rooms]]
    objects = _place_objects(rng, grid, room_of, rects)
    if objects is None:
        return None
    house = HouseMap(house_id, grid, room_of, kinds, objects, doors)
    if not is_connected(house.walkable):
        return None
    return house


def _place_objects(rng, grid, room_of, rects):
    walk = grid != WALL
    near_door = np.zeros_like(walk)
    for r, c in np.argwhere(grid == DOOR):
        for dr, dc in DIRS:
            near_door[r + dr, c + dc] = True
    objects = []
    taken = set()
    for i, (r0, c0, r1, c1) in enumerate(rects):
        area = (r1 - r0 + 1) * (c1 - c0 + 1)
        want = int(min(3, max(1, area // 8)))
        placed = 0
        cells = [(r, c) for r in range(r0, r1 + 1) for c in range(c0, c1 + 1)]
        for _ in range(40):
            if placed >= want:
                break
            # bias toward a neighbour of an existing object to create next-to pairs
            mine = [o for o in objects if room_of[o.cell] == i]
            if mine and rng.random() < 0.4:
                anchor = mine[int(rng.integers(len(mine)))].cell
                dr, dc = DIRS[int(rng.integers(4))]
                cell = (anchor[0] + dr, anchor[1] + dc)
            else:
                cell = cells[int(rng.integers(len(cells)))]
            if cell in taken or grid[cell] != FLOOR or room_of[cell] != i or near_door[cell]:
                continue
            against_wall = any(grid[cell[0] + dr, cell[1] + dc] == WALL for dr, dc in DIRS)
            if not against_wall:
                continue
            trial = walk.copy()
            for o in objects:
                trial[o.cell] = False
            trial[cell] = False
            if not is_connected(trial):
                continue
            if not any(trial[cell[0] + dr, cell[1] + dc] for dr, dc in DIRS):
                continue
            objects.append(HouseObject(len(objects), int(rng.integers(len(OBJECT_KINDS))),
                                       int(rng.integers(len(COLORS))), (int(cell[0]), int(cell[1]))))
            taken.add(cell)
            placed += 1
        if placed == 0:
            return None
    return objects


# ------------------------------------------------------------------ dynamics

def step(house, pose, action):
    action = Action(action)
    r, c, h = pose
    if action == Action.FORWARD:
        dr, dc = DIRS[h]
        if house.is_walkable((r + dr, c + dc)):
            return AgentPose(r + dr, c + dc, h)
        return pose
    if action == Action.TURN_LEFT:
        return AgentPose(r, c, (h - 1) % 4)
    if action == Action.TURN_RIGHT:
        return AgentPose(r, c, (h + 1) % 4)
    return pose


def replay(house, pose, actions):
    poses = [pose]
    for a in actions:
        if Action(a) == Action.STOP:
            break
        pose = step(house, pose, a)
        poses.append(pose)
    return poses


# ----------------------------------------------------------------- rendering

def render(house, pose, size=FRAME_SIZE, max_depth=MAX_DEPTH):
    """Egocentric column-raycast frame, (size, size, 3) float32 in [0, 1]."""
    key = ("frame", pose, size, max_depth)
    cached = house._cache.get(key)
    if cached is not None:
        return cached
    H = W = size
    frame = np.empty((H, W, 3), dtype=np.float64)
    frame[: H // 2] = CEILING_RGB
    frame[H // 2:] = FLOOR_RGB
    r, c, h = pose
    dr, dc = DIRS[h]
    pr, pc = DIRS[(h + 1) % 4]  # camera plane points right; |plane| = |dir| gives 90 deg
    grid = house.grid
    R, C = grid.shape
    for x in range(W):
        cam = 2.0 * (x + 0.5) / W - 1.0
        ray_r = dr + pr * cam
        ray_c = dc + pc * cam
        hit = _cast(house, r, c, ray_r, ray_c, max_depth)
        if hit is None:
            continue
        perp, color, doors = hit
        dist = perp + 0.5
        shade = min(1.0, 2.0 / (1.0 + dist))
        line = H / perp
        top = max(0, int(np.floor(H / 2 - line / 2)))
        bot = min(H, int(np.ceil(H / 2 + line / 2)))
        frame[top:bot, x] = color * shade
        for dperp in doors:
            dline = H / dperp
            dtop = max(0, int(np.floor(H / 2 - dline / 2)))
            band = max(1, int(dline // 6))
            frame[dtop:min(H, dtop + band), x] = DOOR_RGB * min(1.0, 2.0 / (1.5 + dperp))
    out = np.clip(frame, 0.0, 1.0).astype(np.float32)
    out.flags.writeable = False
    house._cache[key] = out
    return out


def _cast(house, r, c, ray_r, ray_c, max_depth):
    # DDA over grid cells from the agent's cell centre
    pos_r, pos_c = r + 0.5, c + 0.5
    map_r, map_c = r, c
    inf = float("inf")
    delta_r = abs(1.0 / ray_r) if ray_r != 0 else inf
    delta_c = abs(1.0 / ray_c) if ray_c != 0 else inf
    if ray_r < 0:
        step_r, side_r = -1, (pos_r - map_r) * delta_r
    else:
        step_r, side_r = 1, (map_r + 1.0 - pos_r) * delta_r
    if ray_c < 0:
        step_c, side_c = -1, (pos_c - map_c) * delta_c
    else:
        step_c, side_c = 1, (map_c + 1.0 - pos_c) * delta_c
    room = house.room_of[r, c]
    doors = []
    R, C = house.grid.shape
    while True:
        if side_r < side_c:
            perp = side_r
            side_r += delta_r
            map_r += step_r
        else:
            perp = side_c
            side_c += delta_c
            map_c += step_c
        if perp > max_depth or not (0 <= map_r < R and 0 <= map_c < C):
            return None
        cell = (map_r, map_c)
        kind = house.grid[cell]
        if kind == WALL:
            tint = ROOM_TINTS[house.rooms[room]] if room >= 0 else ROOM_TINTS[-1]
            return perp, tint, doors
        obj = house.object_at.get(cell)
        if obj is not None:
            return perp, PALETTE[obj.color * 8 + obj.kind % 8], doors
        if kind == DOOR:
            doors.append(perp)
        else:
            room = house.room_of[cell]


# ---------------------------------------------------------------- BFS oracles

def _forward_neighbors(house, pose):
    for a in MOVES:
        yield a, step(house, pose, a)


def shortest_path(house, start, goal_cell):
    """Minimal action list from ``start`` to any pose on ``goal_cell``, ending with STOP.

    Breadth-first over the pose graph; ties broken by the order
    FORWARD < TURN_LEFT < TURN_RIGHT.
    """
    goal_cell = tuple(goal_cell)
    start = AgentPose(*start)
    if start.cell == goal_cell:
        return [Action.STOP]
    parent = {start: None}
    queue = deque([start])
    while queue:
        pose = queue.popleft()
        for a, nxt in _forward_neighbors(house, pose):
            if nxt in parent:
                continue
            parent[nxt] = (pose, a)
            if nxt.cell == goal_cell:
                actions = [Action.STOP]
                cur = nxt
                while parent[cur] is not None:
                    prev, act = parent[cur]
                    actions.append(act)
                    cur = prev
                return actions[::-1]
            queue.append(nxt)
    raise HouseError(f"goal {goal_cell} unreachable from {tuple(start)} in {house.house_id}")


def distance_field(house, target_cell):
    """(R, C, 4) int array: actions needed from each pose to reach target_cell; -1 if unreachable."""
    target_cell = tuple(int(v) for v in target_cell)
    key = ("dist", target_cell)
    cached = house._cache.get(key)
    if cached is not None:
        return cached
    if not house.is_walkable(target_cell):
        raise HouseError(f"target {target_cell} is not a walkable cell")
    R, C = house.grid.shape
    dist = np.full((R, C, 4), -1, dtype=np.int32)
    queue = deque()
    for h in range(4):
        dist[target_cell + (h,)] = 0
        queue.append((target_cell[0], target_cell[1], h))
    walk = house.walkable
    while queue:
        r, c, h = queue.popleft()
        d = dist[r, c, h] + 1
        # predecessors: turning into this heading, or stepping forward into this cell
        preds = [(r, c, (h + 1) % 4), (r, c, (h - 1) % 4)]
        dr, dc = DIRS[h]
        pr, pc = r - dr, c - dc
        if 0 <= pr < R and 0 <= pc < C and walk[pr, pc]:
            preds.append((pr, pc, h))
        for p in preds:
            if dist[p] < 0:
                dist[p] = d
                queue.append(p)
    dist.flags.writeable = False
    house._cache[key] = dist
    return dist


def geodesic_dist(house, pose, target_cell):
    d = int(distance_field(house, target_cell)[pose[0], pose[1], pose[2]])
    if d < 0:
        raise HouseError(f"target {tuple(target_cell)} unreachable from {tuple(pose)}")
    return d


class Spawn(NamedTuple):
    pose: AgentPose
    distance: int
    fallback: bool


def spawn_at_distance(house, target_cell, k, seed):
    """A pose exactly ``k`` actions from target_cell, uniformly chosen under ``seed``.

    Falls back to the largest attainable distance below ``k`` (flagged).
    """
    dist = distance_field(house, target_cell)
    reachable = dist[house.walkable]
    if reachable.size == 0 or reachable.max() < 1:
        raise HouseError("no pose at distance >= 1 from the target")
    want = int(k)
    cand = np.argwhere(dist == want)
    fallback = False
    if len(cand) == 0:
        below = dist[(dist >= 1) & (dist <= want)]
        if below.size == 0:
            raise HouseError("no pose at distance >= 1 from the target")
        want = int(below.max())
        cand = np.argwhere(dist == want)
        fallback = True
    rng = np.random.default_rng(seed)
    r, c, h = cand[int(rng.integers(len(cand)))]
    return Spawn(AgentPose(int(r), int(c), int(h)), want, fallback)
