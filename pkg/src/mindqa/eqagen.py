"""Question/answer episodes with expert shortest-path demonstrations and
environment-disjoint splits."""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import gridhouse as gh
from .gridhouse import Action, AgentPose

TEMPLATES = {
    "location": "what room is the <OBJ> located in",
    "color": "what color is the <OBJ>",
    "color_room": "what color is the <OBJ> in the <ROOM>",
    "preposition": "what is next to the <OBJ> in the <ROOM>",
}
TEMPLATE_KINDS = tuple(TEMPLATES)
MAX_ANSWERS = 172


class DatasetError(RuntimeError):
    pass


def _words(name):
    return name.split("_")


def question_tokens(kind, obj_kind, room_kind=None):
    out = []
    for tok in TEMPLATES[kind].split():
        if tok == "<OBJ>":
            out.extend(_words(gh.OBJECT_KINDS[obj_kind]))
        elif tok == "<ROOM>":
            out.extend(_words(gh.ROOM_KINDS[room_kind]))
        else:
            out.append(tok)
    return out


@dataclass
class Vocabulary:
    words: list
    answers: list

    def __post_init__(self):
        self.word_ids = {w: i for i, w in enumerate(self.words)}
        self.answer_ids = {a: i for i, a in enumerate(self.answers)}
        if len(self.answers) > MAX_ANSWERS:
            raise DatasetError(f"answer space of {len(self.answers)} exceeds {MAX_ANSWERS}")

    def encode(self, tokens):
        try:
            return [self.word_ids[t] for t in tokens]
        except KeyError as e:
            raise DatasetError(f"unknown question token {e.args[0]!r}") from None

    def decode(self, ids):
        return [self.words[i] for i in ids]

    def to_json(self):
        return {"words": self.words, "answers": self.answers}

    @classmethod
    def from_json(cls, d):
        return cls(list(d["words"]), list(d["answers"]))


def build_vocabulary(houses):
    """Question words from all templates/kinds; answers attested by the population."""
    if not houses:
        raise DatasetError("empty house population")
    words = set()
    for text in TEMPLATES.values():
        words.update(t for t in text.split() if not t.startswith("<"))
    for name in gh.OBJECT_KINDS + gh.ROOM_KINDS:
        words.update(_words(name))
    answers = set()
    for h in houses:
        for o in h.objects:
            answers.add(gh.COLORS[o.color])
            answers.add(gh.ROOM_KINDS[h.rooms[h.room_of[o.cell]]])
            for n in h.neighbors_of(o):
                answers.add(gh.OBJECT_KINDS[n.kind])
    return Vocabulary(sorted(words), sorted(answers))


@dataclass
class Episode:
    house_id: str
    template: str
    question: list  # token ids
    answer: int
    target: AgentPose  # cell adjacent to the object, facing it
    object_id: int
    spawn: AgentPose
    spawn_k: int
    actions: list  # expert actions, ending with STOP
    fallback: bool = False
    episode_id: str = ""

    @property
    def target_cell(self):
        return self.target.cell

    def to_json(self):
        return {
            "episode_id": self.episode_id,
            "house_id": self.house_id,
            "template": self.template,
            "question": list(self.question),
            "answer": self.answer,
            "target": self.target.to_json(),
            "object_id": self.object_id,
            "spawn": self.spawn.to_json(),
            "spawn_k": self.spawn_k,
            "fallback": self.fallback,
            "actions": [Action(a).symbol for a in self.actions],
        }

    @classmethod
    def from_json(cls, d):
        return cls(
            house_id=d["house_id"],
            template=d["template"],
            question=[int(v) for v in d["question"]],
            answer=int(d["answer"]),
            target=AgentPose.from_json(d["target"]),
            object_id=int(d["object_id"]),
            spawn=AgentPose.from_json(d["spawn"]),
            spawn_k=int(d["spawn_k"]),
            actions=[Action.from_symbol(s) for s in d["actions"]],
            fallback=bool(d.get("fallback", False)),
            episode_id=d.get("episode_id", ""),
        )


def _facing_targets(house, obj):
    out = []
    r, c = obj.cell
    for h, (dr, dc) in enumerate(gh.DIRS):
        cell = (r - dr, c - dc)
        if house.is_walkable(cell):
            out.append(AgentPose(cell[0], cell[1], h))
    return out


def candidate_questions(house, vocab):
    """All unambiguous (template, object, room, answer string) tuples in a house."""
    by_kind = {}
    by_kind_room = {}
    for o in house.objects:
        room = house.room_of[o.cell]
        by_kind.setdefault(o.kind, []).append(o)
        by_kind_room.setdefault((o.kind, room), []).append(o)
    out = []
    for o in house.objects:
        room = int(house.room_of[o.cell])
        room_kind = house.rooms[room]
        if not _facing_targets(house, o):
            continue
        if len(by_kind[o.kind]) == 1:
            out.append(("location", o, None, gh.ROOM_KINDS[room_kind]))
            out.append(("color", o, None, gh.COLORS[o.color]))
        if len(by_kind_room[(o.kind, room)]) == 1:
            out.append(("color_room", o, room_kind, gh.COLORS[o.color]))
            nbrs = house.neighbors_of(o)
            if len(nbrs) == 1:
                out.append(("preposition", o, room_kind, gh.OBJECT_KINDS[nbrs[0].kind]))
    return [q for q in out if q[3] in vocab.answer_ids]


def generate_episode(house, vocab, seed, spawn_k=10, template=None, max_tries=20):
    rng = np.random.default_rng(seed)
    cands = candidate_questions(house, vocab)
    if template is not None:
        cands = [q for q in cands if q[0] == template]
    if not cands:
        raise DatasetError(f"no unambiguous question in {house.house_id}")
    for _ in range(max_tries):
        # pick the template first so templates are balanced
        kinds = sorted({q[0] for q in cands})
        kind = kinds[int(rng.integers(len(kinds)))]
        pool = [q for q in cands if q[0] == kind]
        kind, obj, room_kind, answer = pool[int(rng.integers(len(pool)))]
        targets = _facing_targets(house, obj)
        target = targets[int(rng.integers(len(targets)))]
        try:
            spawn = gh.spawn_at_distance(house, target.cell, spawn_k, int(rng.integers(2**31)))
        except gh.HouseError:
            continue
        actions = expert_actions_to_target(house, spawn.pose, target)
        tokens = question_tokens(kind, obj.kind, room_kind)
        return Episode(
            house_id=house.house_id,
            template=kind,
            question=vocab.encode(tokens),
            answer=vocab.answer_ids[answer],
            target=target,
            object_id=obj.id,
            spawn=spawn.pose,
            spawn_k=spawn.distance,
            actions=actions,
            fallback=spawn.fallback,
        )
    raise DatasetError(f"could not build an episode in {house.house_id}")


def expert_actions_to_target(house, pose, target):
    """Shortest path to the target cell, plus the turns needed to face the object."""
    acts = gh.shortest_path(house, pose, target.cell)[:-1]
    end = gh.replay(house, pose, acts)[-1]
    diff = (target.heading - end.heading) % 4
    acts += {0: [], 1: [Action.TURN_RIGHT], 2: [Action.TURN_LEFT, Action.TURN_LEFT], 3: [Action.TURN_LEFT]}[diff]
    return acts + [Action.STOP]


def ground_truth(house, vocab, episode):
    """Recompute o* for an episode from the house map."""
    obj = next(o for o in house.objects if o.id == episode.object_id)
    room_kind = house.rooms[house.room_of[obj.cell]]
    if episode.template == "location":
        ans = gh.ROOM_KINDS[room_kind]
    elif episode.template in ("color", "color_room"):
        ans = gh.COLORS[obj.color]
    else:
        (n,) = house.neighbors_of(obj)
        ans = gh.OBJECT_KINDS[n.kind]
    return vocab.answer_ids[ans]


@dataclass
class SplitSpec:
    train: list
    val: list
    test: list

    def __post_init__(self):
        a, b, c = set(self.train), set(self.val), set(self.test)
        if a & b or a & c or b & c:
            raise DatasetError("splits overlap")

    def to_json(self):
        return {"train": self.train, "val": self.val, "test": self.test}

    @classmethod
    def from_json(cls, d):
        return cls(list(d["train"]), list(d["val"]), list(d["test"]))


def make_splits(house_ids, ratios=(0.8, 0.1, 0.1), seed=0):
    """Partition houses: floor each share, hand leftovers to the largest remainders."""
    ids = list(house_ids)
    n = len(ids)
    if n < 3:
        raise DatasetError("need at least 3 houses for three nonempty splits")
    if abs(sum(ratios) - 1.0) > 1e-9 or len(ratios) != 3:
        raise DatasetError("ratios must be three numbers summing to 1")
    raw = [r * n for r in ratios]
    counts = [math.floor(x + 1e-9) for x in raw]
    order = sorted(range(3), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    for i in range(3):
        if counts[i] == 0:
            j = max(range(3), key=lambda k: counts[k])
            if counts[j] <= 1:
                raise DatasetError("too few houses for three nonempty splits")
            counts[j] -= 1
            counts[i] += 1
    rng = np.random.default_rng(seed)
    perm = [ids[i] for i in rng.permutation(n)]
    a, b = counts[0], counts[0] + counts[1]
    return SplitSpec(sorted(perm[:a]), sorted(perm[a:b]), sorted(perm[b:]))


# -------------------------------------------------------------------- files

def write_dataset(episodes, path):
    with open(path, "w") as f:
        for ep in episodes:
            f.write(json.dumps(ep.to_json(), sort_keys=True))
            f.write("\n")


def read_dataset(path):
    episodes = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                episodes.append(Episode.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise DatasetError(f"{path}:{lineno}: malformed episode ({e})") from None
    return episodes


@dataclass
class Dataset:
    houses: dict
    vocab: Vocabulary
    splits: SplitSpec
    episodes: dict = field(default_factory=dict)  # split -> list[Episode]

    def house(self, episode):
        return self.houses[episode.house_id]

    def save(self, out_dir):
        import os
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "houses.json"), "w") as f:
            json.dump([self.houses[k].to_json() for k in sorted(self.houses)], f, sort_keys=True)
        with open(os.path.join(out_dir, "vocab.json"), "w") as f:
            json.dump(self.vocab.to_json(), f, indent=1)
        with open(os.path.join(out_dir, "splits.json"), "w") as f:
            json.dump(self.splits.to_json(), f, indent=1)
        for name, eps in self.episodes.items():
            write_dataset(eps, os.path.join(out_dir, f"episodes_{name}.jsonl"))

    @classmethod
    def load(cls, out_dir):
        import os
        with open(os.path.join(out_dir, "houses.json")) as f:
            houses = {d["house_id"]: gh.HouseMap.from_json(d) for d in json.load(f)}
        with open(os.path.join(out_dir, "vocab.json")) as f:
            vocab = Vocabulary.from_json(json.load(f))
        with open(os.path.join(out_dir, "splits.json")) as f:
            splits = SplitSpec.from_json(json.load(f))
        episodes = {}
        for name in ("train", "val", "test"):
            p = os.path.join(out_dir, f"episodes_{name}.jsonl")
            if os.path.exists(p):
                episodes[name] = read_dataset(p)
        return cls(houses, vocab, splits, episodes)


def generate_dataset(seed=0, n_houses=40, episodes_per_house=10, n_rooms=4, size=15,
                     spawn_ks=(10, 20, 30), ratios=(0.8, 0.1, 0.1)):
    houses = {}
    for i in range(n_houses):
        h = gh.generate_house(seed * 100003 + i, n_rooms=n_rooms, size=size, house_id=f"h{seed}-{i:03d}")
        houses[h.house_id] = h
    vocab = build_vocabulary(list(houses.values()))
    splits = make_splits(sorted(houses), ratios, seed)
    episodes = {}
    for name, ids in (("train", splits.train), ("val", splits.val), ("test", splits.test)):
        eps = []
        for hid in ids:
            for j in range(episodes_per_house):
                k = spawn_ks[j % len(spawn_ks)]
                try:
                    ep = generate_episode(houses[hid], vocab, [seed, int(hid.rsplit("-", 1)[1]), j], spawn_k=k)
                except DatasetError:
                    continue
                ep.episode_id = f"{hid}/{j}"
                eps.append(ep)
        episodes[name] = eps
    return Dataset(houses, vocab, splits, episodes)


def house_episodes(house, vocab, n, seed=0, spawn_ks=(10, 20, 30), prefix=None):
    """``n`` episodes in one house, ids '<house>/<j>'; skipped draws are retried with fresh seeds."""
    prefix = prefix or house.house_id
    eps, j, tries = [], 0, 0
    while len(eps) < n:
        if tries > 20 * n:
            raise DatasetError(f"could only generate {len(eps)} of {n} episodes in {house.house_id}")
        tries += 1
        try:
            ep = generate_episode(house, vocab, [seed, tries], spawn_k=spawn_ks[j % len(spawn_ks)])
        except DatasetError:
            continue
        ep.episode_id = f"{prefix}/{j}"
        eps.append(ep)
        j += 1
    return eps


def world_dataset(seed=0, size=9, n_rooms=2, n_episodes=50, spawn_ks=(10, 20, 30)):
    """A single-house dataset; every episode goes to the train split (held-out
    evaluation uses fresh spawns in the same house)."""
    house = gh.generate_house(seed, n_rooms=n_rooms, size=size, house_id=f"w{seed}")
    vocab = build_vocabulary([house])
    splits = SplitSpec([house.house_id], [], [])
    eps = house_episodes(house, vocab, n_episodes, seed, spawn_ks)
    return Dataset({house.house_id: house}, vocab, splits, {"train": eps, "val": [], "test": []})
