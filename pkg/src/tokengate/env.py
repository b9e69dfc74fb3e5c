"""Synthetic multi-turn token environments with privileged skill text.

Two environments share one 64-token vocabulary:

* ``treasure_rooms``: four rooms, objects and containers; tasks "put X Y".
* ``lookup_qa``: answer a question by following 1-3 chained key lookups.

Each turn the agent emits up to ``L_RESP`` content tokens followed by END.
The emitted tokens are resolved against the admissible actions by token
overlap: the unique admissible action sharing the most tokens with the
response is executed; no overlap or a tie is a malformed action.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from .numkit import RngStream, derive_id

L_RESP = 4
MAX_HORIZON = 16
MAX_SKILL_LEN = 32

PAD, END, SEP = 0, 1, 2

_RESERVED = ["<pad>", "<end>", "<sep>"]
VERBS = ["goto", "take", "put", "query", "answer"]
MARKERS = ["in", "see", "holding", "nothing", "invalid", "result", "wrong"]
ROOMS = ["A", "B", "C", "D"]
OBJECTS = ["key", "apple", "book", "cup", "coin", "lamp", "pen", "ball", "shoe", "ring"]
CONTAINERS = ["box", "bin", "shelf", "drawer"]
QA_KEYS = [f"k{i}" for i in range(8)]
QA_VALUES = [f"v{i}" for i in range(8)]
DISTRACTORS = [f"w{i}" for i in range(15)]


class UnknownTask(KeyError):
    pass


class EpisodeFinished(RuntimeError):
    pass


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate vocabulary tokens")

    @property
    def size(self) -> int:
        return len(self.tokens)

    def ids(self, words: Iterable[str]) -> tuple[int, ...]:
        try:
            return tuple(self.index[w] for w in words)
        except KeyError as exc:
            raise KeyError(f"token {exc.args[0]!r} not in vocabulary") from None

    def words(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


VOCAB = Vocab(
    _RESERVED + VERBS + MARKERS + ROOMS + OBJECTS + CONTAINERS + QA_KEYS + QA_VALUES + DISTRACTORS
)
assert VOCAB.size == 64
DISTRACTOR_IDS = VOCAB.ids(DISTRACTORS)


@dataclass(frozen=True)
class SkillText:
    tokens: tuple[int, ...]
    keywords: frozenset[str]
    quality: str = "informative"

    def __post_init__(self):
        if len(self.tokens) > MAX_SKILL_LEN:
            raise ValueError(f"skill has {len(self.tokens)} tokens (max {MAX_SKILL_LEN})")
        if self.quality not in ("informative", "distractor"):
            raise ValueError(f"unknown skill quality {self.quality!r}")


@dataclass(frozen=True)
class Task:
    task_id: str
    task_type: str
    description: tuple[int, ...]
    horizon: int
    env: str
    layout: dict = field(default_factory=dict, compare=False, hash=False)
    skill: SkillText | None = field(default=None, compare=False, hash=False)

    def __post_init__(self):
        if not 1 <= self.horizon <= MAX_HORIZON:
            raise ValueError(f"task {self.task_id}: horizon {self.horizon} outside [1, {MAX_HORIZON}]")


@dataclass(frozen=True)
class Observation:
    tokens: tuple[int, ...]
    turn_index: int
    admissible_actions: tuple[tuple[int, ...], ...]
    invalid: bool = False


def resolve_action(tokens: Sequence[int], admissible: Sequence[tuple[int, ...]]):
    """Map an emitted response to an admissible action (END-terminated) or None."""
    content = []
    for t in tokens:
        if t == END:
            break
        content.append(t)
    emitted = set(content) - {PAD, SEP}
    if not emitted:
        return None
    best, best_score, tie = None, 0, False
    for act in admissible:
        score = len(emitted.intersection(act[:-1]))
        if score > best_score:
            best, best_score, tie = act, score, False
        elif score == best_score and score > 0:
            tie = True
    if best is None or tie:
        return None
    return best


# --------------------------------------------------------------------------- #
# transition models (pure functions over hashable states)


class _TreasureRooms:
    name = "treasure_rooms"

    # state: (room, holding, ((obj, place), ...)) where place is a room or container name
    def initial(self, layout: dict):
        objects = tuple(sorted(layout["objects"].items()))
        return (layout["start"], None, objects)

    def _room_of(self, layout, place):
        return layout["containers"].get(place, place)

    def admissible(self, layout, state) -> tuple[tuple[int, ...], ...]:
        room, holding, objects = state
        acts = [VOCAB.ids(["goto", r]) + (END,) for r in ROOMS if r != room]
        if holding is None:
            for obj, place in objects:
                if self._room_of(layout, place) == room:
                    acts.append(VOCAB.ids(["take", obj]) + (END,))
        else:
            for cont, croom in sorted(layout["containers"].items()):
                if croom == room:
                    acts.append(VOCAB.ids(["put", holding, cont]) + (END,))
        return tuple(acts)

    def transition(self, layout, state, action):
        room, holding, objects = state
        words = VOCAB.words(action[:-1])
        verb = words[0]
        if verb == "goto":
            state = (words[1], holding, objects)
        elif verb == "take":
            objs = tuple((o, "held" if o == words[1] else p) for o, p in objects)
            state = (room, words[1], objs)
        elif verb == "put":
            objs = tuple((o, words[2] if o == words[1] else p) for o, p in objects)
            state = (room, None, objs)
        goal = dict(state[2]).get(layout["target"]) == layout["goal"]
        return state, goal

    def observe(self, layout, state) -> tuple[int, ...]:
        room, holding, objects = state
        words = ["in", room, "see"]
        for obj, place in objects:
            if place != "held" and self._room_of(layout, place) == room:
                words.append(obj)
        for cont, croom in sorted(layout["containers"].items()):
            if croom == room:
                words.append(cont)
        words += ["holding", holding or "nothing"]
        return VOCAB.ids(words)


class _LookupQA:
    name = "lookup_qa"

    # state: (last three (key, result) entries, chain progress); older history is unobservable
    def initial(self, layout):
        return ((), 0)

    def admissible(self, layout, state):
        acts = [VOCAB.ids(["query", k]) + (END,) for k in QA_KEYS]
        acts += [VOCAB.ids(["answer", v]) + (END,) for v in QA_VALUES]
        return tuple(acts)

    def transition(self, layout, state, action):
        history, progress = state
        verb, arg = VOCAB.words(action[:-1])
        chain = layout["chain"]
        if verb == "query":
            if progress < len(chain) and arg == chain[progress]:
                progress += 1
            return ((history + ((arg, layout["table"][arg]),))[-3:], progress), False
        # the answer only counts once the whole chain has been followed
        goal = arg == layout["answer"] and progress == len(chain)
        return ((history + (("answer", arg),))[-3:], progress), goal

    def observe(self, layout, state):
        words = ["result"]
        for key, res in state[0]:
            if key == "answer":
                words += ["wrong", res]
            else:
                words += [key, res]
        return VOCAB.ids(words)


_MODELS = {m.name: m for m in (_TreasureRooms(), _LookupQA())}


# --------------------------------------------------------------------------- #
# catalog


class Catalog:
    def __init__(self, tasks: Sequence[Task]):
        self.tasks = {}
        for t in tasks:
            if t.task_id in self.tasks:
                raise ValueError(f"duplicate task_id {t.task_id!r}")
            if t.env not in _MODELS:
                raise ValueError(f"task {t.task_id}: unknown environment {t.env!r}")
            self.tasks[t.task_id] = t

    def __getitem__(self, task_id: str) -> Task:
        try:
            return self.tasks[task_id]
        except KeyError:
            raise UnknownTask(task_id) from None

    def __contains__(self, task_id) -> bool:
        return task_id in self.tasks

    def __iter__(self):
        return iter(self.tasks.values())

    def __len__(self):
        return len(self.tasks)

    def for_env(self, env: str) -> list[Task]:
        return [t for t in self.tasks.values() if t.env == env]

    def to_json(self) -> list[dict]:
        out = []
        for t in self.tasks.values():
            out.append(
                {
                    "task_id": t.task_id,
                    "task_type": t.task_type,
                    "env": t.env,
                    "description": VOCAB.words(t.description),
                    "horizon": t.horizon,
                    "layout": t.layout,
                    "skill": {
                        "tokens": VOCAB.words(t.skill.tokens),
                        "keywords": sorted(t.skill.keywords),
                        "quality": t.skill.quality,
                    },
                }
            )
        return out

    @classmethod
    def from_json(cls, doc: list[dict]) -> "Catalog":
        tasks = []
        for rec in doc:
            sk = rec["skill"]
            skill = SkillText(VOCAB.ids(sk["tokens"]), frozenset(sk["keywords"]), sk.get("quality", "informative"))
            tasks.append(
                Task(
                    task_id=rec["task_id"],
                    task_type=rec["task_type"],
                    description=VOCAB.ids(rec["description"]),
                    horizon=int(rec["horizon"]),
                    env=rec.get("env", "treasure_rooms"),
                    layout=rec.get("layout", {}),
                    skill=skill,
                )
            )
        return cls(tasks)

    @classmethod
    def load(cls, path: str | Path) -> "Catalog":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    def dump(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1)
            fh.write("\n")


def default_catalog() -> Catalog:
    with resources.files("tokengate").joinpath("data/catalog.json").open(encoding="utf-8") as fh:
        return Catalog.from_json(json.load(fh))


def build_default_catalog() -> Catalog:
    """Regenerates data/catalog.json deterministically."""
    tasks = []
    rooms = ROOMS
    for i, obj in enumerate(OBJECTS):
        cont = CONTAINERS[i % len(CONTAINERS)]
        croom = rooms[(i + 1) % 4] if i % 3 else rooms[0]
        oroom = rooms[(rooms.index(croom) + 1 + i % 3) % 4]
        # every container lives in its own room; target container fixed to croom
        others = [c for c in CONTAINERS if c != cont]
        free_rooms = [r for r in rooms if r != croom]
        containers = {cont: croom}
        containers.update(zip(others, free_rooms))
        spare = OBJECTS[(i + 3) % len(OBJECTS)]
        spare_room = rooms[(rooms.index(oroom) + 2) % 4]
        layout = {
            "start": croom,
            "objects": {obj: oroom, spare: spare_room},
            "containers": containers,
            "target": obj,
            "goal": cont,
        }
        skill = ["goto", oroom, "take", obj, "goto", croom, "put", obj, cont]
        tasks.append(
            Task(
                task_id=f"put_{obj}_{cont}",
                task_type="put",
                description=VOCAB.ids(["put", obj, cont]),
                horizon=8,
                env="treasure_rooms",
                layout=layout,
                skill=SkillText(VOCAB.ids(skill), frozenset([obj])),
            )
        )
    for i in range(8):
        depth = 1 + i % 3
        start = QA_KEYS[i]
        chain = [start]
        j = i
        while len(chain) < depth:
            j = (j * 5 + 3) % 8
            if QA_KEYS[j] not in chain:
                chain.append(QA_KEYS[j])
            else:
                j += 1
        answer = QA_VALUES[(3 * i + 1) % 8]
        table = {}
        for a, b in zip(chain, chain[1:]):
            table[a] = b
        table[chain[-1]] = answer
        for k_i, k in enumerate(QA_KEYS):
            table.setdefault(k, QA_VALUES[(k_i * 3 + i) % 8])
        skill = []
        for k in chain:
            skill += ["query", k]
        skill += ["answer", answer]
        tasks.append(
            Task(
                task_id=f"lookup_{start}_d{depth}",
                task_type="lookup",
                description=VOCAB.ids(["answer", start]),
                horizon=depth + 3,
                env="lookup_qa",
                layout={"table": table, "answer": answer, "chain": chain},
                skill=SkillText(VOCAB.ids(skill), frozenset([start])),
            )
        )
    return Catalog(tasks)


# --------------------------------------------------------------------------- #
# episode runner


class Environment:
    """One episode at a time over a catalog; single-owner."""

    def __init__(self, catalog: Catalog | None = None, list_actions: bool = True):
        self.catalog = catalog if catalog is not None else default_catalog()
        self.list_actions = list_actions
        self.task: Task | None = None
        self._state = None
        self.turn_index = 0
        self.done = True

    @property
    def _model(self):
        return _MODELS[self.task.env]

    def reset(self, task: Task | str, rng: RngStream | None = None) -> Observation:
        task_id = task if isinstance(task, str) else task.task_id
        self.task = self.catalog[task_id]
        # layouts are fixed per task; rng is accepted for interface symmetry
        self._state = self._model.initial(self.task.layout)
        self.turn_index = 0
        self.done = False
        return self._observation()

    def _observation(self, invalid: bool = False) -> Observation:
        obs = self._model.observe(self.task.layout, self._state)
        if invalid:
            obs = (VOCAB.index["invalid"],) + obs
        acts = () if self.done else tuple(self.admissible())
        tokens = self.task.description + (SEP,) + obs
        if self.list_actions and acts:
            # the prompt spells out the admissible actions, END markers dropped
            tokens += (SEP,) + tuple(t for a in acts for t in a[:-1])
        return Observation(tokens, self.turn_index, acts, invalid)

    def admissible(self, state=None) -> list[tuple[int, ...]]:
        if self.done:
            raise EpisodeFinished("episode is finished")
        return list(self._model.admissible(self.task.layout, self._state if state is None else state))

    def step(self, action: Sequence[int]) -> tuple[Observation, float, bool]:
        if self.done:
            raise EpisodeFinished("step() called after episode end")
        if len(action) > L_RESP + 1:
            raise ValueError(f"action has {len(action)} tokens (max {L_RESP + 1})")
        act = resolve_action(action, self.admissible())
        reward = 0.0
        if act is not None:
            self._state, goal = self._model.transition(self.task.layout, self._state, act)
            reward = 1.0 if goal else 0.0
        self.turn_index += 1
        self.done = reward == 1.0 or self.turn_index >= self.task.horizon
        return self._observation(invalid=act is None), reward, self.done

    # ---- explicit transition graph -------------------------------------- #

    def graph(self, task: Task | str):
        task = self.catalog[task if isinstance(task, str) else task.task_id]
        return _MODELS[task.env], task.layout


def bfs_oracle(task: Task, catalog: Catalog | None = None) -> list[tuple[int, ...]] | None:
    """Shortest successful action sequence, or None when unreachable within horizon."""
    model = _MODELS[task.env]
    start = model.initial(task.layout)
    queue = deque([(start, [])])
    seen = {start}
    while queue:
        state, path = queue.popleft()
        if len(path) >= task.horizon:
            continue
        for act in model.admissible(task.layout, state):
            nxt, goal = model.transition(task.layout, state, act)
            if goal:
                return path + [act]
            if nxt not in seen:
                seen.add(nxt)
                queue.append((nxt, path + [act]))
    return None


def random_walk_success(task: Task) -> float:
    """Exact success probability of a uniform random walk over admissible actions."""
    model = _MODELS[task.env]
    dist = {model.initial(task.layout): 1.0}
    success = 0.0
    for _ in range(task.horizon):
        nxt_dist: dict = {}
        for state, p in dist.items():
            acts = model.admissible(task.layout, state)
            q = p / len(acts)
            for act in acts:
                nxt, goal = model.transition(task.layout, state, act)
                if goal:
                    success += q
                else:
                    nxt_dist[nxt] = nxt_dist.get(nxt, 0.0) + q
        dist = nxt_dist
    return success


def skill_for(task: Task) -> SkillText:
    if task.skill is None:
        raise UnknownTask(f"{task.task_id} has no authored skill")
    return task.skill


def distractor_skill(task: Task, length: int = 8) -> SkillText:
    """Skill drawn from the unrelated token region; deterministic per task."""
    rng = RngStream(derive_id(*task.task_id.encode()), 0)
    idx = rng.integers(0, len(DISTRACTOR_IDS), size=length)
    return SkillText(tuple(DISTRACTOR_IDS[i] for i in idx), frozenset(), "distractor")
