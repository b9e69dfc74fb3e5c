"""Skill library with UCB, keyword, full and random retrieval."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .env import SEP, VOCAB, Catalog, SkillText, Task
from .numkit import RngStream

FULL_MAX_TOKENS = 128


class EmptyBank(ValueError):
    pass


class UnknownEntry(KeyError):
    pass


class RewardOutOfRange(ValueError):
    pass


@dataclass
class SkillEntry:
    id: int
    skill: SkillText
    mean_reward: float = 0.0
    pulls: int = 0
    source: str = ""


@dataclass
class SkillBank:
    entries: list[SkillEntry]
    c_ucb: float = 1.0
    queries: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.c_ucb <= 0:
            raise ValueError("c_ucb must be positive")

    @classmethod
    def from_skills(cls, skills: Iterable[SkillText], c_ucb: float = 1.0, sources: Sequence[str] = ()):
        sources = list(sources)
        entries = [
            SkillEntry(i, s, source=sources[i] if i < len(sources) else "") for i, s in enumerate(skills)
        ]
        return cls(entries, c_ucb)

    @classmethod
    def from_catalog(cls, catalog: Catalog, c_ucb: float = 1.0, env: str | None = None) -> "SkillBank":
        tasks = [t for t in catalog if env is None or t.env == env]
        return cls.from_skills([t.skill for t in tasks], c_ucb, [t.task_id for t in tasks])

    def entry(self, entry_id: int) -> SkillEntry:
        if not 0 <= entry_id < len(self.entries) or self.entries[entry_id].id != entry_id:
            raise UnknownEntry(entry_id)
        return self.entries[entry_id]

    def score(self, e: SkillEntry, task_type: str) -> float:
        if e.pulls == 0:
            return math.inf
        n_total = max(self.queries.get(task_type, 0), 1)
        return e.mean_reward + self.c_ucb * math.sqrt(math.log(n_total) / e.pulls)

    def _require(self):
        if not self.entries:
            raise EmptyBank("skill bank is empty")

    def ucb_select(self, task_type: str) -> SkillEntry:
        self._require()
        best, best_score = None, -math.inf
        for e in self.entries:  # ids ascending; strict > keeps the lowest id on ties
            s = self.score(e, task_type)
            if s > best_score:
                best, best_score = e, s
        self.queries[task_type] = self.queries.get(task_type, 0) + 1
        return best

    def km_select(self, description: Sequence[int]) -> SkillEntry | None:
        self._require()
        words = set(VOCAB.words(description))
        for e in self.entries:
            if e.skill.keywords & words:
                return e
        return None

    def full_text(self) -> SkillText:
        self._require()
        toks: list[int] = []
        for i, e in enumerate(self.entries):
            if i:
                toks.append(SEP)
            toks.extend(e.skill.tokens)
        toks = toks[:FULL_MAX_TOKENS]
        # bag features clip counts, so only the 32-token cap of SkillText is relaxed here
        return _LongSkill(tuple(toks), frozenset(), "informative")

    def select(self, strategy: str, task: Task, rng: RngStream | None = None):
        """Returns ``(skill_text or None, entry_id or None)``."""
        self._require()
        if strategy == "ucb":
            e = self.ucb_select(task.task_type)
            return e.skill, e.id
        if strategy == "km":
            e = self.km_select(task.description)
            return (e.skill, e.id) if e is not None else (None, None)
        if strategy == "full":
            return self.full_text(), None
        if strategy == "random":
            if rng is None:
                raise ValueError("random retrieval needs an rng stream")
            e = self.entries[rng.choice_index(len(self.entries))]
            return e.skill, e.id
        raise ValueError(f"unknown retrieval strategy {strategy!r}")

    def update_reward(self, entry_id: int, reward: float) -> SkillEntry:
        e = self.entry(entry_id)
        if not 0.0 <= reward <= 1.0:
            raise RewardOutOfRange(f"reward {reward} outside [0, 1]")
        e.pulls += 1
        e.mean_reward += (reward - e.mean_reward) / e.pulls
        return e

    # ---- persistence ------------------------------------------------------ #

    def stats(self) -> dict:
        return {
            "c_ucb": self.c_ucb,
            "queries": dict(sorted(self.queries.items())),
            "entries": [{"id": e.id, "mean_reward": e.mean_reward, "pulls": e.pulls} for e in self.entries],
        }

    def save_stats(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.stats(), fh, indent=1, sort_keys=True)

    def load_stats(self, path: str | Path) -> None:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        self.queries = {k: int(v) for k, v in doc["queries"].items()}
        for rec in doc["entries"]:
            e = self.entry(int(rec["id"]))
            e.mean_reward, e.pulls = float(rec["mean_reward"]), int(rec["pulls"])


class _LongSkill(SkillText):
    """SkillText without the 32-token cap, used for full retrieval."""

    def __post_init__(self):
        pass
