import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tokengate.env import VOCAB, SkillText
from tokengate.numkit import RngStream
from tokengate.skillbank import (
    FULL_MAX_TOKENS,
    EmptyBank,
    RewardOutOfRange,
    SkillBank,
    SkillEntry,
    UnknownEntry,
)


def skill(*words, keys=()):
    return SkillText(VOCAB.ids(words), frozenset(keys))


def two_arm(c=1.0):
    return SkillBank.from_skills([skill("goto", "A"), skill("goto", "B")], c)


def test_ucb_scores_oracle(oracles):
    bank = two_arm()
    bank.entries[0].mean_reward, bank.entries[0].pulls = 0.8, 10
    bank.entries[1].mean_reward, bank.entries[1].pulls = 0.5, 2
    bank.queries["put"] = 12
    assert bank.score(bank.entries[0], "put") == pytest.approx(oracles["ucb_entry1"], abs=1e-12)
    assert bank.score(bank.entries[1], "put") == pytest.approx(oracles["ucb_entry2"], abs=1e-12)
    assert bank.ucb_select("put").id == 1
    assert bank.queries["put"] == 13


def test_unpulled_entries_first_lowest_id():
    bank = two_arm()
    assert bank.ucb_select("t").id == 0
    bank.update_reward(0, 0.0)
    assert bank.ucb_select("t").id == 1


def test_incremental_mean(oracles):
    bank = two_arm()
    e = bank.entries[0]
    e.mean_reward, e.pulls = 0.5, 2
    bank.update_reward(0, 1.0)
    assert (e.mean_reward, e.pulls) == (pytest.approx(oracles["incremental_mean"], abs=1e-15), 3)


@given(st.lists(st.sampled_from([0.0, 0.25, 1.0]), min_size=1, max_size=50))
def test_running_mean_is_exact(rewards):
    bank = two_arm()
    for r in rewards:
        bank.update_reward(1, r)
    assert bank.entries[1].mean_reward == pytest.approx(np.mean(rewards), abs=1e-12)
    assert bank.entries[1].pulls == len(rewards)


def test_reward_range_and_unknown_entry():
    bank = two_arm()
    with pytest.raises(RewardOutOfRange):
        bank.update_reward(0, 1.5)
    with pytest.raises(UnknownEntry):
        bank.update_reward(7, 0.5)


def test_empty_bank():
    with pytest.raises(EmptyBank):
        SkillBank([]).ucb_select("t")


def test_bad_c_ucb():
    with pytest.raises(ValueError):
        SkillBank([], c_ucb=0.0)


def test_keyword_match_first_hit_or_none():
    bank = SkillBank.from_skills([skill("take", "key", keys=["key"]), skill("take", "pen", keys=["pen", "key"])])
    assert bank.km_select(VOCAB.ids(["put", "key", "box"])).id == 0
    assert bank.km_select(VOCAB.ids(["put", "pen", "box"])).id == 1
    assert bank.km_select(VOCAB.ids(["put", "cup"])) is None


def test_full_text_truncates(catalog):
    bank = SkillBank.from_catalog(catalog)
    text = bank.full_text()
    assert len(text.tokens) == FULL_MAX_TOKENS


def test_random_selection_uniform():
    bank = SkillBank.from_skills([skill("goto", r) for r in "ABCD"])
    rng = RngStream(0, 9)
    task = type("T", (), {"task_type": "put", "description": ()})()
    counts = np.bincount([bank.select("random", task, rng.derive(i))[1] for i in range(10_000)], minlength=4)
    assert np.all((counts / 1e4 >= 0.225) & (counts / 1e4 <= 0.275))


def test_stats_roundtrip(tmp_path):
    bank = two_arm()
    bank.ucb_select("put")
    bank.update_reward(0, 1.0)
    bank.save_stats(tmp_path / "s.json")
    other = two_arm()
    other.load_stats(tmp_path / "s.json")
    assert other.stats() == bank.stats()


def test_bandit_prefers_better_arm():
    bank = two_arm()
    hits = 0
    for q in range(200):
        e = bank.ucb_select("t")
        bank.update_reward(e.id, 1.0 if e.id == 0 else 0.0)
        hits += q >= 100 and e.id == 0
    assert hits >= 90
