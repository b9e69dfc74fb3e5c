import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from _oracle import oracle_params
from tokengate.env import L_RESP, VOCAB, Environment, SkillText
from tokengate.numkit import RngStream
from tokengate.policy import (
    MissingSkill,
    PolicyParams,
    ShapeMismatch,
    TokenOutOfRange,
    backward_weighted_logprob,
    feature_dim,
    featurize,
    forward,
    init_params,
    per_token_grad_norms,
    rescore,
    rollout,
    slices,
    token_logprob_and_entropy,
    zeros,
)

V = 64
SL = slices(V)


def test_empty_context_features():
    x = featurize((), (), None, (), 0, 0, 8, V)
    assert x.shape == (feature_dim(V),)
    assert x[SL["bias"]][0] == 1.0 and x.sum() == 1.0


def test_skill_only_changes_skill_slice():
    sk = SkillText(VOCAB.ids(["goto", "B"]), frozenset())
    a = featurize((3, 4), (5, 6), None, (7,), 1, 1, 8, V)
    b = featurize((3, 4), (5, 6), sk, (7,), 1, 1, 8, V)
    diff = np.flatnonzero(a != b)
    assert diff.min() >= SL["skill"].start and diff.max() < SL["skill"].stop


def test_bag_clipping_and_range():
    x = featurize((), (9,) * 5, None, (), 0, 0, 8, V)
    assert x[SL["obs"]][9] == 3.0


def test_token_out_of_range():
    with pytest.raises(TokenOutOfRange):
        featurize((64,), (), None, (), 0, 0, 8, V)
    with pytest.raises(TokenOutOfRange):
        token_logprob_and_entropy(zeros(), np.zeros(feature_dim(V)), 99)


def test_zero_params_uniform(oracles):
    p = zeros()
    x = featurize((3,), (4,), None, (), 0, 0, 8, V)
    assert np.all(forward(p, x) == 0.0)
    lp, h = token_logprob_and_entropy(p, x, 5)
    assert lp == pytest.approx(oracles["uniform_logprob_64"], abs=1e-12)
    assert h == pytest.approx(math.log(64), abs=1e-12)


def test_dominant_logit(oracles):
    p = zeros()
    p.b2[7] = 10.0
    lp, _ = token_logprob_and_entropy(p, featurize((), (), None, (), 0, 0, 8, V), 7)
    assert lp == pytest.approx(oracles["dominant_logit_10_v64"], abs=1e-12)


def test_forward_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        forward(zeros(), np.zeros(10))


def test_forward_lipschitz():
    p = init_params(seed=1)
    x = featurize((3, 4), (5, 6, 6), None, (7,), 1, 1, 8, V)
    q = p.copy()
    q.W1[0, 3] += 1e-9
    assert np.abs(forward(p, x) - forward(q, x)).max() <= 1e-6


def test_init_is_glorot_and_seeded():
    a, b = init_params(seed=3), init_params(seed=3)
    np.testing.assert_array_equal(a.flat(), b.flat())
    bound = math.sqrt(6 / (feature_dim(V) + 64))
    assert np.abs(a.W1).max() <= bound
    assert np.all(a.b1 == 0) and np.all(a.b2 == 0)


def test_copy_prior_init():
    p = init_params(seed=2, skill_gain=3.0, obs_gain=2.0)
    base = init_params(seed=2)
    np.testing.assert_allclose(p.W1[:, SL["skill"]], base.W1[:, SL["skill"]] + 3.0 * base.W2.T)
    np.testing.assert_allclose(p.W1[:, SL["obs"]], base.W1[:, SL["obs"]] + 2.0 * base.W2.T)


def test_save_load_roundtrip(tmp_path):
    p = init_params(seed=4, H=16)
    p.step = 12
    p.save(tmp_path / "p.bin")
    q = PolicyParams.load(tmp_path / "p.bin")
    np.testing.assert_array_equal(p.flat(), q.flat())
    assert (q.step, q.H) == (12, 16)


def test_snapshot_is_read_only():
    s = init_params(seed=0).snapshot("old")
    with pytest.raises(ValueError):
        s.params.W1[0, 0] = 1.0
    with pytest.raises(ValueError):
        init_params().snapshot("teacher")


def test_rollout_deterministic_and_bounded(catalog):
    env = Environment(catalog)
    task = catalog["put_key_box"]
    p = init_params(seed=0)
    a = rollout(p, env, task, None, RngStream(5, 0))
    b = rollout(p, env, task, None, RngStream(5, 0))
    np.testing.assert_array_equal(a.tokens, b.tokens)
    assert len(a) <= task.horizon * (L_RESP + 1)
    assert a.num_turns <= task.horizon
    assert np.all(a.entropy >= 0) and np.all(a.entropy <= math.log(V) + 1e-12)


def test_zero_params_sample_uniformly(catalog):
    env = Environment(catalog)
    toks = np.concatenate([rollout(zeros(), env, "put_key_box", None, RngStream(i, 0)).tokens for i in range(60)])
    counts = np.bincount(toks, minlength=V)
    assert counts.min() > 0
    assert np.all(np.abs(counts / counts.sum() - 1 / V) < 0.01)


def test_greedy_oracle_params_succeed(catalog):
    env = Environment(catalog)
    for task in catalog.for_env("treasure_rooms"):
        tr = rollout(oracle_params(task), env, task, None, None, temperature=0)
        assert tr.reward == 1.0


def test_rescore_modes(catalog):
    env = Environment(catalog)
    p = init_params(seed=0, skill_gain=2.0)
    tr = rollout(p, env, "put_key_box", None, RngStream(0, 0))
    assert np.array_equal(rescore(p, tr, "student"), tr.student_lp)
    empty = SkillText((), frozenset())
    np.testing.assert_array_equal(rescore(p, tr, "teacher", empty), tr.student_lp)
    assert not np.allclose(rescore(p, tr, "teacher", catalog["put_key_box"].skill), tr.student_lp)
    np.testing.assert_array_equal(rescore(p.snapshot("reference"), tr, "reference"), rescore(p.copy(), tr))
    with pytest.raises(MissingSkill):
        rescore(p, tr, "teacher")


def test_backward_matches_finite_differences(catalog):
    env = Environment(catalog)
    p = init_params(64, 16, 0, obs_gain=1.0)
    tr = rollout(p, env, "put_cup_drawer", None, RngStream(1, 0))
    w = RngStream(2, 0).normal(len(tr))
    g = backward_weighted_logprob(p, tr, None, w).flat()

    def f(flat):
        q = p.with_flat(flat)
        lp = rescore(q, tr)
        return float((w * lp).mean())

    rng = RngStream(3, 0)
    x0 = p.flat()
    for k in range(50):
        d = rng.derive(k).normal(x0.size)
        d /= np.linalg.norm(d)
        h = 1e-5
        fd = (f(x0 + h * d) - f(x0 - h * d)) / (2 * h)
        assert abs(fd - g @ d) <= 1e-6 * max(abs(fd), abs(g @ d), 1e-7)


def test_backward_ignores_masked_tokens(catalog):
    env = Environment(catalog)
    p = init_params(64, 16, 0)
    tr = rollout(p, env, "put_cup_drawer", None, RngStream(1, 0))
    tr.mask[::2] = 0.0
    w = np.ones(len(tr))
    w2 = w.copy()
    w2[::2] = 1e6
    np.testing.assert_array_equal(backward_weighted_logprob(p, tr, None, w).flat(),
                                  backward_weighted_logprob(p, tr, None, w2).flat())


def test_weight_shape_mismatch(catalog):
    p = init_params(64, 16, 0)
    tr = rollout(p, Environment(catalog), "put_cup_drawer", None, RngStream(1, 0))
    with pytest.raises(ShapeMismatch):
        backward_weighted_logprob(p, tr, None, np.ones(len(tr) + 1))


@given(st.integers(0, 2**31 - 1))
def test_per_token_norms_positive(seed):
    p = init_params(64, 8, seed % 7)
    rng = RngStream(seed, 0)
    X = np.zeros((3, p.F))
    X[:, -1] = 1.0
    X[:, rng.integers(0, 64, size=3)] = 1.0
    norms = per_token_grad_norms(p, X, rng.integers(0, 64, size=3))
    assert np.all(norms > 0) and np.all(np.isfinite(norms))
