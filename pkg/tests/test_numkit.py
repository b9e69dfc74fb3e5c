import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tokengate.numkit import (
    EmptyInput,
    NonFinite,
    RngStream,
    central_diff_directional,
    derive_id,
    entropy_from_logits,
    log_softmax,
    random_unit,
    safe_log,
    sigmoid,
    sigmoid_array,
)

finite = st.floats(-700, 700, allow_nan=False)


def test_sigmoid_oracle(oracles):
    assert sigmoid(1.0) == pytest.approx(oracles["sigmoid_1"], abs=1e-12)
    assert sigmoid_array(np.array([1.0]))[0] == pytest.approx(oracles["sigmoid_1"], abs=1e-12)


def test_sigmoid_extremes_do_not_overflow():
    assert sigmoid(-800.0) == 0.0
    assert sigmoid(800.0) == 1.0
    assert np.all(np.isfinite(sigmoid_array(np.array([-1e4, 0.0, 1e4]))))


@given(finite)
def test_sigmoid_symmetry(x):
    assert sigmoid(x) + sigmoid(-x) == pytest.approx(1.0, abs=1e-15)


def test_log_softmax_oracle(oracles):
    np.testing.assert_allclose(log_softmax([1.0, 0.0, 0.0]), oracles["log_softmax_100"], atol=1e-12)


def test_log_softmax_empty():
    with pytest.raises(EmptyInput):
        log_softmax([])


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=30))
def test_log_softmax_normalizes(z):
    assert np.exp(log_softmax(z)).sum() == pytest.approx(1.0, abs=1e-12)


def test_entropy_oracle(oracles):
    assert entropy_from_logits([1.0, 0.0]) == pytest.approx(oracles["entropy_10"], abs=1e-12)


@given(st.lists(st.floats(-300, 300), min_size=2, max_size=64))
def test_entropy_bounds(z):
    h = entropy_from_logits(z)
    assert 0.0 <= h <= math.log(len(z)) + 1e-12


def test_entropy_one_hot_limit():
    assert entropy_from_logits([1000.0, 0.0, 0.0]) == 0.0


def test_safe_log_floor():
    assert safe_log(0.0) == pytest.approx(math.log(1e-12))


def test_central_diff_sin():
    d = central_diff_directional(lambda x: math.sin(x[0]), np.zeros(1), np.ones(1), 1e-4)
    assert d == pytest.approx(1.0, abs=1e-8)


def test_central_diff_nonfinite():
    with pytest.raises(NonFinite):
        central_diff_directional(lambda x: math.inf, np.zeros(2), np.ones(2), 1e-3)


def test_rng_streams_are_reproducible_and_distinct():
    a = RngStream(3, 7).uniform(5)
    b = RngStream(3, 7).uniform(5)
    c = RngStream(3, 8).uniform(5)
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)


def test_derive_is_order_sensitive():
    assert derive_id(1, 2) != derive_id(2, 1)
    assert RngStream(0, 1).derive(4).stream_id == RngStream(0, 1).derive(4).stream_id


def test_sample_categorical_matches_distribution():
    rng = RngStream(0, 1)
    logp = log_softmax(np.log([0.1, 0.2, 0.7]))
    draws = np.bincount([rng.sample_categorical(logp) for _ in range(20000)], minlength=3) / 20000
    np.testing.assert_allclose(draws, [0.1, 0.2, 0.7], atol=0.015)


def test_random_unit_norm():
    v = random_unit(RngStream(1, 2), 100)
    assert np.linalg.norm(v) == pytest.approx(1.0)
