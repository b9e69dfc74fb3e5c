import numpy as np
import pytest

from tokengate import kernels
from tokengate.env import Environment
from tokengate.numkit import RngStream
from tokengate.policy import init_params, rescore, rollout

compiled = pytest.mark.skipif(kernels.BACKEND != "compiled", reason="extension not built")


def _inputs(seed=0):
    p = init_params(64, 32, seed, skill_gain=2.0, obs_gain=1.0)
    rng = RngStream(seed, 3)
    X = np.where(rng.uniform((6, p.F)) < 0.1, rng.integers(0, 4, size=(6, p.F)), 0).astype(float)
    X[:, -1] = 1.0
    return p, X


@compiled
def test_backends_agree():
    p, X = _inputs()
    lp_c, h_c = kernels.backend("compiled")[1](*p.arrays(), X)
    lp_p, h_p = kernels.backend("python")[1](*p.arrays(), X)
    np.testing.assert_allclose(lp_c, lp_p, atol=1e-12)
    np.testing.assert_allclose(h_c, h_p, atol=1e-12)


def test_python_backend_matches_dense_formula():
    p, X = _inputs(1)
    lp, h = kernels.backend("python")[1](*p.arrays(), X)
    z = np.tanh(X @ p.W1.T + p.b1) @ p.W2.T + p.b2
    ref = z - z.max(1, keepdims=True)
    ref -= np.log(np.exp(ref).sum(1, keepdims=True))
    np.testing.assert_allclose(lp, ref, atol=1e-12)
    np.testing.assert_allclose(h, -(np.exp(ref) * ref).sum(1), atol=1e-12)


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.backend("gpu")


def test_rollout_rescore_bitwise(catalog):
    p = init_params(64, 32, 0, obs_gain=1.0)
    tr = rollout(p, Environment(catalog), catalog["put_key_box"], None, RngStream(0, 1))
    assert np.array_equal(rescore(p, tr, "student"), tr.student_lp)
