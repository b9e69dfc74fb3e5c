"""Scalar/vector primitives, seeded RNG streams and a finite-difference harness."""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

PROB_FLOOR = 1e-12
_ENTROPY_CUTOFF = 1e-300
_MASK64 = (1 << 64) - 1


class EmptyInput(ValueError):
    pass


class NonFinite(ArithmeticError):
    pass


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    z = np.exp(x[~pos])
    out[~pos] = z / (1.0 + z)
    return out


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.shape[-1] == 0:
        raise EmptyInput("log_softmax of an empty vector")
    m = z.max(axis=-1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def entropy_from_logits(logits) -> float | np.ndarray:
    """Shannon entropy (nats) of softmax(logits) along the last axis."""
    lp = log_softmax(logits)
    p = np.exp(lp)
    terms = np.where(p < _ENTROPY_CUTOFF, 0.0, -p * lp)
    h = terms.sum(axis=-1)
    h = np.maximum(h, 0.0)
    return float(h) if h.ndim == 0 else h


def safe_log(p) -> np.ndarray:
    """Log of externally supplied probabilities, floored at PROB_FLOOR."""
    return np.log(np.maximum(np.asarray(p, dtype=np.float64), PROB_FLOOR))


def central_diff_directional(
    f: Callable[[np.ndarray], float], x, d, h: float
) -> float:
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.asarray(x, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    fp = f(x + h * d)
    fm = f(x - h * d)
    if not (math.isfinite(fp) and math.isfinite(fm)):
        raise NonFinite(f"non-finite evaluation: f(x+hd)={fp}, f(x-hd)={fm}")
    return (fp - fm) / (2.0 * h)


def random_unit(rng: "RngStream", n: int) -> np.ndarray:
    v = rng.normal(n)
    return v / np.linalg.norm(v)


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_id(*parts: int) -> int:
    """Mix integers into one 64-bit stream id (order-sensitive)."""
    acc = 0x243F6A8885A308D3
    for p in parts:
        acc = splitmix64(acc ^ (int(p) & _MASK64))
    return acc


class RngStream:
    """Counter-based stream addressed by (seed, stream_id).

    Backed by Philox with the pair as its 128-bit key, so equal addresses give
    equal draws on every platform and distinct ids give independent sequences.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        bitgen = np.random.Philox(key=np.array([self.seed, self.stream_id], dtype=np.uint64))
        self._gen = np.random.Generator(bitgen)

    def derive(self, *parts: int) -> "RngStream":
        return RngStream(self.seed, derive_id(self.stream_id, *parts))

    def uniform(self, size=None):
        return self._gen.random(size)

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def integers(self, low: int, high: int | None = None, size=None):
        return self._gen.integers(low, high, size=size)

    def choice_index(self, n: int) -> int:
        return int(self._gen.integers(0, n))

    def uniform_range(self, low: float, high: float, size=None):
        return self._gen.uniform(low, high, size)

    def sample_categorical(self, logp: Sequence[float]) -> int:
        """Inverse-CDF draw from log-probabilities."""
        p = np.exp(np.asarray(logp, dtype=np.float64))
        cdf = np.cumsum(p)
        u = self._gen.random() * cdf[-1]
        idx = int(np.searchsorted(cdf, u, side="right"))
        return min(idx, len(p) - 1)
