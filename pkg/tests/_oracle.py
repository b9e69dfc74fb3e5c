"""Hand-built parameters that greedily spell a BFS-oracle action per turn."""

import numpy as np

from tokengate.env import VOCAB, bfs_oracle
from tokengate.policy import slices, zeros

SHARP, GAIN = 160.0, 10.0


def oracle_params(task, V=64, H=64):
    """One distinguishing token per oracle action, selected by the turn feature."""
    path = bfs_oracle(task)
    p = zeros(V, H)
    col = slices(V)["turn"].start
    for i, action in enumerate(path):
        token = _key_token(action, path)
        for j, off in ((2 * i, -0.5), (2 * i + 1, 0.5)):
            p.W1[j, col] = SHARP
            p.b1[j] = -SHARP * (i + off) / task.horizon
        p.W2[token, 2 * i] += GAIN
        p.W2[token, 2 * i + 1] -= GAIN
    return p


def _key_token(action, path):
    # the argument word resolves uniquely by overlap; prefer the last one ("box" over "key")
    return action[-2]


def oracle_words(task):
    return [VOCAB.words([a[-2]])[0] for a in bfs_oracle(task)]
