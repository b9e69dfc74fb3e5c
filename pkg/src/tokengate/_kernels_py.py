"""Pure-Python fallback for the compiled policy kernels.

Both entry points go through ``token_logprobs`` row by row, so a rollout's
recorded log-probs and a later rescore agree bit for bit.
"""

import math

import numpy as np


def token_logprobs(W1, b1, W2, b2, x):
    nz = np.flatnonzero(x)
    pre = b1 + W1[:, nz] @ x[nz]
    hid = np.tanh(pre)
    z = b2 + W2 @ hid
    z = z - z.max()
    lp = z - math.log(np.exp(z).sum())
    p = np.exp(lp)
    h = float(-(p[p >= 1e-300] * lp[p >= 1e-300]).sum())
    return lp, max(h, 0.0)


def rows_logprobs(W1, b1, W2, b2, X):
    T = X.shape[0]
    out = np.empty((T, W2.shape[0]))
    ent = np.empty(T)
    for t in range(T):
        out[t], ent[t] = token_logprobs(W1, b1, W2, b2, X[t])
    return out, ent
