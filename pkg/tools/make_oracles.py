"""Regenerate tests/fixtures/oracles.json with 50-digit mpmath arithmetic.

Nothing here imports tokengate; each value is computed from its defining
formula so the fixtures stay independent of the implementation.
"""

import json
from pathlib import Path

import mpmath as mp

mp.mp.dps = 50


def sig(x):
    return 1 / (1 + mp.e ** (-mp.mpf(x)))


def kl(p, q):
    return mp.fsum(pi * mp.log(pi / qi) for pi, qi in zip(p, q) if pi > 0)


def oracles():
    o = {}
    o["sigmoid_1"] = sig(1)
    lse = mp.log(mp.e + 2)
    o["log_softmax_100"] = [1 - lse, -lse, -lse]
    p = [sig(1), 1 - sig(1)]
    o["entropy_10"] = -mp.fsum(x * mp.log(x) for x in p)
    o["k3_pos1"] = mp.e ** -1 - 1 + 1
    o["k3_neg1"] = mp.e - 1 - 1
    m = [mp.mpf("0.75"), mp.mpf("0.25")]
    o["jsd_point_uniform"] = (kl([1, 0], m) + kl([mp.mpf("0.5"), mp.mpf("0.5")], m)) / 2
    o["ucb_entry1"] = mp.mpf("0.8") + mp.sqrt(mp.log(12) / 10)
    o["ucb_entry2"] = mp.mpf("0.5") + mp.sqrt(mp.log(12) / 2)
    o["incremental_mean"] = mp.mpf("0.5") + (1 - mp.mpf("0.5")) / 3
    # RLSD reweighting, lam = 0.5, eps_w = 0.2, delta = 0.5
    w_pos = min(max(mp.e ** mp.mpf("0.5"), mp.mpf("0.8")), mp.mpf("1.2"))
    w_neg = min(max(mp.e ** mp.mpf("-0.5"), mp.mpf("0.8")), mp.mpf("1.2"))
    o["rlsd_pos"] = 1 * (mp.mpf("0.5") + mp.mpf("0.5") * w_pos)
    o["rlsd_neg"] = -1 * (mp.mpf("0.5") + mp.mpf("0.5") * w_neg)
    r = [1, 1, 1, 1, 0, 0, 0, 0]
    mu = mp.fsum(r) / 8
    sd = mp.sqrt(mp.fsum((x - mu) ** 2 for x in r) / 8)
    o["advantages_4_4"] = [(x - mu) / sd for x in r]
    o["gate_gap_0.2_beta5"] = sig(mp.mpf("0.2") * 5)
    g = sig(mp.mpf("2.5"))
    o["sdar_single_gate"] = g
    o["sdar_single_loss"] = g * mp.mpf("0.5")
    s5 = sig(5)
    o["coupling_beta5_delta1"] = 5 * 1 * s5 * (1 - s5)
    o["uniform_logprob_64"] = -mp.log(64)
    o["dominant_logit_10_v64"] = mp.log(mp.e ** 10 / (mp.e ** 10 + 63))
    o["grpo_clip_pos"] = max(-2, mp.mpf("-1.2"))
    o["grpo_dual_neg"] = min(3, max(2, mp.mpf("1.2")))
    return o


def as_float(v):
    return [float(x) for x in v] if isinstance(v, list) else float(v)


if __name__ == "__main__":
    out = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "oracles.json"
    doc = {k: as_float(v) for k, v in oracles().items()}
    out.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    for k, v in sorted(doc.items()):
        print(f"{k:28s} {v}")
