"""Compare the compiled and pure-Python forward kernels.

    python3 benchmarks/bench_kernels.py [--rows 32] [--hidden 64] [--repeat 200]
"""

import argparse
import timeit

import numpy as np

from tokengate import kernels
from tokengate.numkit import RngStream
from tokengate.policy import init_params


def inputs(rows: int, hidden: int, seed: int = 0):
    p = init_params(64, hidden, seed, skill_gain=2.0, obs_gain=1.0)
    rng = RngStream(seed, 3)
    X = np.where(rng.uniform((rows, p.F)) < 0.1, rng.integers(0, 4, size=(rows, p.F)), 0).astype(float)
    X[:, -1] = 1.0
    return p.arrays(), X


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--rows", type=int, default=32)
    ap.add_argument("--hidden", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args(argv)

    arrays, X = inputs(args.rows, args.hidden)
    names = ["python"] + (["compiled"] if kernels.BACKEND == "compiled" else [])
    times = {}
    for name in names:
        rows_fn = kernels.backend(name)[1]
        best = min(timeit.repeat(lambda: rows_fn(*arrays, X), number=args.repeat, repeat=3))
        times[name] = best / args.repeat
        print(f"{name:<9} rows_logprobs {args.rows}x{X.shape[1]} H={args.hidden}: {times[name] * 1e6:9.1f} us/call")
    if len(times) == 2:
        print(f"speedup compiled/python: {times['python'] / times['compiled']:.1f}x")
    else:
        print("compiled extension not built; only the fallback was timed")


if __name__ == "__main__":
    main()
