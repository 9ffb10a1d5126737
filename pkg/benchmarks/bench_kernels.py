"""Compiled vs pure-Python model kernels.

    python3 benchmarks/bench_kernels.py [--members 200] [--steps 500] [--repeat 3]
"""
import argparse
import time

import numpy as np

from loopda import kernels
from loopda.models import EhrhardMullerParams, Lorenz63Params


def best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--members", type=int, default=200)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    backends = kernels.available()
    if "cython" not in backends:
        print("compiled extension not built; run `python3 setup.py build_ext --inplace`")
    rng = np.random.default_rng(0)
    X = rng.normal(0, 5, (args.members, 3)) + [0, 0, 25]
    models = [("lorenz63", Lorenz63Params()), ("ehrhard_muller", EhrhardMullerParams(10.0, 28.0, 1.0))]

    print(f"{'kernel':<22}{'model':<16}" + "".join(f"{b:>12}" for b in backends) + "     speedup")
    for label, p in models:
        P = np.tile(p.as_array(), (args.members, 1))
        cases = {
            f"advance x{args.members}": lambda k: k.advance_batch(p.code, P, X, 0.01, args.steps, 1),
            "tlm x1": lambda k: k.tlm(p.code, p.as_array(), X[0], 0.01, args.steps, 1),
        }
        for name, call in cases.items():
            times = {b: best_of(lambda: call(kernels.get(b)), args.repeat) for b in backends}
            speed = times["python"] / times["cython"] if "cython" in times else float("nan")
            cols = "".join(f"{times[b] * 1e3:>10.2f}ms" for b in backends)
            print(f"{name:<22}{label:<16}{cols}{speed:>11.1f}x")


if __name__ == "__main__":
    main()
