"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]
"""
import argparse
import json
import math
import timeit

import numpy as np

from jmflow import kernels


def cases():
    rng = np.random.default_rng(0)
    m3 = np.array([1.0, 2.0, 3.0])
    q3 = rng.uniform(-1, 1, 6)
    y2 = np.array([-0.5, 0, 0.5, 0, 0, -1 / math.sqrt(2), 0, 1 / math.sqrt(2), 0.0])
    m2 = np.array([1.0, 1.0])
    M = 64
    Q = np.linspace(rng.uniform(-1, 1, 6), rng.uniform(-1, 1, 6) + 3, M + 1)
    dt = np.full(M, 1.0 / M)

    def pot(b):
        impl = kernels.get_backend(b)
        return lambda: impl.potential_acc(m3, 2, q3)

    def orbit(b):
        return lambda: kernels.dop853(m2, 2, y2, 0.0, 10 * math.pi * math.sqrt(2),
                                      rtol=1e-12, atol=1e-12, backend=b)

    def action(b):
        g = np.zeros((M + 1, 6))
        return lambda: kernels.discrete_action(m3, 2, Q, dt, 0.0, g, backend=b)

    return {"potential_acc (N=3)": pot, "dop853 (10 Kepler periods)": orbit,
            "discrete_action (N=3, M=64)": action}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json")
    args = ap.parse_args()
    backends = ["python"] + (["cython"] if kernels.BACKEND == "cython" else [])
    out = {}
    for name, make in cases().items():
        row = {}
        for b in backends:
            fn = make(b)
            n, _ = timeit.Timer(fn).autorange()
            row[b] = min(timeit.repeat(fn, number=n, repeat=args.repeat)) / n
        out[name] = row
        speed = row["python"] / row["cython"] if "cython" in row else float("nan")
        cells = "  ".join(f"{b}={row[b] * 1e6:10.1f} us" for b in backends)
        print(f"{name:32s} {cells}  speedup={speed:6.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(out, fh, indent=2)


if __name__ == "__main__":
    main()
