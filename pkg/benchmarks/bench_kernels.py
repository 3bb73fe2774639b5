"""Compare the compiled and numpy MPM kernels.

    python3 benchmarks/bench_kernels.py [--particles 256 1024 4096] [--repeat 20]
"""
import argparse
import time

import numpy as np

from morphodiff.mpm import BACKENDS


def make_state(n, seed=0):
    rng = np.random.default_rng(seed)
    side = 0.1 * np.sqrt(n / 1024)
    x = 0.5 + rng.uniform(-side, side, (n, 2))
    v = rng.normal(0, 0.1, (n, 2))
    C = rng.normal(0, 1.0, (n, 2, 2))
    F = np.eye(2) + rng.normal(0, 0.02, (n, 2, 2))
    mass = np.full(n, 1e-3)
    vol = mass / 1e3
    mu = np.full(n, 4.2e4)
    lam = np.full(n, 2.8e4)
    act = rng.uniform(-1, 1, n) * 3e4
    fib = np.tile([0.0, 1.0], (n, 1))
    boxes = np.array([[-10, -10, 10, 0.45, 0], [-10, -10, 0.02, 10, 0]], dtype=float)
    return (x, v, C, F, mass, vol, mu, lam, act, fib, 128.0, 1e-4, (0.0, -9.8), boxes, 0.4)


def bench(kern, args, repeat):
    x, v, C, F = args[:4]
    out = [np.empty_like(a) for a in (x, v, C, F)]
    kern.substep(*args, *out)
    t0 = time.perf_counter()
    for _ in range(repeat):
        kern.substep(*args, *out)
    fwd = (time.perf_counter() - t0) / repeat
    n = x.shape[0]
    g = [np.ones_like(a) for a in (x, v, C, F)]
    extra = [np.zeros(n) for _ in range(3)]
    t0 = time.perf_counter()
    for _ in range(repeat):
        kern.substep_backward(*args, *g, *extra)
    bwd = (time.perf_counter() - t0) / repeat
    return fwd, bwd


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--particles", type=int, nargs="+", default=[256, 1024, 4096])
    ap.add_argument("--repeat", type=int, default=20)
    a = ap.parse_args()
    print(f"{'backend':8s} {'particles':>9s} {'fwd ms':>9s} {'bwd ms':>9s} {'rollout s':>10s}")
    for n in a.particles:
        args = make_state(n)
        for name, kern in sorted(BACKENDS.items()):
            fwd, bwd = bench(kern, args, a.repeat)
            # a full horizon is 1700 substeps
            print(f"{name:8s} {n:9d} {fwd * 1e3:9.3f} {bwd * 1e3:9.3f} {1700 * fwd:10.2f}")


if __name__ == "__main__":
    main()
