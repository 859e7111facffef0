#!/usr/bin/env python3
"""Benchmark the numba kernels against their pure-numpy twins.

Runs the three hot kernels on representative workloads, times both
backends, and verifies that the outputs are bit-identical (the twins
consume the same per-path noise blocks and evaluate the same expressions
in the same order).

    python3 benchmarks/bench_backends.py [--paths N]
"""

import argparse
import time

import numpy as np

from exitlab import fields, levinson
from exitlab._accel import HAS_NUMBA
from exitlab.geometry import DomainSpec
from exitlab.sde import (InitialLaw, SdeSystem, simulate_exit_batch,
                         simulate_exit_batch_table1d,
                         simulate_linear_saddle_exact_batch)


def _time(fn, repeats=3):
    best = np.inf
    out = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def bench_ou_saddle(paths):
    def run(backend):
        return simulate_linear_saddle_exact_batch(
            1.0, 1.0, 1e-3, 0.25, 0.5, 1e-3, seed=7, n_paths=paths,
            backend=backend)

    return run, ("tau", "exit_points")


def bench_euler_poly(paths):
    field = fields.two_node_field(1.0, 2.0, 1.0, 2.0)
    dom = DomainSpec.box([-0.25, -0.45], [0.25, 0.45])
    system = SdeSystem(field=field, sigma=np.eye(2),
                       initial=InitialLaw(x0=[0.0, 0.25]))

    def run(backend):
        return simulate_exit_batch(system, dom, 1e-2, 1e-3, seed=7,
                                   n_paths=paths, backend=backend)

    return run, ("tau", "exit_points", "face_ids")


def bench_euler_table(paths):
    b = lambda y: -np.ones_like(np.asarray(y, dtype=float))
    grid, vals = levinson.conditioned_drift_table(b, 1.0, 0.05, -0.9, 1.05,
                                                  a1=-1.0)
    dom = DomainSpec.interval(-0.96, 1.0)

    def run(backend):
        return simulate_exit_batch_table1d(grid, vals, 1.0, dom, 0.0, 0.05,
                                           2.5e-4, seed=7, n_paths=paths,
                                           backend=backend)

    return run, ("tau", "exit_points")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--paths", type=int, default=2000)
    args = ap.parse_args()

    if not HAS_NUMBA:
        print("numba not importable; nothing to compare")
        return

    benches = [("exact-ou-saddle", bench_ou_saddle(args.paths)),
               ("euler-poly-box", bench_euler_poly(args.paths)),
               ("euler-table-1d", bench_euler_table(args.paths))]

    print(f"{'kernel':<18} {'numba':>9} {'numpy':>9} {'speedup':>8}  identical")
    for name, (run, attrs) in benches:
        run("numba")  # jit warmup outside the timed region
        t_nb, out_nb = _time(lambda: run("numba"))
        t_np, out_np = _time(lambda: run("numpy"), repeats=1)
        same = all(np.array_equal(getattr(out_nb, a), getattr(out_np, a))
                   for a in attrs)
        print(f"{name:<18} {t_nb:>8.3f}s {t_np:>8.3f}s {t_np / t_nb:>7.1f}x"
              f"  {same}")
        if not same:
            raise SystemExit(f"backend mismatch in {name}")


if __name__ == "__main__":
    main()
