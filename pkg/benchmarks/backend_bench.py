#!/usr/bin/env python3
"""Timing comparison of the compiled sequence kernels vs the numpy fallback.

Runs whole-sequence forward and backward passes for each cell kind over a
grid of (timesteps, batch, width) and prints per-call times plus the
speedup of the compiled backend. Usage: python benchmarks/backend_bench.py
[--repeats N].
"""

import argparse
import time

import numpy as np

from rnnwarmup import kernels

GRID = [
    (50, 32, 32),
    (100, 100, 64),
    (200, 200, 64),
    (100, 100, 128),
]


def time_case(backend, kind, T, B, H, repeats):
    rng = np.random.default_rng(0)
    gates = kernels.reference.GATE_COUNT[kind]
    n = 8
    W = rng.normal(0, 0.2, (H + n, gates * H))
    b = rng.normal(0, 0.1, gates * H)
    smul = 2 if kind == "lstm" else 1
    x0 = rng.normal(0, 1, (B, smul * H))
    inputs = rng.normal(0, 1, (T, B, n))
    grad = rng.normal(0, 1, (T + 1, B, smul * H))

    # warm the caches once
    states, cache = backend.sequence_forward(kind, W, b, x0, inputs, want_cache=True)
    backend.sequence_backward(kind, W, b, inputs, states, cache, grad)

    fwd = bwd = 0.0
    for _ in range(repeats):
        t0 = time.perf_counter()
        states, cache = backend.sequence_forward(kind, W, b, x0, inputs, want_cache=True)
        t1 = time.perf_counter()
        backend.sequence_backward(kind, W, b, inputs, states, cache, grad)
        t2 = time.perf_counter()
        fwd += t1 - t0
        bwd += t2 - t1
    return fwd / repeats, bwd / repeats


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    names = kernels.available_backends()
    if "cython" not in names:
        print("compiled backend unavailable; only timing the numpy fallback")
    header = f"{'kind':5s} {'T':>5s} {'B':>5s} {'H':>5s}"
    for name in names:
        header += f" | {name + ' fwd':>12s} {name + ' bwd':>12s}"
    if len(names) == 2:
        header += " | speedup fwd/bwd"
    print(header)
    for kind in ("gru", "lstm", "mgu"):
        for T, B, H in GRID:
            row = f"{kind:5s} {T:5d} {B:5d} {H:5d}"
            times = {}
            for name in names:
                fwd, bwd = time_case(kernels.get(name), kind, T, B, H, args.repeats)
                times[name] = (fwd, bwd)
                row += f" | {fwd * 1e3:10.2f}ms {bwd * 1e3:10.2f}ms"
            if len(names) == 2:
                s_fwd = times["numpy"][0] / times["cython"][0]
                s_bwd = times["numpy"][1] / times["cython"][1]
                row += f" | {s_fwd:6.2f}x / {s_bwd:5.2f}x"
            print(row, flush=True)


if __name__ == "__main__":
    main()
