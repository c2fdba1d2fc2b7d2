"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat N]

Sizes mirror the default experiment: an aggregation over 8 clients of a
~330k-parameter vector, one AdamW step on it (plain and with the FedProx
term), and the loss on a batch of 8 five-channel 24x24 maps.
"""

import argparse
import time

import numpy as np

from fedkd import kernels
from fedkd._accel import NUMBA_AVAILABLE, backend_name


def _cases(rng):
    n = 330_000
    stack = rng.normal(size=(8, n)).astype(np.float32)
    weights = rng.integers(20, 60, size=8).astype(np.float64)
    p = rng.normal(size=n).astype(np.float32)
    g = rng.normal(size=n).astype(np.float32)
    coefs = kernels._adamw_coefs(np.float32, 0.01, 0.9, 0.999, 1e-8, 0.01, 3)
    prox_coefs = np.append(coefs, np.float32(0.01))
    anchor = p + rng.normal(scale=0.01, size=n).astype(np.float32)
    pred = rng.uniform(0.01, 0.99, size=(8, 5, 24 * 24))
    tgt = rng.uniform(size=(8, 5, 24 * 24))
    return {
        "kahan_weighted_sum": lambda f: f(stack, weights),
        "adamw_update": lambda f: f(p.copy(), g, np.zeros_like(p), np.zeros_like(p), coefs),
        "adamw_prox_update": lambda f: f(p.copy(), g, np.zeros_like(p), np.zeros_like(p), anchor, prox_coefs),
        "bce_dice": lambda f: f(pred, tgt, 1.0, 1.0, 1e-6, 1e-7),
    }


def _time(call, repeat):
    call()  # warm-up (and JIT compile)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        call()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    cases = _cases(np.random.default_rng(0))
    print(f"numba available: {NUMBA_AVAILABLE}; active backend: {backend_name()}")
    print(f"{'kernel':<22}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, (f_np, f_nb) in kernels.KERNELS.items():
        t_np = _time(lambda: cases[name](f_np), args.repeat)
        t_nb = _time(lambda: cases[name](f_nb), args.repeat)
        print(f"{name:<22}{1e3 * t_np:>10.3f}{1e3 * t_nb:>10.3f}{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
