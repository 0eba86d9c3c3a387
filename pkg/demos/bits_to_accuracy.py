"""Compare communication cost of shift strategies on the synthetic ridge instance.

Runs plain compressed gradient descent (fixed zero shift), the incremental
learned shift, its randomized-refresh variant, and the variance-reduced
iterate-compression method, all with Rand-K keeping 10% of coordinates,
and reports bits and iterations needed to reach a 1e-8 relative error.

Usage: python3 demos/bits_to_accuracy.py [--q 0.1] [--eps 1e-8] [--seed 3]
"""

import argparse

import numpy as np

from shiftcomp import (
    RunConfig,
    ShiftStrategy,
    make_ridge_instance,
    run,
)
from shiftcomp.compressors import rand_k_spec


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--q", type=float, default=0.1, help="fraction of coordinates kept")
    ap.add_argument("--eps", type=float, default=1e-8, help="target relative error")
    ap.add_argument("--seed", type=int, default=3)
    args = ap.parse_args()

    problem = make_ridge_instance()
    reference = problem.solve_reference()
    K = max(1, round(args.q * problem.d))
    specs = [rand_k_spec(problem.d, K) for _ in range(problem.n)]

    entries = [
        ("dcgd (fixed shift)", "dcgd", ShiftStrategy("fixed"), "dcgd"),
        ("dcgd + diana", "dcgd", ShiftStrategy("diana"), "diana"),
        ("dcgd + rand_diana", "dcgd", ShiftStrategy("rand_diana"), "rand_diana"),
        ("vr_gdci", "vr_gdci", None, "vr_gdci"),
    ]

    print(f"ridge m=100 d=80 n=10, Rand-K K={K} (q={args.q}), eps={args.eps}")
    print(f"{'method':24s} {'status':10s} {'iters':>10s} {'bits':>14s} {'final error':>12s}")
    for label, method, strategy, rule in entries:
        cfg = RunConfig(method, specs, strategy=strategy, stepsize_rule=rule,
                        iters=500_000, eps=args.eps, record_every=1000,
                        seed=args.seed)
        rec = run(problem, cfg, reference)
        iters = rec.iters_to_eps if rec.iters_to_eps is not None else "-"
        bits = rec.bits_to_eps if rec.bits_to_eps is not None else "-"
        print(f"{label:24s} {rec.status:10s} {iters!s:>10s} {bits!s:>14s} "
              f"{rec.rel_error[-1]:>12.3e}")
    print("\nfixed shifts stall at a variance floor (tighten --eps to see "
          "it); learned shifts reach any target accuracy, paying for shift "
          "refreshes in bits.")


if __name__ == "__main__":
    main()
