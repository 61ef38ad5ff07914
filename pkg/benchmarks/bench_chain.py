#!/usr/bin/env python3
"""Time the valuation chain on the numba and numpy backends.

The chain is strictly sequential, so this is the kernel that decides total
experiment runtime. Run after an editable install:

    python3 benchmarks/bench_chain.py [--samples 400] [--k 500]
"""

import argparse
import time

from dpvalue import _kernels, data, dp, models
from dpvalue.valuation import RunConfig, SemivalueSpec, run_valuation


def build_cfg(n_samples, k, backend):
    ds = data.synth_classification(n_samples, 10, 2, seed=3, separation=5.0, n_test=200)
    mspec = models.ModelSpec("logistic_l2", 0.01, models.InitSpec("zeros"), l2=0.01)
    uspec = models.UtilitySpec("neg_test_loss", ds.test_features, ds.test_labels)
    sigma = dp.calibrate_sigma(1.0, 5e-5)
    ncfg = dp.NoiseConfig(1.0, sigma, budget=k, mode="corr_x")
    return RunConfig(ds, mspec, uspec, ncfg, SemivalueSpec("banzhaf", n_samples),
                     k=k, master_seed=1, backend=backend)


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--samples", type=int, default=400)
    parser.add_argument("--k", type=int, default=500)
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()

    steps = args.samples * args.k
    backends = (["numba"] if _kernels.HAS_NUMBA else []) + ["numpy"]
    if "numba" in backends:
        run_valuation(build_cfg(8, 4, "numba"))  # trigger jit before timing

    print(f"chain: {args.samples} parties x k={args.k} ({steps} gradient/utility steps)")
    timings = {}
    for backend in backends:
        best = float("inf")
        for _ in range(args.repeats):
            cfg = build_cfg(args.samples, args.k, backend)
            start = time.perf_counter()
            run_valuation(cfg)
            best = min(best, time.perf_counter() - start)
        timings[backend] = best
        print(f"  {backend:6s}: {best:8.3f}s  ({1e6 * best / steps:6.2f} us/step)")
    if len(timings) == 2:
        print(f"  speedup: {timings['numpy'] / timings['numba']:.1f}x")


if __name__ == "__main__":
    main()
