#!/usr/bin/env python3
"""Benchmark the jitted kernel path against the pure-numpy fallback.

The hot loop is the per-subject EB Newton + Laplace contribution inside the
marginal likelihood.  Run:

    python3 benchmarks/bench_likelihood.py [--N 100] [--repeats 20]

The numpy path is what NLMEBIC_BACKEND=numpy selects (and what user-registered
structural models always use); both paths must agree to rounding.
"""

from __future__ import annotations

import argparse
import time

import nlmebic as nb
from nlmebic import kernels


def build_problem(N: int):
    spec = nb.parse_model_doc({
        "structural": "onecpt_oral",
        "transforms": {"ka": "log", "k": "log", "V": "log"},
        "random": ["ka", "k", "V"],
        "error": {"kind": "additive", "a": 0.3},
    })
    theta = nb.initial_theta_from_doc(spec, {
        "psi": {"ka": 1.0, "k": 0.1, "V": 20.0},
        "omega_sd": {"ka": 0.2, "k": 0.1, "V": 0.3},
        "error": {"a": 0.3},
    })
    design = nb.SimDesign(N=N, times=(1, 2, 4, 7, 10, 15, 20, 30, 40),
                          dose=100.0, seed=20240101)
    return nb.simulate_dataset(spec, theta, design), theta, spec


def time_backend(dataset, theta, spec, backend: str, repeats: int) -> tuple[float, float]:
    ev = nb.LikelihoodEvaluator(dataset, spec, backend=backend)
    value = ev.loglik(theta)  # warm up (JIT compile / cache load)
    t0 = time.perf_counter()
    for _ in range(repeats):
        value = ev.loglik(theta)
    return (time.perf_counter() - t0) / repeats, value


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--N", type=int, default=100, help="number of subjects")
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()

    dataset, theta, spec = build_problem(args.N)
    print(f"dataset: {dataset.n_subjects} subjects, {dataset.n_total} observations")
    print(f"numba enabled: {kernels.NUMBA_ENABLED}")

    t_np, v_np = time_backend(dataset, theta, spec, "numpy", max(3, args.repeats // 4))
    print(f"numpy  marginal loglik: {v_np:.9f}   {t_np * 1e3:8.2f} ms/eval")
    if kernels.NUMBA_ENABLED:
        t_nb, v_nb = time_backend(dataset, theta, spec, "numba", args.repeats)
        print(f"numba  marginal loglik: {v_nb:.9f}   {t_nb * 1e3:8.2f} ms/eval")
        print(f"agreement: |diff| = {abs(v_np - v_nb):.3e}")
        print(f"speedup:   {t_np / t_nb:.1f}x")
    else:
        print("numba unavailable or disabled (NLMEBIC_BACKEND=numpy); "
              "only the fallback path was timed")


if __name__ == "__main__":
    main()
