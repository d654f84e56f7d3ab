"""Compare the compiled per-event kernel with the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--N 20000] [--K 14] [--repeat 20]

Times the kernel alone and one full objective-plus-gradient evaluation on
Synthetic A with each backend.
"""
import argparse
import timeit

import numpy as np

from banppa import kernels, model
from banppa.gtable import default_gtable
from banppa.synthgen import generate, preset


def bench_kernel(N, K, repeat):
    rng = np.random.default_rng(0)
    mean = rng.normal(0, 3, (N, K))
    var = rng.uniform(0.01, 5, (N, K))
    logw = np.log(rng.dirichlet(np.ones(K), N))
    tbl = default_gtable()
    out = {}
    for name, fn in (("numpy", kernels.python_event_terms), (kernels.BACKEND, kernels.event_terms)):
        fn(mean, var, logw, tbl)
        out[name] = min(timeit.repeat(lambda: fn(mean, var, logw, tbl), number=1, repeat=repeat))
    return out


def bench_objective(K, repeat):
    ds, _ = generate(preset("A", seed=0))
    st = model.initial_state(ds, "banppa", K, 18, np.random.default_rng(0))
    pb = model.Problem(ds)
    mult = model.AugLagMultipliers.initial(K, st.A)
    out = {}
    saved = model.event_terms
    try:
        for name, fn in (("numpy", kernels.python_event_terms), (kernels.BACKEND, saved)):
            model.event_terms = fn
            pb.evaluate(st, mult)
            out[name] = min(timeit.repeat(lambda: pb.evaluate(st, mult), number=1, repeat=repeat))
    finally:
        model.event_terms = saved
    return out, ds.N


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--N", type=int, default=20000)
    ap.add_argument("--K", type=int, default=14)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if kernels.BACKEND != "cython":
        print("compiled extension not available; only the numpy kernel is measured")
    k = bench_kernel(args.N, args.K, args.repeat)
    print(f"event kernel, N={args.N} K={args.K}")
    for name, t in k.items():
        print(f"  {name:8s} {1e3 * t:8.2f} ms")
    o, N = bench_objective(args.K, max(3, args.repeat // 4))
    print(f"objective + gradient, Synthetic A (N={N}) K={args.K} M=18")
    for name, t in o.items():
        print(f"  {name:8s} {1e3 * t:8.2f} ms")
    if "cython" in k:
        print(f"speed-up: kernel {k['numpy'] / k['cython']:.2f}x, objective {o['numpy'] / o['cython']:.2f}x")


if __name__ == "__main__":
    main()
