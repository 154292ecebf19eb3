"""Compare the compiled and NumPy batch OMP kernels.

Usage: python3 benchmarks/bench_omp.py [--signals 20000] [--dim 128] [--atoms 192]
"""

import argparse
import time

import numpy as np

from mmcdl import kernels


def make_problem(d, L, P, s, seed):
    rng = np.random.default_rng(seed)
    D = rng.standard_normal((d, L))
    D /= np.linalg.norm(D, axis=0)
    A = np.zeros((L, P))
    for i in range(P):
        A[rng.choice(L, s, replace=False), i] = rng.standard_normal(s)
    X = D @ A + 0.01 * rng.standard_normal((d, P))
    mask = rng.random((d, P)) > 0.3
    return D, X, mask


def timed(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--signals", type=int, default=20000)
    ap.add_argument("--dim", type=int, default=128)
    ap.add_argument("--atoms", type=int, default=192)
    ap.add_argument("--sparsity", type=int, default=6)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    D, X, mask = make_problem(args.dim, args.atoms, args.signals, args.sparsity, args.seed)
    backends = kernels.available_backends()
    print(f"signals={args.signals} d={args.dim} L={args.atoms} s={args.sparsity} "
          f"threads={args.threads} backends={backends}")
    for label, m in (("unmasked", None), ("masked", mask)):
        results = {}
        for b in backends:
            sec, out = timed(lambda: kernels.omp_batch(D, X, args.sparsity, 0.0, mask=m,
                                                       threads=args.threads, backend=b),
                             args.repeat)
            results[b] = out
            print(f"{label:9s} {b:9s} {sec:8.3f} s  {args.signals / sec:10.0f} signals/s")
        if len(results) == 2:
            a, c = results["python"], results["compiled"]
            same = np.array_equal(a[0], c[0])
            diff = np.abs(a[1] - c[1]).max()
            print(f"{label:9s} supports identical: {same}, max coefficient difference {diff:.2e}")


if __name__ == "__main__":
    main()
