"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--sizes 200,1000]

Prints one row per (kernel, size) with the best wall time of each backend and
the speedup. Outputs of the two backends are checked for agreement first.
"""
import argparse
import sys
import timeit

import numpy as np

from dmhash import kernels
from dmhash.evaluation import pack_codes
from dmhash.gbe import similarity_from_embedding


def cases(n, rng):
    d, k, c = 32, 3, 32
    Y0 = rng.standard_normal((n, d))
    base = rng.standard_normal((n, d))
    nbr = np.ascontiguousarray(rng.integers(0, n, (n, k)), dtype=np.int64)
    W = rng.dirichlet(np.ones(k), n)
    P = similarity_from_embedding(np.abs(rng.standard_normal((n, 8))))
    H = rng.standard_normal((n, c))
    A = pack_codes(rng.choice([-1.0, 1.0], (n, 64)))

    def sweep(mod):
        Y = Y0.copy()
        mod.gauss_seidel_sweep(Y, base, nbr, W, 0.2, 22.2)
        return Y

    return {
        "gauss_seidel_sweep": sweep,
        "gbe_loss_grad": lambda mod: mod.gbe_loss_grad(P, H, 0.01, True)[1],
        "hamming_packed": lambda mod: mod.hamming_packed(A, A),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--sizes", default="200,1000")
    args = ap.parse_args(argv)
    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled kernels are not built; only the numpy fallback is available", file=sys.stderr)
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20} {'n':>6} " + " ".join(f"{b + ' ms':>12}" for b in backends) + f" {'speedup':>8}")
    for n in (int(s) for s in args.sizes.split(",")):
        for name, fn in cases(n, rng).items():
            outs = {b: fn(m) for b, m in backends.items()}
            ref = outs["numpy"]
            for b, o in outs.items():
                if not np.allclose(o, ref, rtol=1e-9, atol=1e-12):
                    raise SystemExit(f"{name}: {b} disagrees with numpy at n={n}")
            times = {b: min(timeit.repeat(lambda m=m: fn(m), number=1, repeat=args.repeat)) for b, m in backends.items()}
            speed = times["numpy"] / times["cython"] if "cython" in times else float("nan")
            print(f"{name:<20} {n:>6} " + " ".join(f"{t * 1e3:>12.3f}" for t in times.values()) + f" {speed:>7.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
