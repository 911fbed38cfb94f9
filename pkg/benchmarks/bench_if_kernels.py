"""Wall-clock comparison of the compiled and numpy IF kernels.

    python3 benchmarks/bench_if_kernels.py [--repeat 5]

Times ``integrate`` (a window of per-step currents) and ``encode`` (one
analog injection at t = 1) at layer sizes from the MNIST CNN, and checks
that both backends return identical arrays.
"""

import argparse
import timeit

import numpy as np

from ptlsnn.spiking import kernels

# (time steps, neurons): N_s = 16 on the CNN's feature maps, N_s = 32 on the autoencoder's widest layer
SHAPES = [(16, 16 * 28 * 28), (16, 32 * 14 * 14), (16, 64 * 7 * 7), (32, 128), (64, 32 * 14 * 14)]
BATCH = 32


def bench(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    args = p.parse_args(argv)
    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled backend not built; run `pip install -e . --no-build-isolation` first")
    rng = np.random.default_rng(0)
    print(f"{'kernel':9s} {'T':>3s} {'neurons':>8s} " + " ".join(f"{b + ' ms':>10s}" for b in backends) + f" {'speedup':>8s}")
    for T, n in SHAPES:
        z = (rng.standard_normal((T, BATCH * n)) * 0.3).astype(args.dtype)
        a = np.abs(rng.standard_normal(BATCH * n)).astype(args.dtype) * 2
        for name, call in (
            ("integrate", lambda b: kernels.integrate(z, 0.4, backend=b)),
            ("encode", lambda b: kernels.encode(a, 0.4, T, backend=b)),
        ):
            outs = {b: call(b) for b in backends}
            for b in backends:
                for x, y in zip(outs[b], outs["python"]):
                    assert np.array_equal(x, y), f"{name}: {b} differs from python"
            ms = {b: 1e3 * bench(lambda b=b: call(b), args.repeat) for b in backends}
            speed = ms["python"] / ms["cython"] if "cython" in ms else float("nan")
            print(f"{name:9s} {T:3d} {n:8d} " + " ".join(f"{ms[b]:10.2f}" for b in backends) + f" {speed:7.1f}x")


if __name__ == "__main__":
    main()
