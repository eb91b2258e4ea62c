"""Compare the compiled and pure-Python convolution kernels.

    python benchmarks/bench_kernels.py [--repeat 20]

Times im2col + col2im on the layer shapes the 32x32 and 64x64 networks use,
checks both backends agree bit-for-bit, and prints one line per shape.
"""
import argparse
import sys
import timeit

import numpy as np

from trigan.autodiff import kernels

# (batch, channels, height, width, kernel, stride, pad)
SHAPES = [
    (10, 1, 32, 32, 4, 2, 1),
    (10, 16, 16, 16, 4, 2, 1),
    (10, 32, 8, 8, 4, 2, 1),
    (10, 1, 64, 64, 4, 2, 1),
    (10, 64, 32, 32, 4, 2, 1),
]


def bench(mod, x, k, s, p, repeat):
    n, c, h, w = x.shape
    cols = mod.im2col(x, k, k, s, p)

    def run():
        mod.col2im(mod.im2col(x, k, k, s, p), c, h, w, k, k, s, p)

    best = min(timeit.repeat(run, number=1, repeat=repeat))
    return best, cols


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    try:
        compiled = kernels.get_backend("cython")
    except ImportError:
        print("compiled kernels are not built; run `pip install -e .` first", file=sys.stderr)
        return 1
    python = kernels.get_backend("python")
    rng = np.random.default_rng(0)
    print(f"{'shape (N,C,H,W) k/s/p':<32}{'python ms':>12}{'cython ms':>12}{'speedup':>10}  identical")
    for n, c, h, w, k, s, p in SHAPES:
        x = rng.normal(size=(n, c, h, w))
        t_py, cols_py = bench(python, x, k, s, p, args.repeat)
        t_cy, cols_cy = bench(compiled, x, k, s, p, args.repeat)
        same = cols_py.tobytes() == cols_cy.tobytes()
        label = f"({n},{c},{h},{w}) {k}/{s}/{p}"
        print(f"{label:<32}{t_py * 1e3:>12.3f}{t_cy * 1e3:>12.3f}{t_py / t_cy:>9.1f}x  {same}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
