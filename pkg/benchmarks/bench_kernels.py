"""Compare the compiled and numpy im2col/col2im kernels and full conv passes.

Usage: python benchmarks/bench_kernels.py [--reps N]
"""
import argparse
import statistics
import time

import numpy as np

from softprune import _kernels_py
from softprune.ops import conv_output_size

try:
    from softprune import _kernels
except ImportError:  # extension not built
    _kernels = None

SHAPES = [  # (B, C, H, K, stride, pad)
    (32, 8, 29, 3, 1, 1),
    (32, 16, 29, 3, 2, 1),
    (64, 16, 16, 3, 1, 1),
    (8, 64, 33, 3, 2, 1),
    (16, 32, 16, 1, 1, 0),
]


def timeit(fn, reps):
    fn()
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def conv_pass(impl, x, w, stride, pad):
    b, c, h, _ = x.shape
    k = w.shape[2]
    ho = conv_output_size(h, k, stride, pad)
    cols = impl.im2col(x, k, stride, pad, ho, ho)
    out = np.matmul(w.reshape(w.shape[0], -1), cols)
    dcols = np.matmul(w.reshape(w.shape[0], -1).T, out)
    return impl.col2im(np.ascontiguousarray(dcols), c, h, h, k, stride, pad, ho, ho)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--reps", type=int, default=30)
    args = parser.parse_args(argv)
    backends = [("numpy", _kernels_py)] + ([("cython", _kernels)] if _kernels is not None else [])
    if _kernels is None:
        print("compiled extension not available; timing the numpy fallback only")
    rng = np.random.default_rng(0)
    print(f"{'shape (B,C,H,K,s,p)':<26}{'op':<10}" + "".join(f"{n + ' ms':>12}" for n, _ in backends)
          + ("   speedup" if len(backends) == 2 else ""))
    for b, c, h, k, s, p in SHAPES:
        x = rng.standard_normal((b, c, h, h)).astype(np.float32)
        w = rng.standard_normal((16, c, k, k)).astype(np.float32)
        ho = conv_output_size(h, k, s, p)
        cols = np.ascontiguousarray(_kernels_py.im2col(x, k, s, p, ho, ho))
        ops = {
            "im2col": lambda impl: impl.im2col(x, k, s, p, ho, ho),
            "col2im": lambda impl: impl.col2im(cols, c, h, h, k, s, p, ho, ho),
            "conv f+b": lambda impl: conv_pass(impl, x, w, s, p),
        }
        for name, op in ops.items():
            times = [timeit(lambda impl=impl: op(impl), args.reps) for _, impl in backends]
            row = f"{str((b, c, h, k, s, p)):<26}{name:<10}" + "".join(f"{1e3 * t:>12.3f}" for t in times)
            if len(times) == 2:
                row += f"{times[0] / times[1]:>9.2f}x"
            print(row)


if __name__ == "__main__":
    main()
