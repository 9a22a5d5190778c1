"""Compiled vs numpy-fallback convolution lowering.

    python3 benchmarks/bench_kernels.py [--repeat N]

Times im2col, col2im and a full conv2d forward/backward on the shapes the
default backbone sees with a batch of 128, and checks both backends agree.
"""
import argparse
import time

import numpy as np

from fsrlab import tensor as T
from fsrlab.kernels import _fallback

try:
    from fsrlab.kernels import _im2col as _compiled
except ImportError:
    _compiled = None

# (batch, in channels, size) at the input of each block of the default backbone
SHAPES = [(128, 3, 32), (128, 16, 16), (128, 32, 8), (128, 64, 4)]
K, STRIDE, PAD = 3, 2, 1


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def conv_round_trip(x, w):
    xt = T.Tensor(x, requires_grad=True)
    wt = T.Tensor(w, requires_grad=True)
    T.conv2d(xt, wt, None, STRIDE, PAD).sum().backward()


def with_backend(mod, fn):
    import fsrlab.kernels as kern
    saved = kern.im2col, kern.col2im
    kern.im2col, kern.col2im = mod.im2col, mod.col2im
    try:
        return fn()
    finally:
        kern.im2col, kern.col2im = saved


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _compiled is None:
        print("compiled extension not built; only the fallback is available")
    rng = np.random.default_rng(0)
    print(f"{'shape':<18} {'op':<8} {'python ms':>10} {'compiled ms':>12} {'speedup':>8}")
    for n, c, s in SHAPES:
        x = rng.standard_normal((n, c, s, s))
        w = rng.standard_normal((2 * c if c > 3 else 16, c, K, K))
        cols = _fallback.im2col(x, K, STRIDE, PAD)
        ops = {
            "im2col": lambda m: m.im2col(x, K, STRIDE, PAD),
            "col2im": lambda m: m.col2im(cols, x.shape, K, STRIDE, PAD),
            "conv":   lambda m: with_backend(m, lambda: conv_round_trip(x, w)),
        }
        if _compiled is not None:
            assert np.array_equal(_fallback.im2col(x, K, STRIDE, PAD), _compiled.im2col(x, K, STRIDE, PAD))
            assert np.array_equal(_fallback.col2im(cols, x.shape, K, STRIDE, PAD),
                                  _compiled.col2im(cols, x.shape, K, STRIDE, PAD))
        for name, op in ops.items():
            tp = best_of(lambda: op(_fallback), args.repeat) * 1e3
            if _compiled is None:
                print(f"{str((n, c, s, s)):<18} {name:<8} {tp:>10.2f} {'-':>12} {'-':>8}")
                continue
            tc = best_of(lambda: op(_compiled), args.repeat) * 1e3
            print(f"{str((n, c, s, s)):<18} {name:<8} {tp:>10.2f} {tc:>12.2f} {tp / tc:>7.2f}x")


if __name__ == "__main__":
    main()
