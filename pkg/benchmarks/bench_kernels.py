"""Compare the compiled kernel core against the numpy fallback.

Times im2col / col2im on the shapes the training loop actually hits
(mini-batch of 33x33 tiles through a 9-5-5 layer stack) and checks that
both backends agree bitwise. Run from the repo root:

    python3 benchmarks/bench_kernels.py [--batch 64] [--repeat 5]
"""

import argparse
import time

import numpy as np

from panfuse.kernels import BACKEND, _fallback

try:
    from panfuse.kernels import _core
except ImportError:
    _core = None

# (label, channels, spatial, kernel) — the forward/backward hot shapes
SHAPES = [
    ("layer1 9x9", 7, 33, 9),
    ("layer2 5x5", 48, 25, 5),
    ("layer3 5x5", 32, 21, 5),
]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    print("active backend: %s" % BACKEND)
    if _core is None:
        print("compiled core unavailable; timing the fallback only")
    rng = np.random.default_rng(0)

    header = "%-12s %-8s %10s %10s %8s" % ("shape", "op", "numpy", "cython", "speedup")
    print(header)
    print("-" * len(header))
    for label, c, s, k in SHAPES:
        x = rng.standard_normal((args.batch, c, s, s)).astype(np.float32)
        cols_np = _fallback.im2col(x, k)
        t_np = best_of(lambda: _fallback.im2col(x, k), args.repeat)
        if _core is not None:
            cols_cy = _core.im2col(x, k)
            assert np.array_equal(cols_np, cols_cy), "im2col backends disagree"
            t_cy = best_of(lambda: _core.im2col(x, k), args.repeat)
            print("%-12s %-8s %9.1fms %9.1fms %7.2fx" % (label, "im2col", 1e3 * t_np, 1e3 * t_cy, t_np / t_cy))
        else:
            print("%-12s %-8s %9.1fms" % (label, "im2col", 1e3 * t_np))

        back_np = _fallback.col2im(cols_np, args.batch, c, s, s, k)
        t_np = best_of(lambda: _fallback.col2im(cols_np, args.batch, c, s, s, k), args.repeat)
        if _core is not None:
            back_cy = _core.col2im(cols_np, args.batch, c, s, s, k)
            assert np.array_equal(back_np, back_cy), "col2im backends disagree"
            t_cy = best_of(lambda: _core.col2im(cols_np, args.batch, c, s, s, k), args.repeat)
            print("%-12s %-8s %9.1fms %9.1fms %7.2fx" % (label, "col2im", 1e3 * t_np, 1e3 * t_cy, t_np / t_cy))
        else:
            print("%-12s %-8s %9.1fms" % (label, "col2im", 1e3 * t_np))


if __name__ == "__main__":
    main()
