"""Time the compiled conv kernels against the numpy fallback on desk-scale shapes.

    python benchmarks/bench_kernels.py [--repeat 20]
"""

import argparse
import time

import numpy as np

from sonoskill.nn import kernels

SHAPES = [
    # (batch, c_in, hw, c_out, kernel, stride)
    (32, 1, 64, 8, 3, 2),
    (32, 8, 31, 16, 3, 2),
    (1, 1, 64, 8, 3, 2),
]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    impls = {"numpy": kernels.fallback}
    if kernels.compiled is not None:
        impls["compiled"] = kernels.compiled
    else:
        print("compiled extension not built; timing the numpy fallback only")
    rng = np.random.default_rng(0)
    print(f"{'shape':28s} {'impl':9s} {'forward ms':>11s} {'backward ms':>12s}")
    for n, c, hw, f, k, s in SHAPES:
        x = rng.normal(size=(n, c, hw, hw))
        w = rng.normal(size=(f, c, k, k))
        b = rng.normal(size=f)
        oh = (hw - k) // s + 1
        dy = rng.normal(size=(n, f, oh, oh))
        ref = None
        for name, impl in impls.items():
            y = impl.conv2d_forward(x, w, b, s)
            if ref is None:
                ref = y
            assert np.allclose(y, ref, atol=1e-10)
            fw = best_of(lambda: impl.conv2d_forward(x, w, b, s), args.repeat)
            bw = best_of(lambda: impl.conv2d_backward(x, w, dy, s), args.repeat)
            print(f"{str((n, c, hw, f, k, s)):28s} {name:9s} {fw * 1e3:11.3f} {bw * 1e3:12.3f}")


if __name__ == "__main__":
    main()
