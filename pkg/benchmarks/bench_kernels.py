"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from fairdiff import _pykernels as py
from fairdiff import codec, kernels


def cases():
    rng = np.random.default_rng(0)
    xp = rng.standard_normal((8, 16, 34, 34))
    cols = py.im2col(xp, 3, 3, 1)
    mask = codec.random_ellipse_pair(rng, size=128, radius_range=(30, 50))
    disc = np.ascontiguousarray((mask > 0).astype(np.uint8))
    ang = np.linspace(0, 2 * np.pi, 256, endpoint=False)
    vx = np.ascontiguousarray(64 + 40 * np.cos(ang))
    vy = np.ascontiguousarray(64 + 40 * np.sin(ang))
    return {
        "im2col 8x16x32x32 k3": lambda m: m.im2col(xp, 3, 3, 1),
        "col2im 8x16x32x32 k3": lambda m: m.col2im(cols, 16, 34, 34, 3, 3, 1),
        "moore_trace 128x128": lambda m: m.moore_trace(disc),
        "fill_polygon 128x128 256 verts": lambda m: m.fill_polygon(vx, vy, 128, 128, 0.5),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if kernels.BACKEND != "cython":
        print("compiled extension not available; only the fallback can be timed")
    print(f"{'kernel':34s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in cases().items():
        t_py = min(timeit.repeat(lambda: fn(py), number=1, repeat=args.repeat)) * 1e3
        if kernels.BACKEND == "cython":
            t_c = min(timeit.repeat(lambda: fn(kernels), number=1, repeat=args.repeat)) * 1e3
            print(f"{name:34s} {t_py:10.2f} {t_c:10.2f} {t_py / t_c:7.1f}x")
        else:
            print(f"{name:34s} {t_py:10.2f} {'-':>10s}")


if __name__ == "__main__":
    main()
