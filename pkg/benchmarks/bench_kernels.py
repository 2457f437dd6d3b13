"""Time each compiled kernel against its numpy twin on typical input sizes.

    python benchmarks/bench_kernels.py [--repeat N]

Results are checked for equality before timing, so a fast but wrong kernel
shows up as an error instead of a number.
"""
import argparse
import timeit

import numpy as np

from elite import kernels
from elite._jit import HAVE_NUMBA


def _cases(rng):
    n, h, w = 20_000, 96, 128
    src = rng.normal(size=(n, 64))
    index = rng.integers(0, 2_000, n)
    yield "scatter_add_rows 20k x 64", "scatter_add_rows", (src, index, 2_000)

    u, v = rng.integers(0, w, n), rng.integers(0, h, n)
    depth = rng.uniform(1, 50, n).round(1)
    yield "zbuffer 20k pts 96x128", "zbuffer", (u, v, depth, w, h)

    codes = rng.integers(0, 2, size=(h, w)).astype(np.int64)
    codes[20:70, 10:110] = 5
    yield "flood_fill 96x128", "flood_fill", (codes, 40, 50)

    m = 300
    x0, y0 = rng.integers(0, 100, m), rng.integers(0, 80, m)
    boxes = np.column_stack([x0, y0, x0 + rng.integers(0, 30, m), y0 + rng.integers(0, 20, m)]).astype(np.int64)
    order = np.argsort(-rng.random(m), kind="stable").astype(np.int64)
    yield "greedy_nms 300 boxes", "greedy_nms", (boxes, order, 0.7)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if not HAVE_NUMBA:
        print("numba is not installed; nothing to compare")
        return 0
    rng = np.random.default_rng(0)
    print(f"{'kernel':28s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for label, name, call_args in _cases(rng):
        nb, py = getattr(kernels, name + "_nb"), getattr(kernels, name + "_np")
        a, b = nb(*call_args), py(*call_args)  # also compiles the numba side
        if not np.array_equal(a, b):
            raise SystemExit(f"{name}: numba and numpy results differ")
        t_nb = min(timeit.repeat(lambda: nb(*call_args), number=1, repeat=args.repeat)) * 1e3
        t_py = min(timeit.repeat(lambda: py(*call_args), number=1, repeat=args.repeat)) * 1e3
        print(f"{label:28s} {t_nb:10.3f} {t_py:10.3f} {t_py / t_nb:7.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
