"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat 20]

Each kernel is called once untimed (numba compiles on first use), then the
median of ``--repeat`` calls is reported along with the max abs difference
between the two backends on the same inputs.
"""

import argparse
import statistics
import time

import numpy as np

from microdet.kernels import _numpy

try:
    from microdet.kernels import _numba
except ImportError:  # numba missing: only the numpy column is meaningful
    _numba = None


def _cases(rng):
    x = rng.standard_normal((8, 32, 18, 18)).astype(np.float32)
    ho = wo = 16
    cols = rng.standard_normal((8, 32 * 9, ho * wo)).astype(np.float32)
    pool_in = rng.standard_normal((8, 64, 12, 12)).astype(np.float32)
    _, flat = _numpy.maxpool_forward(pool_in, 5, 1, 8, 8)
    g = rng.standard_normal((8, 64, 8, 8)).astype(np.float32)
    xy = rng.uniform(0, 60, (300, 2))
    wh = rng.uniform(1, 12, (300, 2))
    boxes = np.concatenate([xy, xy + wh], axis=1)
    order = np.argsort(-rng.random(300)).astype(np.int64)
    pts = np.array([[2.0, 3.0], [10.0, 9.5], [17.0, 4.0]])
    return {
        "im2col 8x32x18x18 k3": ("im2col", (x, 3, 3, 1, ho, wo)),
        "col2im 8x32x18x18 k3": ("col2im", (cols, x.shape, 3, 3, 1, ho, wo)),
        "maxpool_forward k5": ("maxpool_forward", (pool_in, 5, 1, 8, 8)),
        "maxpool_backward k5": ("maxpool_backward", (g, flat, pool_in.shape)),
        "nms 300 boxes": ("nms", (boxes, order, 0.45)),
        "polyline_coverage 20x20": ("polyline_coverage", (20, 20, pts, 1.1)),
        "ellipse_coverage 16x16": ("ellipse_coverage", (16, 16, 8.0, 8.0, 5.0, 3.0, 0.4, 4)),
    }


def _time(fn, args, repeat):
    fn(*args)
    ts = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        ts.append(time.perf_counter() - t)
    return statistics.median(ts)


def _diff(a, b):
    if isinstance(a, tuple):
        return max(_diff(p, q) for p, q in zip(a, b))
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        return float("inf")
    return float(np.max(np.abs(a.astype(np.float64) - b.astype(np.float64)), initial=0.0))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    cases = _cases(np.random.default_rng(args.seed))
    print(f"{'kernel':<26}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}{'max |diff|':>12}")
    for label, (name, a) in cases.items():
        t_np = _time(getattr(_numpy, name), a, args.repeat)
        if _numba is None:
            print(f"{label:<26}{t_np * 1e3:>10.3f}{'-':>10}{'-':>9}{'-':>12}")
            continue
        t_nb = _time(getattr(_numba, name), a, args.repeat)
        d = _diff(getattr(_numpy, name)(*a), getattr(_numba, name)(*a))
        print(f"{label:<26}{t_np * 1e3:>10.3f}{t_nb * 1e3:>10.3f}{t_np / t_nb:>8.1f}x{d:>12.2e}")


if __name__ == "__main__":
    main()
