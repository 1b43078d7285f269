"""Compare the compiled and numpy im2col/col2im backends.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints the median time per call for each shape, the speedup of the
compiled core and one conv2d forward+backward through each backend.
"""

import argparse
import statistics
import time

import numpy as np

from auxnet import _backend
from auxnet import layers as L

SHAPES = [  # (B, C, H, W, k, stride, pad)
    (128, 16, 1, 1, 1, 1, 0),
    (32, 16, 32, 32, 3, 1, 1),
    (32, 32, 16, 16, 3, 2, 1),
    (8, 64, 8, 8, 3, 1, 1),
]


def median_time(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def bench(repeat):
    backends = _backend.available()
    rng = np.random.default_rng(0)
    print(f"backends: {', '.join(backends)}  (active at import: {_backend.name})")
    print(f"{'shape':>28} {'op':>8} " + " ".join(f"{b + ' ms':>11}" for b in backends)
          + ("  speedup" if len(backends) > 1 else ""))
    for B, C, H, W, k, s, p in SHAPES:
        x = rng.standard_normal((B, C, H, W)).astype(np.float32)
        cols = _backend.im2col(x, k, s, p)
        w = L.LayerParams("conv2d", rng.standard_normal((C, C, k, k)).astype(np.float32), stride=s, padding=p)

        def conv():
            y, cache = L.conv2d_forward(x, w)
            L.conv2d_backward(cache, np.ones_like(y))

        ops = {
            "im2col": lambda: _backend.im2col(x, k, s, p),
            "col2im": lambda: _backend.col2im(cols, x.shape, k, s, p),
            "conv": conv,
        }
        for op, fn in ops.items():
            res = []
            for b in backends:
                _backend.set_backend(b)
                res.append(median_time(fn, repeat))
            line = f"{str((B, C, H, W, k, s, p)):>28} {op:>8} " + " ".join(f"{1e3 * t:>11.3f}" for t in res)
            if len(res) > 1:
                line += f"  {res[0] / res[1]:7.2f}x"
            print(line)
    _backend.set_backend(backends[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=7)
    bench(ap.parse_args().repeat)


if __name__ == "__main__":
    main()
