"""Time the compiled and numpy im2col/col2im kernels on detector-sized inputs.

    python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from sfdet import _pykernels

try:
    from sfdet import _ckernels
except ImportError:
    _ckernels = None

# (batch, height, width, channels, kernel, stride, pad) as used by the detector and TAM
SHAPES = [
    (16, 64, 64, 3, 3, 2, 1),
    (16, 32, 32, 16, 3, 2, 1),
    (16, 16, 16, 32, 3, 2, 1),
    (16, 8, 8, 48, 3, 1, 1),
    (8, 66, 66, 3, 3, 1, 0),
]


def _time(fn, repeat: int) -> float:
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    if _ckernels is None:
        print("compiled kernels not built; run `pip install -e . --no-build-isolation` first")
        return
    rng = np.random.default_rng(0)
    print(f"{'shape (n,h,w,c,k,s,p)':<28}{'op':<8}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}")
    for n, h, w, c, k, s, p in SHAPES:
        x = rng.random((n, h, w, c), dtype=np.float32)
        cols = _pykernels.im2col(x, k, s, p)
        assert np.array_equal(cols, _ckernels.im2col(x, k, s, p))
        ops = {
            "im2col": (lambda m: lambda: m.im2col(x, k, s, p)),
            "col2im": (lambda m: lambda: m.col2im(cols, n, h, w, c, k, s, p)),
        }
        for op, make in ops.items():
            t_py = _time(make(_pykernels), args.repeat)
            t_c = _time(make(_ckernels), args.repeat)
            print(f"{str((n, h, w, c, k, s, p)):<28}{op:<8}{t_py:>10.3f}{t_c:>11.3f}{t_py / t_c:>8.2f}x")


if __name__ == "__main__":
    main()
