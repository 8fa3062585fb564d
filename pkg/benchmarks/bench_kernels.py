"""Compare the compiled and numpy kernel backends.

Run with ``python benchmarks/bench_kernels.py``. Each row reports the best of
several repeats for both backends and checks that they agree bit for bit.
"""
import argparse
import timeit

import numpy as np

from pyramidhash import _pykernels

try:
    from pyramidhash import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def cases(rng):
    x = rng.normal(size=(32, 16, 32, 32))
    cols = _pykernels.im2col(x, 3, 1, 1)
    a = rng.integers(0, 2**63, (500, 1), dtype=np.uint64)
    b = rng.integers(0, 2**63, (2000, 1), dtype=np.uint64)
    wide_a = rng.integers(0, 2**63, (200, 4), dtype=np.uint64)
    wide_b = rng.integers(0, 2**63, (2000, 4), dtype=np.uint64)
    return [
        ("im2col 32x16x32x32 k3", "im2col", (x, 3, 1, 1)),
        ("im2col stride 2", "im2col", (x, 3, 2, 1)),
        ("col2im 32x16x32x32 k3", "col2im", (cols, x.shape, 3, 1, 1)),
        ("hamming 500x2000 q=64", "hamming_matrix", (a, b)),
        ("hamming 200x2000 q=256", "hamming_matrix", (wide_a, wide_b)),
    ]


def best_of(fn, args, repeat):
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled backend not available; build with `pip install -e . --no-build-isolation`")
        return
    print(f"{'kernel':<26}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}  identical")
    for name, fn, fargs in cases(np.random.default_rng(args.seed)):
        py, cy = getattr(_pykernels, fn), getattr(_ckernels, fn)
        same = np.array_equal(py(*fargs), cy(*fargs))
        t_py, t_cy = best_of(py, fargs, args.repeat), best_of(cy, fargs, args.repeat)
        print(f"{name:<26}{t_py * 1e3:>10.2f}{t_cy * 1e3:>11.2f}{t_py / t_cy:>8.1f}x  {same}")


if __name__ == "__main__":
    main()
