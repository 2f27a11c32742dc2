"""Compiled kernels against the numpy fallback.

Run with ``python3 benchmarks/bench_kernels.py``. Prints the median time per
call for each backend and the speedup.
"""
import argparse
import timeit

import numpy as np

from bbreprog import _ext


def _median_time(fn, repeat: int) -> float:
    number = 5
    return float(np.median(timeit.repeat(fn, number=number, repeat=repeat))) / number


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=7)
    args = ap.parse_args(argv)
    if _ext.compiled is None:
        print("compiled kernels not built; reinstall with Cython available")
        return
    rng = np.random.default_rng(0)
    cases = []
    for n, rows in ((128, 2048), (512, 512)):
        a = rng.normal(size=(rows, n))
        cases.append((f"fft_rows {rows}x{n}", lambda m, a=a: m.fft_rows(a)))
    g = rng.normal(size=(32, 60, 128))
    cases.append(("overlap_add 32x60x128 hop 64", lambda m: m.overlap_add(g, 64, 64 * 59 + 128)))

    print(f"{'kernel':<32}{'python (ms)':>14}{'cython (ms)':>14}{'speedup':>10}")
    for name, call in cases:
        t_py = _median_time(lambda: call(_ext.fallback), args.repeat)
        t_cy = _median_time(lambda: call(_ext.compiled), args.repeat)
        print(f"{name:<32}{1e3 * t_py:>14.3f}{1e3 * t_cy:>14.3f}{t_py / t_cy:>9.2f}x")


if __name__ == "__main__":
    main()
