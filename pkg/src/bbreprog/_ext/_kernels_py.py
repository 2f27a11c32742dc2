"""Numpy fallback for the compiled kernels in ``_kernels.pyx``."""
from __future__ import annotations

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=32)
def _plan(n: int) -> tuple[np.ndarray, np.ndarray]:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    twiddle = np.exp(-2j * np.pi * np.arange(max(n // 2, 1)) / n)
    return rev, twiddle


def fft_rows(a) -> np.ndarray:
    x = np.array(a, dtype=np.complex128, ndmin=2)
    rows, n = x.shape
    if n < 1 or n & (n - 1):
        raise ValueError(f"FFT length must be a power of two, got {n}")
    rev, twiddle = _plan(n)
    x = x[:, rev]
    m = 2
    while m <= n:
        half = m // 2
        blocks = x.reshape(rows, n // m, m)
        w = twiddle[:: n // m][:half]
        even = blocks[..., :half]
        odd = blocks[..., half:] * w
        x = np.concatenate([even + odd, even - odd], axis=-1).reshape(rows, n)
        m *= 2
    return x


def overlap_add(g, hop: int, length: int) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    b, nf, fl = g.shape
    out = np.zeros((b, length))
    for f in range(nf):
        out[:, f * hop : f * hop + fl] += g[:, f, :]
    return out
