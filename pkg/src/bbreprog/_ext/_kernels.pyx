# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: batched radix-2 FFT and frame overlap-add."""
import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, M_PI

cnp.import_array()


def fft_rows(a):
    """Forward DFT of every row of a 2-D complex array (row length a power of two)."""
    cdef cnp.ndarray[cnp.complex128_t, ndim=2, mode="c"] buf = np.array(a, dtype=np.complex128, order="C", ndmin=2)
    cdef Py_ssize_t rows = buf.shape[0]
    cdef Py_ssize_t n = buf.shape[1]
    if n < 1 or (n & (n - 1)) != 0:
        raise ValueError(f"FFT length must be a power of two, got {n}")
    cdef double complex[:, ::1] x = buf
    cdef double[::1] wr = np.empty(n // 2 if n > 1 else 1)
    cdef double[::1] wi = np.empty(n // 2 if n > 1 else 1)
    cdef Py_ssize_t[::1] rev = np.empty(n, dtype=np.intp)
    cdef Py_ssize_t i, j, k, r, m, half, step, bits = 0
    cdef double complex t, u, w
    while (1 << bits) < n:
        bits += 1
    for i in range(n):
        j = 0
        k = i
        for r in range(bits):
            j = (j << 1) | (k & 1)
            k >>= 1
        rev[i] = j
    for k in range(n // 2):
        wr[k] = cos(-2.0 * M_PI * k / n)
        wi[k] = sin(-2.0 * M_PI * k / n)
    with nogil:
        for r in range(rows):
            for i in range(n):
                j = rev[i]
                if j > i:
                    t = x[r, i]
                    x[r, i] = x[r, j]
                    x[r, j] = t
            m = 2
            while m <= n:
                half = m // 2
                step = n // m
                i = 0
                while i < n:
                    for k in range(half):
                        w.real = wr[k * step]
                        w.imag = wi[k * step]
                        t = w * x[r, i + k + half]
                        u = x[r, i + k]
                        x[r, i + k] = u + t
                        x[r, i + k + half] = u - t
                    i += m
                m *= 2
    return buf


def overlap_add(g, Py_ssize_t hop, Py_ssize_t length):
    """Sum frame-shaped values (batch, n_frames, frame_len) back onto signals (batch, length)."""
    cdef cnp.ndarray[cnp.float64_t, ndim=3, mode="c"] src = np.ascontiguousarray(g, dtype=np.float64)
    cdef Py_ssize_t b = src.shape[0], nf = src.shape[1], fl = src.shape[2]
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] out = np.zeros((b, length))
    cdef double[:, :, ::1] s = src
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, f, k, start
    with nogil:
        for i in range(b):
            for f in range(nf):
                start = f * hop
                for k in range(fl):
                    o[i, start + k] += s[i, f, k]
    return out
