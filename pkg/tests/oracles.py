"""Independent reference computations used by the test suite."""
from __future__ import annotations

import numpy as np


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at ``x`` (copied, not mutated)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(analytic, numeric) -> float:
    """Max abs deviation scaled by the largest reference magnitude."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n)) / max(np.max(np.abs(n)), 1e-12))


def brute_force_eer(scores, labels) -> float:
    """EER (%) by explicit enumeration of thresholds with O(n^2) counting."""
    scores = [float(s) for s in scores]
    labels = [int(l) for l in labels]
    n_t = sum(labels)
    n_n = len(labels) - n_t
    thresholds = [-float("inf")] + sorted(set(scores)) + [float("inf")]
    pts = []
    for t in thresholds:
        fa = sum(1 for s, l in zip(scores, labels) if l == 0 and s >= t) / n_n
        fr = sum(1 for s, l in zip(scores, labels) if l == 1 and s < t) / n_t
        pts.append((fa, fr))
    for (fa1, fr1), (fa2, fr2) in zip(pts, pts[1:]):
        if fa1 - fr1 == 0:
            return 100 * fa1
        if fa2 - fr2 <= 0:
            if fa2 - fr2 == 0:
                return 100 * fa2
            d1, d2 = fa1 - fr1, fa2 - fr2
            a = d1 / (d1 - d2)
            return 100 * (fa1 + a * (fa2 - fa1))
    raise AssertionError("no crossing")


def naive_dft(x) -> np.ndarray:
    """Complex DFT by the defining double sum."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.size
    k = np.arange(n)
    return np.array([np.sum(x * np.exp(-2j * np.pi * kk * k / n)) for kk in range(n)])
