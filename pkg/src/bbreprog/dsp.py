"""Differentiable log mel-filterbank frontend.

Waveform -> frames -> windowed radix-2 FFT power spectrum -> mel projection
-> floored log. Every stage is a tape op so gradients reach the raw samples
(and therefore the learnable reprogramming samples concatenated to them).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from . import _ext
from .autodiff import DEFAULT_LOG_FLOOR, Tensor, _node, as_tensor, log_floored, matmul, mul


@dataclass(frozen=True)
class FbankConfig:
    sample_rate: int = 4000
    frame_length: int = 128
    hop: int = 64
    fft_size: int = 128
    n_mels: int = 24
    f_min: float = 0.0
    f_max: float = 2000.0
    log_floor: float = DEFAULT_LOG_FLOOR

    def __post_init__(self):
        n = self.fft_size
        if n < 1 or n & (n - 1):
            raise ValueError(f"fft_size must be a power of two, got {n}")
        if n < self.frame_length:
            raise ValueError(f"fft_size {n} is shorter than frame_length {self.frame_length}")
        if self.frame_length < 1 or self.hop < 1:
            raise ValueError("frame_length and hop must be positive")
        if not 0 <= self.f_min < self.f_max <= self.sample_rate / 2:
            raise ValueError(
                f"need 0 <= f_min < f_max <= sample_rate/2, got f_min={self.f_min}, "
                f"f_max={self.f_max}, sample_rate={self.sample_rate}"
            )
        if self.n_mels < 2:
            raise ValueError("n_mels must be at least 2")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    def n_frames(self, n_samples: int) -> int:
        return 1 + (n_samples - self.frame_length) // self.hop

    def to_dict(self) -> dict:
        return asdict(self)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def frame_signal(x, cfg: FbankConfig) -> Tensor:
    """Slice ``(T,)`` or ``(batch, T)`` signals into ``(..., n_frames, frame_length)``."""
    x = as_tensor(x)
    T = x.shape[-1]
    L, hop = cfg.frame_length, cfg.hop
    if T < L:
        raise ValueError(f"signal of {T} samples is shorter than one frame ({L})")
    nf = cfg.n_frames(T)
    idx = np.arange(nf)[:, None] * hop + np.arange(L)[None, :]
    squeeze = x.ndim == 1
    data = x.data[None] if squeeze else x.data

    def bw(g):
        g3 = g[None] if squeeze else g
        out = _ext.overlap_add(g3, hop, T)
        return (out[0] if squeeze else out,)

    return _node(data[:, idx][0] if squeeze else data[:, idx], (x,), bw, "frame_signal")


def rfft_magsq(frames, fft_size: int | None = None) -> Tensor:
    """Power spectrum ``|FFT(row)|^2`` for bins ``0..fft_size/2``.

    Rows shorter than ``fft_size`` are zero-padded. The backward pass runs the
    same FFT on the conjugated, gradient-weighted spectrum.
    """
    frames = as_tensor(frames)
    L = frames.shape[-1]
    n = fft_size or L
    if n < 1 or n & (n - 1):
        raise ValueError(f"fft_size must be a power of two, got {n}")
    if L > n:
        raise ValueError(f"frame length {L} exceeds fft_size {n}")
    lead = frames.shape[:-1]
    rows = frames.data.reshape(-1, L)
    if L < n:
        rows = np.concatenate([rows, np.zeros((rows.shape[0], n - L))], axis=1)
    nb = n // 2 + 1
    spec = _ext.fft_rows(rows)[:, :nb]
    out = (spec.real**2 + spec.imag**2).reshape(*lead, nb)

    def bw(g):
        c = np.zeros((spec.shape[0], n), dtype=np.complex128)
        c[:, :nb] = np.conj(2.0 * g.reshape(-1, nb) * spec)
        dx = _ext.fft_rows(c).real[:, :L]
        return (dx.reshape(*lead, L),)

    return _node(out, (frames,), bw, "rfft_magsq")


def naive_dft_magsq(rows: np.ndarray) -> np.ndarray:
    """O(N^2) reference power spectrum, used as a test oracle."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    n = rows.shape[-1]
    k = np.arange(n // 2 + 1)[:, None]
    t = np.arange(n)[None, :]
    ang = -2.0 * np.pi * k * t / n
    re = rows @ np.cos(ang).T
    im = rows @ np.sin(ang).T
    return re**2 + im**2


def mel_points(cfg: FbankConfig) -> np.ndarray:
    """``n_mels + 2`` band edges in Hz, uniformly spaced on the HTK mel scale."""
    mels = np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2)
    return mel_to_hz(mels)


@lru_cache(maxsize=16)
def _mel_matrix(cfg: FbankConfig) -> np.ndarray:
    n = cfg.fft_size
    edges = mel_points(cfg)
    bins = np.floor(edges * n / cfg.sample_rate).astype(int)
    if np.any(np.diff(bins) == 0):
        raise ValueError(
            f"mel band edges collapse onto the same FFT bin for n_mels={cfg.n_mels}, "
            f"fft_size={n}; use a larger fft_size or fewer mel bands"
        )
    freqs = np.arange(n // 2 + 1) * cfg.sample_rate / n
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    if np.any(fb.sum(axis=1) <= 0):
        raise ValueError("a mel filter covers no FFT bin; use a larger fft_size")
    fb.setflags(write=False)
    return fb


def mel_matrix(cfg: FbankConfig) -> Tensor:
    """Triangular filters, shape ``(n_mels, fft_size/2 + 1)``."""
    return Tensor(_mel_matrix(cfg))


@lru_cache(maxsize=16)
def hann_window(length: int) -> np.ndarray:
    # Half-sample offset keeps every in-frame sample at a nonzero weight.
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * (np.arange(length) + 0.5) / length)
    w.setflags(write=False)
    return w


def log_fbank(x, cfg: FbankConfig) -> Tensor:
    """Log mel energies, ``(..., n_frames, n_mels)`` for ``(..., T)`` input."""
    frames = frame_signal(x, cfg)
    windowed = mul(frames, hann_window(cfg.frame_length))
    power = rfft_magsq(windowed, cfg.fft_size)
    mel = matmul(power, Tensor(_mel_matrix(cfg).T))
    return log_floored(mel, cfg.log_floor)
