"""Learnable waveform-level input reprogramming.

Two placements are supported: two-sided concatenation (``n // 2`` learnable
samples before the utterance, the rest after) and masked addition onto a
zero-padded buffer.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .autodiff import Tensor, add, as_tensor, clip, concat, index, mul, parameter

CONCAT = "concat_two_sided"
MASKED_ADD = "masked_add"


class Mode(str, Enum):
    CONCAT = CONCAT
    MASKED_ADD = MASKED_ADD


@dataclass
class ReprogramParams:
    w: Tensor
    mode: Mode = Mode.CONCAT
    mask: np.ndarray | None = None
    clip: bool = False

    @property
    def n(self) -> int:
        return self.w.shape[0]

    @property
    def n_front(self) -> int:
        return self.n // 2

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if self.mode is Mode.MASKED_ADD:
            if self.mask is None:
                raise ValueError("masked_add needs a mask")
            self.mask = np.asarray(self.mask, dtype=np.float64)
            if self.mask.shape != self.w.shape:
                raise ValueError(f"mask shape {self.mask.shape} != w shape {self.w.shape}")
            if not np.all((self.mask == 0) | (self.mask == 1)):
                raise ValueError("mask entries must be 0 or 1")

    def clipped_w(self) -> Tensor:
        return clip(self.w, -1.0, 1.0) if self.clip else self.w


def init_params(n: int, mode: Mode | str = Mode.CONCAT, mask=None, clip: bool = False) -> ReprogramParams:
    """Zero-initialized learnable samples (silence)."""
    if n < 0:
        raise ValueError(f"n must be non-negative, got {n}")
    return ReprogramParams(parameter(np.zeros(n), name="reprog.w"), Mode(mode), mask, clip)


def seconds_to_samples(seconds: float, sample_rate: int) -> int:
    return int(round(seconds * sample_rate))


def apply_concat(x, p: ReprogramParams) -> Tensor:
    """``[w_1..w_{n//2}, x, w_{n//2+1}..w_n]`` along the last axis.

    ``x`` may be ``(T,)`` or ``(batch, T)``; ``w`` is shared across the batch.
    """
    if p.mode is not Mode.CONCAT:
        raise ValueError(f"apply_concat needs mode {CONCAT!r}, got {p.mode.value!r}")
    x = as_tensor(x)
    if p.n == 0:
        return x
    w = p.clipped_w()
    h = p.n_front
    front, back = index(w, slice(0, h)), index(w, slice(h, None))
    if x.ndim == 2:
        ones = np.ones((x.shape[0], 1))
        front = mul(ones, front)
        back = mul(ones, back)
    return concat([front, x, back], axis=-1)


def centered_offset(l: int, target_len: int) -> int:
    return (target_len - l) // 2


def concat_mask(l: int, n: int) -> np.ndarray:
    """Mask that is zero over ``x``'s region when ``x`` sits at offset ``n // 2``."""
    m = np.ones(l + n)
    m[n // 2 : n // 2 + l] = 0.0
    return m


def apply_masked_add(x, p: ReprogramParams, target_len: int, offset: int | None = None) -> Tensor:
    """``zero_pad(x) + w * mask`` on a buffer of ``target_len`` samples.

    ``x`` is centered unless ``offset`` is given.
    """
    if p.mode is not Mode.MASKED_ADD:
        raise ValueError(f"apply_masked_add needs mode {MASKED_ADD!r}, got {p.mode.value!r}")
    x = as_tensor(x)
    l = x.shape[-1]
    if target_len < l:
        raise ValueError(f"target_len {target_len} is shorter than the input ({l})")
    if p.n != target_len:
        raise ValueError(f"w has {p.n} samples but target_len is {target_len}")
    off = centered_offset(l, target_len) if offset is None else offset
    pad_lo = np.zeros(x.shape[:-1] + (off,))
    pad_hi = np.zeros(x.shape[:-1] + (target_len - l - off,))
    padded = concat([Tensor(pad_lo), x, Tensor(pad_hi)], axis=-1)
    return add(padded, mul(p.clipped_w(), p.mask))
