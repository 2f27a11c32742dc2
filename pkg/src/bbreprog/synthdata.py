"""Deterministic synthetic speakers, domains, datasets and trial lists.

A speaker is a harmonic source (f0, harmonic amplitude envelope, spectral
tilt). A domain is a recording condition: band-pass channel, additive noise,
amplitude-modulation rate and a random per-utterance spectral tilt. The
target domain is noisier, modulates faster and tilts each utterance by up to
4 dB/octave, which is what the pretrained model has to be adapted across.
"""
from __future__ import annotations

import csv
import wave
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import signal

N_HARMONICS = 16
F0_RANGE = (110.0, 150.0)  # narrow band so identity lives in the harmonic envelope
MIN_DURATION = 0.5


@dataclass(frozen=True)
class SpeakerProfile:
    id: int
    f0: float
    harmonic_amps: tuple[float, ...]
    formant_tilt: float


@dataclass(frozen=True)
class DomainSpec:
    id: str
    channel_filter: tuple[float, float]
    noise_level: float
    modulation_rate: float
    pitch_excursion: float = 0.02
    tilt_jitter_db: float = 0.0
    tilt_db: float = 0.0
    content_variability: float = 0.0
    f0_jitter: float = 0.03  # per-utterance relative f0 offset (std)

    def check(self, sample_rate: int) -> None:
        lo, hi = self.channel_filter
        if not 0 <= lo < hi < sample_rate / 2:
            raise ValueError(f"domain {self.id}: cutoffs {self.channel_filter} must lie below Nyquist")
        if self.noise_level < 0:
            raise ValueError(f"domain {self.id}: noise_level must be >= 0")


SOURCE = DomainSpec("source", (60.0, 1900.0), 0.05, 3.0)
TARGET = DomainSpec("target", (100.0, 1900.0), 0.3, 7.0, tilt_jitter_db=4.0)
DOMAINS = {"source": SOURCE, "target": TARGET}


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng([int(k) & 0xFFFFFFFF for k in keys])


def gen_speaker(seed: int, id: int, sample_rate: int = 4000) -> SpeakerProfile:
    rng = _rng(seed, id, 0x5EED)
    scale = min(1.0, sample_rate / 2 / 2000.0)
    f0 = float(rng.uniform(*F0_RANGE) * scale)
    tilt = float(rng.uniform(-12.0, -3.0))  # dB per octave
    centers = rng.uniform(250.0, 1800.0, size=3) * scale
    gains = rng.uniform(0.5, 2.0, size=3)
    freqs = f0 * np.arange(1, N_HARMONICS + 1)
    env = 0.15 + sum(g * np.exp(-0.5 * ((freqs - c) / 120.0) ** 2) for g, c in zip(gains, centers))
    amps = env * 10.0 ** (tilt * np.log2(np.arange(1, N_HARMONICS + 1)) / 20.0)
    amps[freqs >= sample_rate / 2 * 0.95] = 0.0
    amps = amps / amps.sum()
    return SpeakerProfile(id, f0, tuple(float(a) for a in amps), tilt)


def gen_utterance(
    speaker: SpeakerProfile,
    domain: DomainSpec,
    duration_s: float,
    utt_seed: int,
    sample_rate: int = 4000,
) -> np.ndarray:
    """Float64 waveform in [-1, 1]."""
    if duration_s < MIN_DURATION:
        raise ValueError(f"duration {duration_s}s is below the minimum {MIN_DURATION}s")
    domain.check(sample_rate)
    rng = _rng(speaker.id, utt_seed, 0xA0D10)
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    # f0 contour: utterance offset plus syllable-rate pitch movement
    f0 = speaker.f0 * (1.0 + domain.f0_jitter * rng.standard_normal()) * (
        1.0
        + domain.pitch_excursion
        * np.sin(2 * np.pi * domain.modulation_rate * rng.uniform(0.5, 1.0) * t + rng.uniform(0, 2 * np.pi))
    )
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    amps = np.asarray(speaker.harmonic_amps)
    content = _content_gains(rng, domain, n, sample_rate, len(amps))
    x = np.zeros(n)
    for h, a in enumerate(amps, start=1):
        if a > 0:
            x += a * content[h - 1] * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    env = 1.0 + 0.6 * np.sin(2 * np.pi * domain.modulation_rate * t + rng.uniform(0, 2 * np.pi))
    x *= env
    lo, hi = domain.channel_filter
    sos = signal.butter(4, [max(lo, 1.0), hi], btype="bandpass", fs=sample_rate, output="sos")
    x = signal.sosfilt(sos, x)
    if domain.tilt_db or domain.tilt_jitter_db:
        x = _tilt(x, domain.tilt_db + rng.uniform(-1, 1) * domain.tilt_jitter_db, sample_rate)
    rms = np.sqrt(np.mean(x**2)) or 1.0
    x = x + domain.noise_level * rms * rng.standard_normal(n)
    peak = np.max(np.abs(x)) or 1.0
    x = x / peak * rng.uniform(0.3, 0.8)
    return np.clip(x, -1.0, 1.0)


def _content_gains(rng, domain: DomainSpec, n: int, sample_rate: int, n_harm: int) -> np.ndarray:
    """Per-harmonic gain tracks from random syllable-level envelopes, ``(n_harm, n)``."""
    if domain.content_variability <= 0:
        return np.ones((n_harm, 1))
    syl = sample_rate / domain.modulation_rate
    n_syl = int(np.ceil(n / syl)) + 2
    # smooth random envelope over harmonic index, one per syllable
    raw = rng.standard_normal((n_syl, n_harm + 4))
    kernel = np.array([0.25, 0.5, 0.25])
    smooth = np.stack([np.convolve(r, kernel, mode="same")[2:-2] for r in raw])
    knots = np.arange(n_syl) * syl
    t = np.arange(n)
    logg = np.stack([np.interp(t, knots, smooth[:, h]) for h in range(n_harm)])
    return np.exp(domain.content_variability * logg)


def _tilt(x: np.ndarray, db_per_octave: float, sample_rate: int, f_ref: float = 500.0) -> np.ndarray:
    spec = np.fft.rfft(x)
    f = np.maximum(np.fft.rfftfreq(x.size, 1.0 / sample_rate), 30.0)
    return np.fft.irfft(spec * 10.0 ** (db_per_octave * np.log2(f / f_ref) / 20.0), n=x.size)


# ----------------------------------------------------------------------------
# files
# ----------------------------------------------------------------------------


def write_wav(path, x: np.ndarray, sample_rate: int) -> None:
    pcm = np.round(np.clip(x, -1.0, 1.0) * 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(sample_rate)
        f.writeframes(pcm.tobytes())


def read_wav(path) -> tuple[np.ndarray, int]:
    try:
        with wave.open(str(path), "rb") as f:
            if f.getsampwidth() != 2 or f.getnchannels() != 1:
                raise ValueError(f"{path}: expected 16-bit mono PCM")
            sr = f.getframerate()
            raw = f.readframes(f.getnframes())
    except FileNotFoundError:
        raise FileNotFoundError(f"missing audio file: {path}") from None
    return np.clip(np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0, -1.0, 1.0), sr


@dataclass(frozen=True)
class ManifestRow:
    path: str
    speaker: int
    domain: str


def write_manifest(path, rows: Iterable[ManifestRow]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        for r in rows:
            w.writerow([r.path, r.speaker, r.domain])


def read_manifest(path) -> list[ManifestRow]:
    with open(path, newline="") as f:
        return [ManifestRow(p, int(s), d) for p, s, d in csv.reader(f, delimiter="\t")]


def gen_dataset(
    out_dir,
    n_speakers: int,
    n_utts_per_spk: int,
    domain: DomainSpec,
    seed: int,
    speaker_offset: int = 0,
    duration_s: float = 2.5,
    sample_rate: int = 4000,
    manifest_name: str = "manifest.tsv",
) -> list[ManifestRow]:
    """Write WAVs plus a tab-separated manifest; paths are relative to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for s in range(speaker_offset, speaker_offset + n_speakers):
        spk = gen_speaker(seed, s, sample_rate)
        for u in range(n_utts_per_spk):
            utt_seed = seed * 1_000_003 + u * 7919 + zlib.crc32(domain.id.encode()) % 9973
            x = gen_utterance(spk, domain, duration_s, utt_seed, sample_rate)
            name = f"spk{s:04d}_{domain.id}_{u:03d}.wav"
            try:
                write_wav(out / name, x, sample_rate)
            except OSError as e:
                raise OSError(f"failed to write {out / name}: {e}") from e
            rows.append(ManifestRow(name, s, domain.id))
    write_manifest(out / manifest_name, rows)
    return rows


# ----------------------------------------------------------------------------
# trials
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class Trial:
    label: int
    enrol: str
    test: str


def gen_trials(rows: list[ManifestRow], n_target: int, n_nontarget: int, seed: int) -> list[Trial]:
    """Sample distinct ordered (enrol, test) pairs, never pairing a file with itself."""
    rng = np.random.default_rng(seed)
    by_spk: dict[int, list[int]] = {}
    for i, r in enumerate(rows):
        by_spk.setdefault(r.speaker, []).append(i)
    same = [(i, j) for ids in by_spk.values() for i in ids for j in ids if i != j]
    n = len(rows)
    n_diff = n * (n - 1) - len(same)
    if n_target > len(same) or n_nontarget > n_diff:
        raise ValueError(
            f"cannot draw {n_target} target / {n_nontarget} nontarget trials: "
            f"only {len(same)} / {n_diff} distinct pairs available"
        )
    pick = rng.choice(len(same), size=n_target, replace=False)
    targets = [same[k] for k in sorted(pick)]
    nontargets: list[tuple[int, int]] = []
    seen: set[tuple[int, int]] = set()
    while len(nontargets) < n_nontarget:
        i, j = rng.integers(0, n, size=2)
        if rows[i].speaker == rows[j].speaker or (i, j) in seen:
            continue
        seen.add((i, j))
        nontargets.append((int(i), int(j)))
    trials = [Trial(1, rows[i].path, rows[j].path) for i, j in targets]
    trials += [Trial(0, rows[i].path, rows[j].path) for i, j in nontargets]
    order = rng.permutation(len(trials))
    return [trials[k] for k in order]


def write_trials(path, trials: Iterable[Trial]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        for t in trials:
            w.writerow([t.label, t.enrol, t.test])


def read_trials(path) -> list[Trial]:
    with open(path, newline="") as f:
        return [Trial(int(l), e, t) for l, e, t in csv.reader(f, delimiter="\t")]
