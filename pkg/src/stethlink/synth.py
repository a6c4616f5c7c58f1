"""Deterministic synthetic auscultation signals (microphone-level volts).

* heart  - Gaussian-windowed 37 Hz (S1) and 60 Hz (S2) tone bursts
* murmur - heart plus 150-400 Hz band noise filling late systole
* lung   - breath-modulated noise band-limited to 100-900 Hz
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal as sps

from .chain import AudioBuffer
from .exceptions import ValidationError

KINDS = ("heart", "murmur", "lung")

S1_FREQ = 37.0
S2_FREQ = 60.0


@dataclass(frozen=True)
class BeatTiming:
    s1_times: np.ndarray
    s2_times: np.ndarray


def beat_timing(bpm: float, duration: float, first_s1: float = 0.5, systole: float = 0.3) -> BeatTiming:
    """Burst centres whose whole Gaussian window fits inside ``duration``."""
    if not bpm > 0:
        raise ValidationError("bpm must be positive")
    period = 60.0 / bpm
    s1 = np.arange(first_s1, duration, period)
    s2 = s1 + systole
    margin = 0.1
    return BeatTiming(s1[s1 <= duration - margin], s2[s2 <= duration - margin])


def _burst(t: np.ndarray, centre: float, freq: float, sigma: float) -> np.ndarray:
    return np.exp(-0.5 * ((t - centre) / sigma) ** 2) * np.sin(2 * np.pi * freq * (t - centre))


def heart(
    bpm: float = 60.0,
    duration: float = 10.0,
    sample_rate: int = 4000,
    amplitude: float = 0.005,
    s2_ratio: float = 0.6,
    sigma: float = 0.025,
    first_s1: float = 0.5,
    systole: float = 0.3,
) -> AudioBuffer:
    t = np.arange(round(duration * sample_rate)) / sample_rate
    timing = beat_timing(bpm, duration, first_s1, systole)
    x = np.zeros_like(t)
    for c in timing.s1_times:
        x += amplitude * _burst(t, c, S1_FREQ, sigma)
    for c in timing.s2_times:
        x += s2_ratio * amplitude * _burst(t, c, S2_FREQ, sigma)
    return AudioBuffer(sample_rate, x)


def _band_noise(rng: np.random.Generator, n: int, lo: float, hi: float, sample_rate: int) -> np.ndarray:
    sos = sps.butter(4, [lo, hi], btype="bandpass", fs=sample_rate, output="sos")
    y = sps.sosfilt(sos, rng.standard_normal(n + sample_rate))[sample_rate:]
    return y / np.sqrt(np.mean(y * y))


def murmur(
    bpm: float = 60.0,
    duration: float = 10.0,
    sample_rate: int = 4000,
    seed: int = 0,
    amplitude: float = 0.005,
    murmur_rms: float = 0.0008,
    systole: float = 0.3,
    first_s1: float = 0.5,
) -> AudioBuffer:
    """Heart sound with a late-systolic 150-400 Hz murmur between S1 and S2."""
    base = heart(bpm, duration, sample_rate, amplitude, systole=systole, first_s1=first_s1)
    n = len(base)
    t = np.arange(n) / sample_rate
    rng = np.random.default_rng(seed)
    noise = _band_noise(rng, n, 150.0, 400.0, sample_rate)
    gate = np.zeros(n)
    for c in beat_timing(bpm, duration, first_s1, systole).s1_times:
        lo, hi = c + 0.45 * systole, c + systole - 0.06
        inside = (t >= lo) & (t < hi)
        gate[inside] = np.sin(np.pi * (t[inside] - lo) / (hi - lo))
    return base.with_samples(base.samples + murmur_rms * gate * noise)


def lung(
    duration: float = 10.0,
    sample_rate: int = 4000,
    seed: int = 0,
    rms: float = 0.0008,
    breath_rate: float = 0.25,
) -> AudioBuffer:
    """Vesicular-style breath noise with energy from 100 to 900 Hz."""
    if sample_rate <= 2 * 900:
        raise ValidationError("lung synthesis needs a sample rate above 1800 Hz")
    n = round(duration * sample_rate)
    t = np.arange(n) / sample_rate
    rng = np.random.default_rng(seed)
    noise = _band_noise(rng, n, 100.0, 900.0, sample_rate)
    envelope = 0.6 + 0.4 * np.sin(2 * np.pi * breath_rate * t)
    return AudioBuffer(sample_rate, rms * envelope * noise)


def synthesize(kind: str, bpm: float = 60.0, duration: float = 10.0, sample_rate: int = 4000,
               seed: int = 0) -> AudioBuffer:
    if kind == "heart":
        return heart(bpm, duration, sample_rate)
    if kind == "murmur":
        return murmur(bpm, duration, sample_rate, seed)
    if kind == "lung":
        return lung(duration, sample_rate, seed)
    raise ValidationError(f"unknown signal kind {kind!r}; choose from {KINDS}")


def add_white_noise(buf: AudioBuffer, snr_db: float, seed: int = 0) -> AudioBuffer:
    """Add Gaussian white noise at ``snr_db`` relative to the signal's mean power."""
    power = float(np.mean(buf.samples ** 2))
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(len(buf)) * np.sqrt(power / 10 ** (snr_db / 10))
    return buf.with_samples(buf.samples + noise)
