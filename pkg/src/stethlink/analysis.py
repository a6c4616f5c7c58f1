"""Heart sound detection and heart-rate estimation.

S1 carries most of its energy around 30-45 Hz and S2 around 50-70 Hz. The
detector finds sound events on a Shannon energy envelope and labels each by
which of those two bands dominates around it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal as sps
from sklearn.base import BaseEstimator

from .chain import AudioBuffer
from .estimators import check_signal
from .exceptions import InsufficientDataError, ValidationError

S1 = "S1"
S2 = "S2"


@dataclass(frozen=True)
class BandSpec:
    lo: float
    hi: float

    def __post_init__(self):
        if not 0 < self.lo < self.hi:
            raise ValidationError(f"band must satisfy 0 < lo < hi, got [{self.lo}, {self.hi}]")

    def check(self, sample_rate: float) -> None:
        if self.hi >= sample_rate / 2:
            raise ValidationError(f"band upper edge {self.hi} Hz is not below Nyquist {sample_rate / 2} Hz")


S1_BAND = BandSpec(30.0, 45.0)
S2_BAND = BandSpec(50.0, 70.0)
DETECTION_BAND = BandSpec(20.0, 150.0)


@dataclass(frozen=True)
class HeartEvent:
    time: float
    label: str
    energy_s1_band: float
    energy_s2_band: float


def _bandpass_sos(band: BandSpec, sample_rate: float) -> np.ndarray:
    band.check(sample_rate)
    # order-2 prototype -> 4th-order band-pass as two biquads
    return sps.butter(2, [band.lo, band.hi], btype="bandpass", fs=sample_rate, output="sos")


def bandpass(x: np.ndarray, band: BandSpec, sample_rate: float, zero_phase: bool = False) -> np.ndarray:
    sos = _bandpass_sos(band, sample_rate)
    if x.size == 0:
        return x.copy()
    if zero_phase:
        return sps.sosfiltfilt(sos, x)
    return sps.sosfilt(sos, x)


def band_energy(buf: AudioBuffer, band: BandSpec) -> float:
    """Mean squared amplitude after a 4th-order Butterworth band-pass."""
    y = bandpass(check_signal(buf), band, buf.sample_rate)
    return float(np.mean(y * y)) if y.size else 0.0


def shannon_envelope(x: np.ndarray, frame: int, hop: int) -> np.ndarray:
    """Frame-averaged Shannon energy ``-x^2 log x^2`` of a peak-normalized signal."""
    peak = np.max(np.abs(x)) if x.size else 0.0
    if peak == 0 or x.size < frame:
        return np.zeros(0)
    sq = (x / peak) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        se = np.where(sq > 0, -sq * np.log(sq), 0.0)
    starts = np.arange(0, x.size - frame + 1, hop)
    csum = np.concatenate(([0.0], np.cumsum(se)))
    return (csum[starts + frame] - csum[starts]) / frame


def pick_peaks(env: np.ndarray, threshold: float, refractory_frames: int) -> list[int]:
    """Local maxima above ``threshold``, keeping the strongest within each refractory span.

    Candidates are accepted largest-first; among equal values the earliest wins.
    """
    if env.size < 3:
        return []
    mid = env[1:-1]
    is_peak = (mid > env[:-2]) & (mid >= env[2:]) & (mid > threshold)
    cand = np.flatnonzero(is_peak) + 1
    order = sorted(cand.tolist(), key=lambda i: (-env[i], i))
    kept: list[int] = []
    for i in order:
        if all(abs(i - k) >= refractory_frames for k in kept):
            kept.append(i)
    return sorted(kept)


def refine_peak(env: np.ndarray, peak: int, threshold: float) -> float:
    """Envelope-weighted centroid (fractional frame) of the supra-threshold run around ``peak``.

    A normalized burst's Shannon energy dips at its own maximum, so the raw
    envelope peak sits on a side lobe; the centroid recovers the burst centre.
    """
    lo = peak
    while lo > 0 and env[lo - 1] > threshold:
        lo -= 1
    hi = peak
    while hi < env.size - 1 and env[hi + 1] > threshold:
        hi += 1
    w = env[lo : hi + 1] - threshold
    return float(np.sum(w * np.arange(lo, hi + 1)) / np.sum(w))


def _window_energy(y: np.ndarray, center: int, half: int) -> float:
    seg = y[max(0, center - half) : center + half + 1]
    return float(np.mean(seg * seg)) if seg.size else 0.0


def detect_heart_sounds(
    buf: AudioBuffer,
    frame: float = 0.020,
    hop: float = 0.010,
    threshold_k: float = 0.5,
    refractory: float = 0.200,
    class_window: float = 0.050,
    min_duration: float = 2.0,
    silence_floor: float = 1e-6,
) -> list[HeartEvent]:
    """Detect S1/S2 sounds.

    Steps: zero-phase 20-150 Hz band-pass, Shannon energy envelope, z-score,
    threshold at ``mean + threshold_k * std``, refractory peak picking, centroid
    refinement of each peak time, then a band-energy vote over
    ``+/- class_window`` seconds around each peak.
    """
    fs = buf.sample_rate
    if buf.duration < min_duration:
        raise ValidationError(f"need at least {min_duration} s of audio, got {buf.duration:.3f} s")
    x = check_signal(buf)
    y = bandpass(x, DETECTION_BAND, fs, zero_phase=True)
    if np.max(np.abs(y)) < silence_floor:
        return []
    n_frame = max(1, round(frame * fs))
    n_hop = max(1, round(hop * fs))
    env = shannon_envelope(y, n_frame, n_hop)
    sd = env.std()
    if sd == 0:
        return []
    env = (env - env.mean()) / sd
    thr = env.mean() + threshold_k * env.std()
    peaks = pick_peaks(env, thr, max(1, round(refractory / hop)))

    y1 = bandpass(x, S1_BAND, fs, zero_phase=True)
    y2 = bandpass(x, S2_BAND, fs, zero_phase=True)
    half = round(class_window * fs)
    events = []
    for p in peaks:
        centre = round(refine_peak(env, p, thr) * n_hop + n_frame / 2)
        e1 = _window_energy(y1, centre, half)
        e2 = _window_energy(y2, centre, half)
        events.append(HeartEvent(centre / fs, S1 if e1 >= e2 else S2, e1, e2))
    return events


def estimate_heart_rate(events) -> float:
    """Beats per minute from the median S1-to-S1 interval."""
    times = sorted(e.time for e in events if e.label == S1)
    if len(times) < 2:
        raise InsufficientDataError(f"need at least 2 S1 events, got {len(times)}")
    return 60.0 / float(np.median(np.diff(times)))


def format_report(events, bpm: float | None) -> str:
    """One line per event (time_s, label, e_s1, e_s2) then a rate summary."""
    if not events:
        return "no events"
    lines = [f"{e.time:.3f}\t{e.label}\t{e.energy_s1_band:.6e}\t{e.energy_s2_band:.6e}" for e in events]
    lines.append(f"heart rate: {bpm:.1f} bpm" if bpm is not None else "heart rate: insufficient S1 events")
    return "\n".join(lines)


class HeartSoundDetector(BaseEstimator):
    """Estimator wrapper around :func:`detect_heart_sounds`.

    ``fit`` only validates parameters; ``predict`` returns the event list and
    ``predict_rate`` the heart rate in beats per minute.
    """

    def __init__(self, sample_rate=4000, frame=0.020, hop=0.010, threshold_k=0.5, refractory=0.200,
                 class_window=0.050):
        self.sample_rate = sample_rate
        self.frame = frame
        self.hop = hop
        self.threshold_k = threshold_k
        self.refractory = refractory
        self.class_window = class_window

    def fit(self, X=None, y=None):
        if self.hop <= 0 or self.frame <= 0 or self.refractory <= 0:
            raise ValidationError("frame, hop and refractory must be positive")
        DETECTION_BAND.check(self.sample_rate)
        return self

    def _buffer(self, X):
        if isinstance(X, AudioBuffer):
            return X
        return AudioBuffer(self.sample_rate, check_signal(X))

    def predict(self, X):
        return detect_heart_sounds(
            self._buffer(X), self.frame, self.hop, self.threshold_k, self.refractory, self.class_window
        )

    def predict_rate(self, X):
        return estimate_heart_rate(self.predict(X))
