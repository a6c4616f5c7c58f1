"""Digital emulation of the stethoscope front end and the receiver DAC.

Stage order on the transmit side::

    dc_block -> preamplify -> low-pass filter -> power_amplify -> quantize_adc

All analog stages work on :class:`AudioBuffer` values in volts. The ADC
produces a :class:`SampleBlock` of 12-bit codes; :func:`dequantize_dac`
maps codes back to volts at the receiver.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sps

from .exceptions import FilterDesignError, ValidationError

ADC_BITS = 12
ADC_MAX_CODE = (1 << ADC_BITS) - 1  # 4095
ADC_MID_CODE = 2048
CUTOFF_CHOICES = (100, 1000)


def _as_samples(samples) -> np.ndarray:
    arr = np.array(samples, dtype=np.float64, copy=True).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise ValidationError("audio samples must be finite")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class AudioBuffer:
    """Uniformly sampled real signal in volts."""

    sample_rate: int
    samples: np.ndarray

    def __post_init__(self):
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ValidationError(f"sample_rate must be a positive integer, got {self.sample_rate!r}")
        object.__setattr__(self, "sample_rate", int(self.sample_rate))
        object.__setattr__(self, "samples", _as_samples(self.samples))

    def __len__(self) -> int:
        return self.samples.size

    def __eq__(self, other):
        if not isinstance(other, AudioBuffer):
            return NotImplemented
        return self.sample_rate == other.sample_rate and np.array_equal(self.samples, other.samples)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def with_samples(self, samples) -> AudioBuffer:
        return AudioBuffer(self.sample_rate, samples)


@dataclass(frozen=True, eq=False)
class SampleBlock:
    """A run of 12-bit ADC codes starting at a known sample index."""

    codes: np.ndarray
    start_timestamp: int = 0
    sample_rate: int = 4000

    def __post_init__(self):
        codes = np.array(self.codes, copy=True).reshape(-1)
        if codes.size and not np.issubdtype(codes.dtype, np.integer):
            if not np.all(codes == np.round(codes)):
                raise ValidationError("codes must be integers")
        codes = codes.astype(np.int64)
        if codes.size and (codes.min() < 0 or codes.max() > ADC_MAX_CODE):
            raise ValidationError("codes must lie in [0, 4095]")
        if self.start_timestamp < 0:
            raise ValidationError("start_timestamp must be non-negative")
        if self.sample_rate <= 0:
            raise ValidationError("sample_rate must be positive")
        codes.setflags(write=False)
        object.__setattr__(self, "codes", codes)

    def __len__(self) -> int:
        return self.codes.size

    def __eq__(self, other):
        if not isinstance(other, SampleBlock):
            return NotImplemented
        return (
            self.start_timestamp == other.start_timestamp
            and self.sample_rate == other.sample_rate
            and np.array_equal(self.codes, other.codes)
        )


@dataclass(frozen=True)
class ChainConfig:
    preamp_gain: float = 20.0
    cutoff: int = 100
    filter_gain: float = 1.6
    volume: float = 0.5
    power_gain: float = 20.0
    full_scale: float = 2.5
    sample_rate: int = 4000
    dc_block_hz: float = 5.0

    def __post_init__(self):
        if self.cutoff not in CUTOFF_CHOICES:
            raise ValidationError(f"cutoff must be one of {CUTOFF_CHOICES}, got {self.cutoff!r}")
        if not 0.0 <= self.volume <= 1.0:
            raise ValidationError(f"volume must be in [0, 1], got {self.volume!r}")
        for name in ("preamp_gain", "filter_gain", "power_gain", "full_scale", "sample_rate"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        if self.sample_rate <= 2 * self.cutoff:
            raise ValidationError(
                f"sample_rate {self.sample_rate} Hz leaves no Nyquist margin for a {self.cutoff} Hz cutoff"
            )
        if self.dc_block_hz < 0 or self.dc_block_hz >= self.sample_rate / 2:
            raise ValidationError("dc_block_hz must be in [0, Nyquist)")

    def replace(self, **changes) -> ChainConfig:
        return dataclasses.replace(self, **changes)

    @property
    def nominal_gain(self) -> float:
        """Passband voltage gain from microphone to ADC input."""
        return self.preamp_gain * self.filter_gain * self.volume * self.power_gain


@dataclass(eq=False)
class BiquadSection:
    """Second-order IIR section, ``a0`` normalized to 1.

    ``state`` holds the two transposed-direct-form-II delay values and is
    carried across calls to :func:`filter_apply`.
    """

    b0: float
    b1: float
    b2: float
    a1: float
    a2: float
    state: np.ndarray = field(default_factory=lambda: np.zeros(2))

    @property
    def b(self) -> np.ndarray:
        return np.array([self.b0, self.b1, self.b2])

    @property
    def a(self) -> np.ndarray:
        return np.array([1.0, self.a1, self.a2])

    def poles(self) -> np.ndarray:
        return np.roots(self.a)

    def is_stable(self) -> bool:
        return bool(np.all(np.abs(self.poles()) < 1.0))

    def reset(self) -> None:
        self.state = np.zeros(2)

    def copy(self) -> BiquadSection:
        return dataclasses.replace(self, state=self.state.copy())


def _check_buffer(buf) -> AudioBuffer:
    if not isinstance(buf, AudioBuffer):
        raise ValidationError(f"expected AudioBuffer, got {type(buf).__name__}")
    return buf


def preamplify(buf: AudioBuffer, gain: float = 20.0) -> AudioBuffer:
    """Multiply by a fixed gain. No rail clipping at this stage."""
    _check_buffer(buf)
    if not gain > 0:
        raise ValidationError("preamp gain must be positive")
    return buf.with_samples(gain * buf.samples)


def _prewarp(freq: float, sample_rate: float) -> float:
    return math.tan(math.pi * freq / sample_rate)


def design_lowpass(cutoff: float, filter_gain: float = 1.6, sample_rate: int = 4000) -> BiquadSection:
    """Second-order Butterworth low-pass by pre-warped bilinear transform.

    DC gain equals ``filter_gain``; the magnitude at ``cutoff`` is
    ``filter_gain / sqrt(2)`` exactly, because the analog prototype corner is
    pre-warped onto the digital cutoff.
    """
    if not 0 < cutoff < sample_rate / 2:
        raise FilterDesignError(f"cutoff {cutoff} Hz must lie in (0, {sample_rate / 2}) Hz")
    if not filter_gain > 0:
        raise FilterDesignError("filter_gain must be positive")
    k = _prewarp(cutoff, sample_rate)
    k2 = k * k
    norm = 1.0 / (1.0 + math.sqrt(2.0) * k + k2)
    b0 = filter_gain * k2 * norm
    return BiquadSection(
        b0=b0,
        b1=2.0 * b0,
        b2=b0,
        a1=2.0 * (k2 - 1.0) * norm,
        a2=(1.0 - math.sqrt(2.0) * k + k2) * norm,
    )


def design_dc_block(corner: float, sample_rate: int) -> BiquadSection:
    """First-order high-pass (bilinear, pre-warped) stored as a degenerate biquad."""
    if not 0 < corner < sample_rate / 2:
        raise FilterDesignError(f"corner {corner} Hz must lie in (0, {sample_rate / 2}) Hz")
    k = _prewarp(corner, sample_rate)
    g = 1.0 / (1.0 + k)
    return BiquadSection(b0=g, b1=-g, b2=0.0, a1=(k - 1.0) / (k + 1.0), a2=0.0)


def filter_apply(buf: AudioBuffer, section: BiquadSection) -> AudioBuffer:
    """Run ``buf`` through ``section``, updating its delay state in place."""
    _check_buffer(buf)
    if not section.is_stable():
        raise ValidationError("biquad section is unstable")
    if buf.samples.size == 0:
        return buf.with_samples(buf.samples)
    y, zf = sps.lfilter(section.b, section.a, buf.samples, zi=section.state)
    section.state = zf
    return buf.with_samples(y)


def power_amplify(
    buf: AudioBuffer, volume: float, power_gain: float = 20.0, full_scale: float = 2.5
) -> AudioBuffer:
    """Volume-scaled gain followed by symmetric rail saturation at ``full_scale``."""
    _check_buffer(buf)
    if not 0.0 <= volume <= 1.0:
        raise ValidationError(f"volume must be in [0, 1], got {volume!r}")
    out = np.clip(volume * power_gain * buf.samples, -full_scale, full_scale)
    return buf.with_samples(out)


def quantize_adc(buf: AudioBuffer, full_scale: float = 2.5, start_timestamp: int = 0) -> SampleBlock:
    """12-bit conversion: ``round_half_up((v + fs) / 2fs * 4095)``, clamped."""
    _check_buffer(buf)
    if not full_scale > 0:
        raise ValidationError("full_scale must be positive")
    scaled = (buf.samples + full_scale) / (2.0 * full_scale) * ADC_MAX_CODE
    codes = np.clip(np.floor(scaled + 0.5), 0, ADC_MAX_CODE).astype(np.int64)
    return SampleBlock(codes, start_timestamp, buf.sample_rate)


def dequantize_dac(block: SampleBlock, full_scale: float = 2.5) -> AudioBuffer:
    """12-bit DAC: ``code / 4095 * 2fs - fs``."""
    codes = np.asarray(block.codes)
    if codes.size and (codes.min() < 0 or codes.max() > ADC_MAX_CODE):
        raise ValidationError("codes must lie in [0, 4095]")
    volts = codes.astype(np.float64) / ADC_MAX_CODE * (2.0 * full_scale) - full_scale
    return AudioBuffer(block.sample_rate, volts)


class TransmitChain:
    """Stateful transmit front end for one stream.

    Filter state and the running sample index persist across :meth:`process`
    calls, so feeding a signal in blocks gives the same codes as feeding it
    whole. Not safe to share between concurrent callers.
    """

    def __init__(self, config: ChainConfig | None = None):
        self.config = config or ChainConfig()
        self.sample_index = 0
        self._build_filters()

    def _build_filters(self) -> None:
        cfg = self.config
        self.dc_block = design_dc_block(cfg.dc_block_hz, cfg.sample_rate) if cfg.dc_block_hz > 0 else None
        self.lowpass = design_lowpass(cfg.cutoff, cfg.filter_gain, cfg.sample_rate)

    def reconfigure(self, config: ChainConfig) -> None:
        """Swap configuration at a block boundary.

        Changing the cutoff (or anything else the filters depend on) rebuilds
        the filters with zeroed state; a volume change keeps filter state.
        """
        old = self.config
        self.config = config
        filter_keys = ("cutoff", "filter_gain", "sample_rate", "dc_block_hz")
        if any(getattr(old, k) != getattr(config, k) for k in filter_keys):
            self._build_filters()

    def reset(self) -> None:
        self.sample_index = 0
        self._build_filters()

    def analog(self, buf: AudioBuffer) -> AudioBuffer:
        """Everything up to the ADC input (volts)."""
        cfg = self.config
        if buf.sample_rate != cfg.sample_rate:
            raise ValidationError(
                f"buffer rate {buf.sample_rate} Hz does not match chain rate {cfg.sample_rate} Hz"
            )
        x = filter_apply(buf, self.dc_block) if self.dc_block is not None else buf
        x = preamplify(x, cfg.preamp_gain)
        x = filter_apply(x, self.lowpass)
        return power_amplify(x, cfg.volume, cfg.power_gain, cfg.full_scale)

    def process(self, buf: AudioBuffer) -> SampleBlock:
        block = quantize_adc(self.analog(buf), self.config.full_scale, self.sample_index)
        self.sample_index += len(buf)
        return block


def run_transmit_chain(buf: AudioBuffer, cfg: ChainConfig) -> SampleBlock:
    """One-shot transmit chain with fresh filter state."""
    return TransmitChain(cfg).process(buf)
