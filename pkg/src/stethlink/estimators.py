"""scikit-learn compatible wrappers around the front-end stages.

Each stage is a transformer over a 1-D signal so the chain composes with
:class:`sklearn.pipeline.Pipeline`, ``clone`` and ``get_params``::

    >>> from stethlink.estimators import make_transmit_pipeline
    >>> pipe = make_transmit_pipeline()
    >>> codes = pipe.fit_transform(samples)          # doctest: +SKIP

Filter stages keep their delay state between ``transform`` calls, like the
hardware does; ``fit`` (or ``reset``) clears it.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.pipeline import Pipeline
from sklearn.utils.validation import check_is_fitted

from . import chain
from .chain import AudioBuffer, ChainConfig
from .exceptions import ValidationError


def check_signal(X) -> np.ndarray:
    """Coerce ``X`` to a finite 1-D float array.

    Accepts an :class:`AudioBuffer`, a 1-D sequence, or an ``(n, 1)`` column.
    """
    if isinstance(X, AudioBuffer):
        return np.asarray(X.samples, dtype=np.float64)
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 2 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim != 1:
        raise ValidationError(f"expected a 1-D signal, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("signal contains NaN or infinity")
    return arr


def check_codes(X) -> np.ndarray:
    arr = np.asarray(X)
    if arr.ndim != 1:
        raise ValidationError(f"expected 1-D codes, got shape {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() > chain.ADC_MAX_CODE):
        raise ValidationError("codes must lie in [0, 4095]")
    return arr.astype(np.int64)


class _SignalTransformer(TransformerMixin, BaseEstimator):
    sample_rate = 4000

    def _buffer(self, X) -> AudioBuffer:
        return AudioBuffer(getattr(self, "sample_rate", 4000), check_signal(X))

    def fit(self, X=None, y=None):
        self._fit()
        return self

    def _fit(self):
        self.n_features_in_ = 1


class DCBlocker(_SignalTransformer):
    """First-order high-pass that removes microphone DC offset."""

    def __init__(self, corner=5.0, sample_rate=4000):
        self.corner = corner
        self.sample_rate = sample_rate

    def _fit(self):
        super()._fit()
        self.section_ = chain.design_dc_block(self.corner, self.sample_rate)

    def reset(self):
        return self.fit()

    def transform(self, X):
        check_is_fitted(self, "section_")
        return chain.filter_apply(self._buffer(X), self.section_).samples


class Preamplifier(_SignalTransformer):
    def __init__(self, gain=20.0):
        self.gain = gain

    def _fit(self):
        super()._fit()
        if not self.gain > 0:
            raise ValidationError("gain must be positive")

    def transform(self, X):
        return chain.preamplify(self._buffer(X), self.gain).samples


class LowPassFilter(_SignalTransformer):
    """Selectable second-order Butterworth low-pass (100 Hz heart / 1000 Hz lung)."""

    def __init__(self, cutoff=100, filter_gain=1.6, sample_rate=4000):
        self.cutoff = cutoff
        self.filter_gain = filter_gain
        self.sample_rate = sample_rate

    def _fit(self):
        super()._fit()
        self.section_ = chain.design_lowpass(self.cutoff, self.filter_gain, self.sample_rate)

    def reset(self):
        return self.fit()

    def transform(self, X):
        check_is_fitted(self, "section_")
        return chain.filter_apply(self._buffer(X), self.section_).samples


class PowerAmplifier(_SignalTransformer):
    def __init__(self, volume=0.5, power_gain=20.0, full_scale=2.5):
        self.volume = volume
        self.power_gain = power_gain
        self.full_scale = full_scale

    def _fit(self):
        super()._fit()
        if not 0.0 <= self.volume <= 1.0:
            raise ValidationError("volume must be in [0, 1]")

    def transform(self, X):
        return chain.power_amplify(self._buffer(X), self.volume, self.power_gain, self.full_scale).samples


class ADCQuantizer(_SignalTransformer):
    """12-bit ADC; ``inverse_transform`` is the matching DAC."""

    def __init__(self, full_scale=2.5):
        self.full_scale = full_scale

    def transform(self, X):
        return np.asarray(chain.quantize_adc(self._buffer(X), self.full_scale).codes)

    def inverse_transform(self, X):
        block = chain.SampleBlock(check_codes(X))
        return chain.dequantize_dac(block, self.full_scale).samples


def make_transmit_pipeline(config: ChainConfig | None = None, quantize: bool = True) -> Pipeline:
    """Build the transmit chain as a fitted-on-demand sklearn Pipeline."""
    cfg = config or ChainConfig()
    steps = []
    if cfg.dc_block_hz > 0:
        steps.append(("dc_block", DCBlocker(cfg.dc_block_hz, cfg.sample_rate)))
    steps += [
        ("preamp", Preamplifier(cfg.preamp_gain)),
        ("lowpass", LowPassFilter(cfg.cutoff, cfg.filter_gain, cfg.sample_rate)),
        ("power_amp", PowerAmplifier(cfg.volume, cfg.power_gain, cfg.full_scale)),
    ]
    if quantize:
        steps.append(("adc", ADCQuantizer(cfg.full_scale)))
    return Pipeline(steps)
