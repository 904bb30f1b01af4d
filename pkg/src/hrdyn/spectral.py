"""Spectral-peak heart-rate estimate, used to seed the HR history at inference."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array

from .exceptions import ConfigurationError, DegenerateSegmentError, InputError
from .signal import Segment


@dataclass(frozen=True)
class SpectralConfig:
    fs_hz: float = 64.0
    fft_len: int = 8192
    band_hz: tuple = (0.5, 4.0)

    def __post_init__(self):
        low, high = self.band_hz
        if not self.fs_hz > 0:
            raise ConfigurationError(f"fs_hz must be positive, got {self.fs_hz}")
        if not (0 < low < high < self.fs_hz / 2):
            raise ConfigurationError(
                f"band {self.band_hz} must lie strictly inside (0, {self.fs_hz / 2}) Hz"
            )
        if int(self.fft_len) != self.fft_len or self.fft_len < 2:
            raise ConfigurationError(f"fft_len must be an integer >= 2, got {self.fft_len}")

    @property
    def resolution_bpm(self):
        return 60.0 * self.fs_hz / self.fft_len


def estimate_hr_fft(segment, cfg=None):
    """Return 60 x the frequency of the largest Hann-windowed spectral peak in band.

    ``segment`` may be a :class:`~hrdyn.signal.Segment` or a plain vector.
    Equal magnitudes resolve to the lower frequency.
    """
    cfg = SpectralConfig() if cfg is None else cfg
    values = segment.values if isinstance(segment, Segment) else segment
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] < 2:
        raise InputError("segment must be a 1-D vector with at least two samples")
    if x.shape[0] > cfg.fft_len:
        raise ConfigurationError(f"fft_len {cfg.fft_len} is shorter than the segment ({x.shape[0]})")
    if not np.any(x):
        raise DegenerateSegmentError("all-zero segment has no spectral peak")
    spectrum = np.abs(np.fft.rfft((x - x.mean()) * np.hanning(x.shape[0]), n=cfg.fft_len))
    freqs = np.fft.rfftfreq(cfg.fft_len, d=1.0 / cfg.fs_hz)
    low, high = cfg.band_hz
    in_band = np.flatnonzero((freqs >= low) & (freqs <= high))
    if in_band.size == 0:
        raise ConfigurationError("no FFT bin falls inside the search band; increase fft_len")
    # np.argmax returns the first maximum, i.e. the lowest frequency on ties
    peak = in_band[np.argmax(spectrum[in_band])]
    return 60.0 * freqs[peak]


class SpectralHREstimator(RegressorMixin, BaseEstimator):
    """Training-free regressor mapping rows of PPG windows to spectral-peak bpm."""

    def __init__(self, fs_hz=64.0, fft_len=8192, band_hz=(0.5, 4.0)):
        self.fs_hz = fs_hz
        self.fft_len = fft_len
        self.band_hz = band_hz

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.config_ = SpectralConfig(self.fs_hz, self.fft_len, tuple(self.band_hz))
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        X = check_array(X, dtype=np.float64)
        cfg = getattr(self, "config_", None) or SpectralConfig(
            self.fs_hz, self.fft_len, tuple(self.band_hz))
        return np.array([estimate_hr_fft(row, cfg) for row in X])
