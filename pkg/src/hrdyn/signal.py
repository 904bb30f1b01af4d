"""PPG conditioning: band-pass filtering, z-scoring and windowing.

Sessions are filtered once as a whole and then cut into fixed-length
windows, each of which is z-scored with the population standard deviation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sps
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import as_1d_float, check_integral, check_positive
from .exceptions import ConfigurationError, DegenerateSegmentError, InputError

logger = logging.getLogger(__name__)

DEFAULT_WINDOW_S = 8.0
DEFAULT_HOP_S = 2.0
DEFAULT_BAND_HZ = (0.5, 4.0)
FILTER_ORDER = 4
_DEGENERATE_STD = 1e-12


@dataclass
class PpgSession:
    """One recording: raw PPG samples plus one HR label per segment.

    ``labels`` may be ``None`` for unlabeled recordings.  ``metadata`` carries
    free-form bookkeeping such as injected artifact segments.
    """

    subject_id: str
    fs_hz: float
    samples: np.ndarray
    labels: np.ndarray | None = None
    window_s: float = DEFAULT_WINDOW_S
    hop_s: float = DEFAULT_HOP_S
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        check_positive(self.fs_hz, "fs_hz")
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.float64)
            expected = self.n_segments
            if self.labels.shape != (expected,):
                raise InputError(
                    f"session {self.subject_id!r}: {len(self.labels)} labels for "
                    f"{expected} segments (window {self.window_s} s, hop {self.hop_s} s)"
                )

    @property
    def duration_s(self):
        return len(self.samples) / self.fs_hz

    @property
    def n_segments(self):
        return segment_count(len(self.samples), self.fs_hz, self.window_s, self.hop_s)


@dataclass(frozen=True)
class Segment:
    values: np.ndarray
    index: int
    t_start_s: float


def _window_samples(fs_hz, window_s, hop_s):
    check_positive(window_s, "window_s")
    check_positive(hop_s, "hop_s")
    n_win = check_integral(fs_hz * window_s, "fs_hz * window_s")
    n_hop = check_integral(fs_hz * hop_s, "fs_hz * hop_s")
    if n_win < 1 or n_hop < 1:
        raise ConfigurationError("window and hop must each span at least one sample")
    return n_win, n_hop


def segment_count(n_samples, fs_hz, window_s=DEFAULT_WINDOW_S, hop_s=DEFAULT_HOP_S):
    """Number of windows: ``floor((T - window) / hop) + 1`` or 0 if too short."""
    n_win, n_hop = _window_samples(fs_hz, window_s, hop_s)
    if n_samples < n_win:
        return 0
    return (n_samples - n_win) // n_hop + 1


def _check_band(fs_hz, low_hz, high_hz):
    check_positive(fs_hz, "fs_hz")
    nyquist = fs_hz / 2.0
    if not (0 < low_hz < high_hz < nyquist):
        raise ConfigurationError(
            f"band must satisfy 0 < low < high < Nyquist ({nyquist} Hz), "
            f"got [{low_hz}, {high_hz}]"
        )


def butter_bandpass_sos(fs_hz, low_hz=DEFAULT_BAND_HZ[0], high_hz=DEFAULT_BAND_HZ[1],
                        order=FILTER_ORDER):
    _check_band(fs_hz, low_hz, high_hz)
    return sps.butter(order, [low_hz, high_hz], btype="bandpass", fs=fs_hz, output="sos")


def bandpass(samples, fs_hz, low_hz=DEFAULT_BAND_HZ[0], high_hz=DEFAULT_BAND_HZ[1],
             order=FILTER_ORDER):
    """Zero-phase Butterworth band-pass (applied forward and backward).

    The effective magnitude response is the square of the designed filter's.
    Inputs shorter than ``3 * order`` samples are rejected.
    """
    sos = butter_bandpass_sos(fs_hz, low_hz, high_hz, order)
    x = as_1d_float(samples, "samples")
    if x.shape[0] < 3 * order:
        raise InputError(f"need at least {3 * order} samples to filter, got {x.shape[0]}")
    default_pad = 3 * (2 * len(sos) + 1 - min((sos[:, 2] == 0).sum(), (sos[:, 5] == 0).sum()))
    return sps.sosfiltfilt(sos, x, padlen=min(default_pad, x.shape[0] - 1))


def zscore(segment):
    """Normalize to zero mean and unit population standard deviation."""
    x = np.asarray(segment, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] < 2:
        raise InputError("zscore needs a 1-D vector with at least two values")
    mean = x.mean()
    std = x.std()
    if not std > _DEGENERATE_STD:
        raise DegenerateSegmentError(f"segment has zero variance (std={std:.3g})")
    return (x - mean) / std


def segment(session, window_s=None, hop_s=None, low_hz=DEFAULT_BAND_HZ[0],
            high_hz=DEFAULT_BAND_HZ[1], return_dropped=False):
    """Filter a session and cut it into z-scored windows.

    Only ``session.samples`` and ``session.fs_hz`` are read, so label-blind
    callers can pass any object exposing those two attributes.  Flat windows
    are dropped with a warning; their indices are returned as well when
    ``return_dropped`` is true.
    """
    fs_hz = session.fs_hz
    window_s = DEFAULT_WINDOW_S if window_s is None else window_s
    hop_s = DEFAULT_HOP_S if hop_s is None else hop_s
    n_win, n_hop = _window_samples(fs_hz, window_s, hop_s)
    samples = np.asarray(session.samples, dtype=np.float64)
    count = segment_count(len(samples), fs_hz, window_s, hop_s)
    segments, dropped = [], []
    if count:
        filtered = bandpass(samples, fs_hz, low_hz, high_hz)
        for i in range(count):
            start = i * n_hop
            raw = samples[start:start + n_win]
            try:
                # a constant raw window (sensor dropout) only carries filter ringing
                if np.ptp(raw) <= _DEGENERATE_STD:
                    raise DegenerateSegmentError("constant raw window")
                values = zscore(filtered[start:start + n_win])
            except DegenerateSegmentError:
                dropped.append(i)
                continue
            segments.append(Segment(values=values, index=i, t_start_s=start / fs_hz))
    if dropped:
        logger.warning("dropped %d flat segment(s): %s", len(dropped), dropped[:10])
    if return_dropped:
        return segments, dropped
    return segments


def resample_linear(samples, fs_in_hz, fs_out_hz):
    """Linear-interpolation resampler for converting recordings between rates."""
    check_positive(fs_in_hz, "fs_in_hz")
    check_positive(fs_out_hz, "fs_out_hz")
    x = as_1d_float(samples, "samples")
    duration = (len(x) - 1) / fs_in_hz
    n_out = int(math.floor(duration * fs_out_hz + 1e-9)) + 1
    t_out = np.arange(n_out) / fs_out_hz
    return np.interp(t_out, np.arange(len(x)) / fs_in_hz, x)


class PpgPreprocessor(TransformerMixin, BaseEstimator):
    """Band-pass and z-score each row of a (n_windows, n_samples) matrix.

    Stateless; ``fit`` only records the input width.  Unlike :func:`segment`
    each row is filtered on its own, which suits windows already cut upstream.
    """

    def __init__(self, fs_hz=64.0, low_hz=0.5, high_hz=4.0, order=FILTER_ORDER):
        self.fs_hz = fs_hz
        self.low_hz = low_hz
        self.high_hz = high_hz
        self.order = order

    def fit(self, X, y=None):
        from sklearn.utils.validation import check_array

        X = check_array(X, dtype=np.float64)
        _check_band(self.fs_hz, self.low_hz, self.high_hz)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        from sklearn.utils.validation import check_array, check_is_fitted

        check_is_fitted(self, "n_features_in_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise InputError(f"expected {self.n_features_in_} samples per row, got {X.shape[1]}")
        return np.vstack([
            zscore(bandpass(row, self.fs_hz, self.low_hz, self.high_hz, self.order))
            for row in X
        ])
