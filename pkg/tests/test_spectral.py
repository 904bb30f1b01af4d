import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hrdyn.exceptions import ConfigurationError, DegenerateSegmentError
from hrdyn.signal import Segment
from hrdyn.spectral import SpectralConfig, SpectralHREstimator, estimate_hr_fft

FS = 64.0
T = np.arange(int(8 * FS)) / FS
CFG = SpectralConfig(fs_hz=FS, fft_len=8192, band_hz=(0.5, 4.0))


def test_pure_tone():
    assert estimate_hr_fft(np.sin(2 * np.pi * 1.25 * T), CFG) == pytest.approx(75.0, abs=0.5)


def test_stronger_component_wins():
    x = 2 * np.sin(2 * np.pi * 1.0 * T) + np.sin(2 * np.pi * 2.0 * T)
    assert estimate_hr_fft(x, CFG) == pytest.approx(60.0, abs=0.5)


def test_white_noise_in_band(rng):
    assert 30.0 <= estimate_hr_fft(rng.standard_normal(T.size), CFG) <= 240.0


def test_accepts_segment_objects():
    seg = Segment(values=np.sin(2 * np.pi * 1.5 * T), index=0, t_start_s=0.0)
    assert estimate_hr_fft(seg, CFG) == pytest.approx(90.0, abs=0.5)


def test_all_zero_segment():
    with pytest.raises(DegenerateSegmentError):
        estimate_hr_fft(np.zeros(T.size), CFG)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        SpectralConfig(fs_hz=6.0, band_hz=(0.5, 4.0))
    with pytest.raises(ConfigurationError):
        SpectralConfig(fs_hz=64.0, band_hz=(2.0, 1.0))


def test_tie_resolves_to_lower_frequency(monkeypatch):
    # force a perfectly flat magnitude spectrum
    monkeypatch.setattr(np.fft, "rfft", lambda x, n: np.ones(n // 2 + 1, dtype=complex))
    bpm = estimate_hr_fft(np.sin(2 * np.pi * 2.0 * T), CFG)
    first_bin = np.ceil(0.5 * CFG.fft_len / FS) * FS / CFG.fft_len
    assert bpm == pytest.approx(60 * first_bin)


@given(st.floats(0.01, 1e4))
def test_amplitude_invariance(c):
    x = np.sin(2 * np.pi * 1.7 * T) + 0.3 * np.sin(2 * np.pi * 3.1 * T + 0.4)
    assert estimate_hr_fft(c * x, CFG) == estimate_hr_fft(x, CFG)


@given(st.floats(0.6, 3.9), st.floats(0, 2 * np.pi))
def test_resolution_bound(f0, phase):
    # half a bin plus leakage from the window and the band edges
    bpm = estimate_hr_fft(np.sin(2 * np.pi * f0 * T + phase), CFG)
    assert abs(bpm - 60 * f0) <= CFG.resolution_bpm / 2 + 60 * 0.02


def test_estimator_api():
    X = np.stack([np.sin(2 * np.pi * f * T) for f in (1.0, 1.5, 2.0)])
    est = SpectralHREstimator(fs_hz=FS)
    np.testing.assert_allclose(est.fit(X).predict(X), [60, 90, 120], atol=0.5)
    assert est.get_params()["fft_len"] == 8192
