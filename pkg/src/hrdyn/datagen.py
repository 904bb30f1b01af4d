"""Synthetic HR trajectories and PPG recordings, plus session directory I/O.

A session directory holds::

    meta.json    {"subject": str, "fs_hz": number, ...optional keys}
    ppg.csv      header ``t_s,ppg``; t_s strictly increasing
    labels.csv   header ``segment_index,hr_bpm``; indices 0..n-1 without gaps

Optional ``meta.json`` keys: ``window_s``, ``hop_s`` (segmentation the labels
refer to, default 8 / 2 s) and ``artifact_segments``.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np
from scipy import signal as sps

from ._rng import derive_rng
from .exceptions import ConfigurationError, ParseError
from .infodyn import HrSeries
from .signal import DEFAULT_HOP_S, DEFAULT_WINDOW_S, PpgSession, _window_samples, segment_count

HR_MIN_BPM = 40.0
HR_MAX_BPM = 200.0
HARMONIC_AMPLITUDE = 0.3
WANDER_HZ = 0.2
WANDER_AMPLITUDE = 0.5
ARTIFACT_GAIN = 3.0
ARTIFACT_BAND_HZ = (0.5, 4.0)
ARTIFACT_DURATION_S = (2.0, 6.0)

# component scales relative to hr_std_bpm, tuned so long recordings have
# a sample standard deviation close to hr_std_bpm
_ACTIVITY_SCALE = 0.95
_OU_SCALE = 0.40
_OSC_SCALE = 0.33
_OU_TAU_S = 30.0
_ACTIVITY_DWELL_S = 60.0
_OSC_PERIOD_S = 300.0


@dataclass(frozen=True)
class SynthConfig:
    duration_s: float = 600.0
    fs_hz: float = 64.0
    hr_mean_bpm: float = 85.0
    hr_std_bpm: float = 17.0
    artifact_rate: float = 0.0
    snr_db: float | None = 30.0
    seed: int = 0
    window_s: float = DEFAULT_WINDOW_S
    hop_s: float = DEFAULT_HOP_S
    # time constant of activity level changes; 0 gives abrupt steps
    transition_s: float = 20.0

    def __post_init__(self):
        if not self.duration_s > 0:
            raise ConfigurationError("duration_s must be positive")
        if not self.fs_hz > 8:
            raise ConfigurationError("fs_hz must exceed 8 Hz")
        if self.hr_std_bpm < 0 or self.artifact_rate < 0 or self.transition_s < 0:
            raise ConfigurationError("hr_std_bpm, artifact_rate and transition_s must be >= 0")
        _window_samples(self.fs_hz, self.window_s, self.hop_s)

    @property
    def n_segments(self):
        n = int(round(self.duration_s * self.fs_hz))
        return segment_count(n, self.fs_hz, self.window_s, self.hop_s)

    def replace(self, **changes):
        from dataclasses import replace

        return replace(self, **changes)


def gen_hr_trajectory(cfg):
    """One HR value per segment: activity steps + OU wander + slow oscillation."""
    n = cfg.n_segments
    dt = cfg.hop_s
    rng = derive_rng(cfg.seed, "datagen", "hr")
    s = cfg.hr_std_bpm

    level = np.empty(n)
    target = rng.normal(0.0, _ACTIVITY_SCALE * s)
    current = target
    alpha = 1.0 if cfg.transition_s == 0 else 1.0 - math.exp(-dt / cfg.transition_s)
    switch_p = 1.0 - math.exp(-dt / _ACTIVITY_DWELL_S)
    for i in range(n):
        if rng.random() < switch_p:
            target = rng.normal(0.0, _ACTIVITY_SCALE * s)
        current += alpha * (target - current)
        level[i] = current

    ou = np.empty(n)
    a = math.exp(-dt / _OU_TAU_S)
    ou_std = _OU_SCALE * s
    x = rng.normal(0.0, ou_std)
    innovations = rng.normal(0.0, ou_std * math.sqrt(1.0 - a * a), size=n)
    for i in range(n):
        x = a * x + innovations[i]
        ou[i] = x

    t = np.arange(n) * dt
    osc = _OSC_SCALE * s * math.sqrt(2.0) * np.sin(2 * np.pi * t / _OSC_PERIOD_S
                                                   + rng.uniform(0, 2 * np.pi))
    hr = np.clip(cfg.hr_mean_bpm + level + ou + osc, HR_MIN_BPM, HR_MAX_BPM)
    return HrSeries(hr, "ground_truth")


def _pulse_power():
    return 0.5 * (1.0 + HARMONIC_AMPLITUDE ** 2)


def synth_ppg(hr, cfg, subject_id="S00"):
    """Frequency-modulated pulse wave following ``hr`` (one bpm per segment).

    Components: fundamental at hr/60 Hz, second harmonic (0.3), 0.2 Hz
    baseline wander, white noise at ``snr_db`` relative to the pulse (none if
    ``snr_db`` is None) and band-limited motion bursts at ``artifact_rate``
    per minute with 3x the pulse's RMS.
    """
    values = hr.values if isinstance(hr, HrSeries) else np.asarray(hr, dtype=np.float64)
    if values.size == 0:
        raise ConfigurationError("hr trajectory is empty")
    n_win, n_hop = _window_samples(cfg.fs_hz, cfg.window_s, cfg.hop_s)
    n = n_win + (len(values) - 1) * n_hop
    fs = cfg.fs_hz
    rng = derive_rng(cfg.seed, "datagen", "ppg")
    t = np.arange(n) / fs
    centers = np.arange(len(values)) * cfg.hop_s + cfg.window_s / 2.0
    f_inst = np.interp(t, centers, values) / 60.0
    phase = rng.uniform(0, 2 * np.pi) + 2 * np.pi * np.cumsum(f_inst) / fs
    harmonic_offset = rng.uniform(0, 2 * np.pi)
    clean = np.sin(phase) + HARMONIC_AMPLITUDE * np.sin(2 * phase + harmonic_offset)
    wander = WANDER_AMPLITUDE * np.sin(2 * np.pi * WANDER_HZ * t + rng.uniform(0, 2 * np.pi))
    x = clean + wander

    noise_rng = derive_rng(cfg.seed, "datagen", "noise")
    if cfg.snr_db is not None:
        noise_std = math.sqrt(_pulse_power() / 10.0 ** (cfg.snr_db / 10.0))
        x = x + noise_std * noise_rng.standard_normal(n)

    bursts = _artifact_bursts(cfg, n, derive_rng(cfg.seed, "datagen", "artifacts"))
    for start, stop, burst in bursts:
        x[start:stop] += burst
    artifact_segments = sorted({
        i for start, stop, _ in bursts for i in range(len(values))
        if i * n_hop < stop and start < i * n_hop + n_win
    })
    return PpgSession(
        subject_id=subject_id, fs_hz=fs, samples=x, labels=values.copy(),
        window_s=cfg.window_s, hop_s=cfg.hop_s,
        metadata={
            "artifact_segments": artifact_segments,
            "artifact_bursts_s": [[start / fs, stop / fs] for start, stop, _ in bursts],
            "synth": _config_dict(cfg),
        },
    )


def _artifact_bursts(cfg, n, rng):
    if cfg.artifact_rate <= 0:
        return []
    fs = cfg.fs_hz
    count = rng.poisson(cfg.artifact_rate * (n / fs) / 60.0)
    sos = sps.butter(4, ARTIFACT_BAND_HZ, btype="bandpass", fs=fs, output="sos")
    rms = math.sqrt(_pulse_power())
    bursts = []
    for _ in range(count):
        length = int(round(rng.uniform(*ARTIFACT_DURATION_S) * fs))
        length = min(length, n)
        start = int(rng.integers(0, n - length + 1))
        pad = int(2 * fs)
        raw = sps.sosfiltfilt(sos, rng.standard_normal(length + 2 * pad))[pad:pad + length]
        raw *= ARTIFACT_GAIN * rms / raw.std() * sps.windows.tukey(length, 0.2)
        bursts.append((start, start + length, raw))
    bursts.sort(key=lambda b: b[0])
    return bursts


def _config_dict(cfg):
    return asdict(cfg)


def synth_session(cfg, subject_id="S00"):
    return synth_ppg(gen_hr_trajectory(cfg), cfg, subject_id)


def synth_dataset(n_subjects, cfg):
    """``n_subjects`` sessions with seeds derived from ``cfg.seed``."""
    from ._rng import derive_seed

    sessions = []
    for i in range(n_subjects):
        sub_cfg = cfg.replace(seed=derive_seed(cfg.seed, "datagen", "subject", i) % 2**63)
        sessions.append(synth_session(sub_cfg, subject_id=f"S{i + 1:02d}"))
    return sessions


# --------------------------------------------------------------------------
# session directories


def _fmt(x):
    return format(float(x), ".17g")


def save_session(session, directory):
    os.makedirs(directory, exist_ok=True)
    meta = {"subject": session.subject_id, "fs_hz": session.fs_hz,
            "window_s": session.window_s, "hop_s": session.hop_s}
    if session.metadata.get("artifact_segments") is not None:
        meta["artifact_segments"] = list(session.metadata["artifact_segments"])
    with open(os.path.join(directory, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(directory, "ppg.csv"), "w", newline="") as fh:
        fh.write("t_s,ppg\n")
        fs = session.fs_hz
        for i, v in enumerate(session.samples):
            fh.write(f"{_fmt(i / fs)},{_fmt(v)}\n")
    if session.labels is not None:
        with open(os.path.join(directory, "labels.csv"), "w", newline="") as fh:
            fh.write("segment_index,hr_bpm\n")
            for i, v in enumerate(session.labels):
                fh.write(f"{i},{_fmt(v)}\n")


def _read_rows(path, header):
    if not os.path.exists(path):
        raise ParseError("file not found", path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None or [c.strip() for c in first] != header:
            raise ParseError(f"expected header {','.join(header)!r}, got {first!r}", path, 1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", path, lineno)
            try:
                yield lineno, [float(c) for c in row]
            except ValueError:
                raise ParseError(f"non-numeric value in {row!r}", path, lineno) from None


def load_session(directory, require_labels=True):
    meta_path = os.path.join(directory, "meta.json")
    if not os.path.exists(meta_path):
        raise ParseError("file not found", meta_path)
    try:
        with open(meta_path) as fh:
            meta = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", meta_path, exc.lineno) from exc
    if "subject" not in meta or "fs_hz" not in meta:
        raise ParseError("meta.json needs 'subject' and 'fs_hz'", meta_path)
    fs = meta["fs_hz"]
    if not isinstance(fs, (int, float)) or not fs > 0:
        raise ConfigurationError(f"{meta_path}: fs_hz must be a positive number, got {fs!r}")

    ppg_path = os.path.join(directory, "ppg.csv")
    times, samples = [], []
    prev = -math.inf
    for lineno, (t_s, v) in _read_rows(ppg_path, ["t_s", "ppg"]):
        if not t_s > prev:
            raise ParseError(f"t_s not strictly increasing ({t_s} after {prev})", ppg_path, lineno)
        prev = t_s
        times.append(t_s)
        samples.append(v)
    if not samples:
        raise ParseError("no samples", ppg_path)

    labels = None
    labels_path = os.path.join(directory, "labels.csv")
    if require_labels or os.path.exists(labels_path):
        labels = []
        for lineno, (idx, hr) in _read_rows(labels_path, ["segment_index", "hr_bpm"]):
            if idx != len(labels):
                raise ParseError(f"segment_index {int(idx)} out of sequence; expected {len(labels)}",
                                 labels_path, lineno)
            labels.append(hr)
        labels = np.asarray(labels)

    metadata = {}
    if "artifact_segments" in meta:
        metadata["artifact_segments"] = list(meta["artifact_segments"])
    metadata["source_dir"] = os.path.abspath(directory)
    return PpgSession(
        subject_id=str(meta["subject"]), fs_hz=float(fs), samples=np.asarray(samples),
        labels=labels, window_s=float(meta.get("window_s", DEFAULT_WINDOW_S)),
        hop_s=float(meta.get("hop_s", DEFAULT_HOP_S)), metadata=metadata,
    )


def load_dataset(directory, require_labels=True):
    """All session subdirectories of ``directory`` (those holding meta.json), sorted."""
    if not os.path.isdir(directory):
        raise ParseError("dataset directory not found", directory)
    names = sorted(d for d in os.listdir(directory)
                   if os.path.exists(os.path.join(directory, d, "meta.json")))
    if not names:
        raise ParseError("no session directories (with meta.json) found", directory)
    return [load_session(os.path.join(directory, d), require_labels) for d in names]


def save_dataset(sessions, directory):
    for s in sessions:
        save_session(s, os.path.join(directory, s.subject_id))
