"""Evaluation metrics and figure-data export (CSV/JSON only, no plotting)."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import InputError
from .infodyn import HrSeries

BLAND_ALTMAN_Z = 1.96


def _values(x, name):
    v = x.values if isinstance(x, HrSeries) else np.asarray(x, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(v)):
        raise InputError(f"{name} contains non-finite values")
    return v


def _paired(preds, labels, min_length=1):
    p, l = _values(preds, "preds"), _values(labels, "labels")
    if p.shape != l.shape:
        raise InputError(f"preds and labels lengths differ: {p.shape[0]} vs {l.shape[0]}")
    if p.shape[0] < min_length:
        raise InputError(f"need at least {min_length} paired values")
    return p, l


def mae(preds, labels):
    p, l = _paired(preds, labels)
    return float(np.mean(np.abs(p - l)))


def aggregate(per_session_maes):
    """Mean and population standard deviation across sessions."""
    v = np.asarray(per_session_maes, dtype=np.float64)
    if v.size == 0:
        raise InputError("aggregate needs at least one session")
    return float(v.mean()), float(v.std())


def format_mean_std(mean, std):
    return f"{mean:.2f}±{std:.2f}"


@dataclass
class BlandAltman:
    rows: list
    bias: float
    lower: float
    upper: float

    @property
    def limits(self):
        return self.lower, self.upper


def bland_altman(preds, labels):
    """Rows of (mean, difference) with bias and bias +/- 1.96 SD (population) limits."""
    p, l = _paired(preds, labels)
    diff = p - l
    bias = float(diff.mean())
    spread = BLAND_ALTMAN_Z * float(diff.std())
    rows = [(float(m), float(d)) for m, d in zip((p + l) / 2.0, diff)]
    return BlandAltman(rows, bias, bias - spread, bias + spread)


def pearson_r(preds, labels):
    p, l = _paired(preds, labels, min_length=2)
    if p.std() == 0 or l.std() == 0:
        return float("nan")
    return float(np.corrcoef(p, l)[0, 1])


def phase_space(hr, delay_segments):
    """Pairs (hr_t, hr_{t+delay}) in time order."""
    if int(delay_segments) != delay_segments or delay_segments < 1:
        raise InputError(f"delay must be a positive integer, got {delay_segments}")
    v = _values(hr, "hr")
    d = int(delay_segments)
    return [(float(a), float(b)) for a, b in zip(v[:-d], v[d:])] if d < v.shape[0] else []


@dataclass
class SessionResult:
    session_id: str
    mae_bpm: float
    n_segments: int


@dataclass
class EvalReport:
    per_session: list
    mae_mean: float
    mae_std: float
    bland_altman_rows: list = field(default_factory=list)
    pearson_r: float = float("nan")
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_predictions(cls, sessions, metadata=None):
        """Build a report from ``[(session_id, preds, labels), ...]``."""
        per_session, all_p, all_l = [], [], []
        for sid, p, l in sessions:
            p, l = _paired(p, l)
            per_session.append(SessionResult(str(sid), mae(p, l), int(p.shape[0])))
            all_p.append(p)
            all_l.append(l)
        mean, std = aggregate([r.mae_bpm for r in per_session])
        p, l = np.concatenate(all_p), np.concatenate(all_l)
        r = pearson_r(p, l) if p.shape[0] >= 2 else float("nan")
        return cls(per_session, mean, std, bland_altman(p, l).rows, r, dict(metadata or {}))

    @property
    def summary(self):
        return format_mean_std(self.mae_mean, self.mae_std)

    def to_dict(self):
        d = asdict(self)
        d["per_session"] = [asdict(r) if not isinstance(r, dict) else r for r in self.per_session]
        d["bland_altman_rows"] = [list(r) for r in self.bland_altman_rows]
        d["pearson_r"] = None if math.isnan(self.pearson_r) else self.pearson_r
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(
            per_session=[SessionResult(**r) for r in d["per_session"]],
            mae_mean=d["mae_mean"], mae_std=d["mae_std"],
            bland_altman_rows=[tuple(r) for r in d.get("bland_altman_rows", [])],
            pearson_r=float("nan") if d.get("pearson_r") is None else d["pearson_r"],
            metadata=d.get("metadata", {}),
        )

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def write_rows_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v
                             for v in row])


def write_bland_altman_csv(path, rows):
    write_rows_csv(path, ["mean_bpm", "diff_bpm"], rows)


def write_phase_space_csv(path, rows):
    write_rows_csv(path, ["hr_t", "hr_t_plus_delay"], rows)
