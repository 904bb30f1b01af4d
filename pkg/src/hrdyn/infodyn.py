"""Information dynamics of heart-rate series.

Plug-in (histogram) entropy, mutual information and conditional mutual
information, a Kraskov-Stoegbauer-Grassberger k-NN MI estimator for
multi-dimensional histories, and the (history length x noise) sweeps that
produce MI and summed-|PCC| heatmaps.  All quantities are in nats.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import digamma

from ._rng import derive_rng, derive_seed
from ._validation import as_1d_float, as_2d_float
from .exceptions import (
    ConfigurationError,
    EstimatorChoiceError,
    InputError,
    UndefinedCorrelationError,
)

DEFAULT_BINS = 16
DEFAULT_K = 3
MAX_HIST_DIM = 3
# KSG estimates can dip slightly below zero; grids tolerate this much
ESTIMATOR_BIAS_TOLERANCE = 0.05
_JITTER_SCALE = 1e-10
_MIN_OCCUPANCY = 5.0


@dataclass
class HrSeries:
    values: np.ndarray
    source: str = "ground_truth"

    def __post_init__(self):
        if self.source not in ("ground_truth", "predicted"):
            raise ConfigurationError(f"unknown HrSeries source {self.source!r}")
        self.values = as_1d_float(self.values, "HrSeries.values")

    def __len__(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.sigma) and self.sigma >= 0):
            raise ConfigurationError(f"sigma must be finite and >= 0, got {self.sigma}")

    def sample(self, shape):
        return self.sigma * np.random.default_rng(self.seed).standard_normal(shape)


@dataclass
class MiGrid:
    """A heatmap of MI (nats) or summed |PCC| over history length x noise level."""

    n_values: list
    sigma_values: list
    cells: np.ndarray
    metric: str = "mi"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.float64)
        if self.metric not in ("mi", "pcc_sum"):
            raise ConfigurationError(f"unknown metric {self.metric!r}")
        if self.cells.shape != (len(self.n_values), len(self.sigma_values)):
            raise InputError(
                f"cells shape {self.cells.shape} does not match "
                f"{len(self.n_values)} x {len(self.sigma_values)}"
            )

    def display_cells(self):
        """Cells with estimator noise below zero clamped, for plotting."""
        if self.metric == "mi":
            return np.maximum(self.cells, 0.0)
        return self.cells.copy()

    def rows(self, bits=False):
        scale = 1.0 / math.log(2) if (bits and self.metric == "mi") else 1.0
        for i, n in enumerate(self.n_values):
            for j, s in enumerate(self.sigma_values):
                yield n, s, float(self.cells[i, j]) * scale, self.metric

    def to_csv(self, path, bits=False):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["n", "sigma", "value", "metric"])
            for n, s, v, m in self.rows(bits=bits):
                writer.writerow([n, repr(float(s)), repr(v), m])


@dataclass(frozen=True)
class TransferEntropyConfig:
    """``lag`` is the conditioning depth L; ``src_lag`` delays the source.

    With ``src_lag=1`` the estimate is I(X_t; Y_{t-1} | X_{t-1..t-L});
    ``src_lag=0`` uses the same-time source Y_t.
    """

    lag: int = 1
    bins: int = 2
    src_lag: int = 1

    def __post_init__(self):
        if int(self.lag) != self.lag or self.lag < 1:
            raise ConfigurationError(f"lag must be an integer >= 1, got {self.lag}")
        if int(self.bins) != self.bins or self.bins < 2:
            raise ConfigurationError(f"bins must be an integer >= 2, got {self.bins}")
        if int(self.src_lag) != self.src_lag or self.src_lag < 0:
            raise ConfigurationError(f"src_lag must be an integer >= 0, got {self.src_lag}")


@dataclass(frozen=True)
class TransferEntropyResult:
    value: float
    n_samples: int
    mean_occupancy: float
    low_occupancy: bool

    def __float__(self):
        return self.value


# --------------------------------------------------------------------------
# plug-in estimators


def discretize(x, bins):
    """Equal-width bin index in ``[0, bins)`` over the observed ``[min, max]``."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros(x.shape, dtype=np.int64)
    idx = np.floor((x - lo) / (hi - lo) * bins).astype(np.int64)
    return np.minimum(idx, bins - 1)


def _joint_codes(columns, bins):
    """Collapse several discretized columns into one integer code per row."""
    codes = np.zeros(columns.shape[0], dtype=np.int64)
    for j in range(columns.shape[1]):
        codes = codes * bins + discretize(columns[:, j], bins)
    return codes


def _counts(codes):
    _, counts = np.unique(codes, return_counts=True)
    return counts


def _compact(codes):
    """Map arbitrary integer codes to ``0 .. n_unique-1``."""
    _, inverse = np.unique(codes, return_inverse=True)
    return inverse.reshape(-1)


def _row_counts(codes):
    """Occurrence count of each row's code."""
    _, inverse, counts = np.unique(codes, return_inverse=True, return_counts=True)
    return counts[inverse.reshape(-1)]


def _cell_representatives(codes):
    """One row index for every distinct code."""
    _, index = np.unique(codes, return_index=True)
    return index


def entropy_hist(x, bins=DEFAULT_BINS):
    """Plug-in Shannon entropy of an equal-width histogram."""
    if bins < 2:
        raise ConfigurationError("bins must be >= 2")
    x = as_1d_float(x, "x", min_length=bins)
    counts = _counts(discretize(x, bins))
    p = counts / counts.sum()
    return max(0.0, -math.fsum(p * np.log(p)))


def _mi_from_codes(a, b):
    n = a.shape[0]
    a, b = _compact(a), _compact(b)
    joint = a * (b.max() + 1) + b
    rows = _cell_representatives(joint)
    c = _row_counts(joint)[rows].astype(np.float64)
    ca = _row_counts(a)[rows].astype(np.float64)
    cb = _row_counts(b)[rows].astype(np.float64)
    terms = (c / n) * np.log(c * n / (ca * cb))
    # fsum is exactly rounded, so the result does not depend on term order
    return max(0.0, math.fsum(terms))


def mi_hist(x, y, bins=DEFAULT_BINS):
    """Plug-in MI between ``x`` (n,) or (n, d<=3) and ``y`` (n,).

    Each dimension gets its own equal-width ``bins``-bin histogram.
    """
    if bins < 2:
        raise ConfigurationError("bins must be >= 2")
    x2 = as_2d_float(x, "x", min_length=2)
    y1 = as_1d_float(y, "y", min_length=2)
    if x2.shape[0] != y1.shape[0]:
        raise InputError(f"x and y lengths differ: {x2.shape[0]} vs {y1.shape[0]}")
    if x2.shape[1] > MAX_HIST_DIM:
        raise EstimatorChoiceError(
            f"histogram MI supports at most {MAX_HIST_DIM} dimensions (got {x2.shape[1]}); "
            "use mi_ksg for longer histories"
        )
    return _mi_from_codes(_joint_codes(x2, bins), discretize(y1, bins))


def cmi_hist(x, y, z, bins=DEFAULT_BINS):
    """Plug-in conditional MI I(X; Y | Z) with equal-width binning.

    ``x``, ``y``, ``z`` may be 1-D or 2-D; every column is binned separately.
    """
    xc = _joint_codes(as_2d_float(x, "x"), bins)
    yc = _joint_codes(as_2d_float(y, "y"), bins)
    zc = _joint_codes(as_2d_float(z, "z"), bins)
    if not (len(xc) == len(yc) == len(zc)):
        raise InputError("x, y and z must have equal lengths")
    return _cmi_from_codes(xc, yc, zc)


def _cmi_from_codes(xc, yc, zc):
    n = xc.shape[0]
    x, y, z = _compact(xc), _compact(yc), _compact(zc)
    nx, ny = x.max() + 1, y.max() + 1
    xz = z * nx + x
    yz = z * ny + y
    xyz = xz * ny + y
    rows = _cell_representatives(xyz)
    c = _row_counts(xyz)[rows].astype(np.float64)
    cxz = _row_counts(xz)[rows].astype(np.float64)
    cyz = _row_counts(yz)[rows].astype(np.float64)
    cz = _row_counts(z)[rows].astype(np.float64)
    terms = (c / n) * np.log(c * cz / (cxz * cyz))
    return max(0.0, math.fsum(terms))


# --------------------------------------------------------------------------
# k-nearest-neighbour estimator


def _standardize_with_jitter(a, rng):
    a = a.copy()
    for j in range(a.shape[1]):
        col = a[:, j]
        span = col.max() - col.min()
        # deterministic jitter breaks ties between duplicated HR values
        col += _JITTER_SCALE * (span if span > 0 else 1.0) * rng.standard_normal(col.shape[0])
        std = col.std()
        if std > 0:
            col -= col.mean()
            col /= std
    return a


def mi_ksg(x, y, k=DEFAULT_K, seed=0):
    """KSG estimator (algorithm 1) of I(X; Y) with max-norm neighbourhoods.

    Every column is standardized and receives a tiny seeded jitter
    (1e-10 x its range) so repeated values never produce zero distances.
    The result may be slightly negative.
    """
    x2 = as_2d_float(x, "x", min_length=2)
    y2 = as_2d_float(y, "y", min_length=2)
    n = x2.shape[0]
    if y2.shape[0] != n:
        raise InputError(f"x and y lengths differ: {n} vs {y2.shape[0]}")
    if int(k) != k or k < 1:
        raise ConfigurationError(f"k must be a positive integer, got {k}")
    if n <= k + 1:
        raise InputError(f"need more than k + 1 = {k + 1} samples, got {n}")
    rng = np.random.default_rng(derive_seed(seed, "infodyn", "ksg-jitter"))
    x2 = _standardize_with_jitter(x2, rng)
    y2 = _standardize_with_jitter(y2, rng)
    joint = np.hstack([x2, y2])

    dist, _ = cKDTree(joint).query(joint, k=k + 1, p=np.inf)
    # strict inequality: shrink the radius by one ulp
    radius = np.nextafter(dist[:, -1], 0)
    nx = cKDTree(x2).query_ball_point(x2, radius, p=np.inf, return_length=True) - 1
    ny = cKDTree(y2).query_ball_point(y2, radius, p=np.inf, return_length=True) - 1
    return float(digamma(k) + digamma(n) - np.mean(digamma(nx + 1) + digamma(ny + 1)))


# --------------------------------------------------------------------------
# sweeps


def lag_matrix(values, n_lags, include_current=False):
    """Rows ``[y_{t-1}, ..., y_{t-N}]`` (optionally led by ``y_t``) and targets ``y_t``.

    Only ``t >= n_lags`` is used, so every row is complete.
    """
    y = np.asarray(values, dtype=np.float64)
    t = np.arange(n_lags, y.shape[0])
    first_lag = 0 if include_current else 1
    lags = np.column_stack([y[t - i] for i in range(first_lag, n_lags + 1)])
    return lags, y[t]


def _series_values(y):
    return y.values if isinstance(y, HrSeries) else as_1d_float(y, "y")


def _check_sweep(values, n_values, sigma_values):
    if not n_values or not sigma_values:
        raise ConfigurationError("n_values and sigma_values must be non-empty")
    if min(n_values) < 1:
        raise ConfigurationError("history lengths must be >= 1")
    if any((not math.isfinite(s)) or s < 0 for s in sigma_values):
        raise ConfigurationError("noise levels must be finite and >= 0")
    if len(values) < max(n_values) + 2:
        raise InputError(
            f"series of length {len(values)} is too short for history length {max(n_values)}"
        )


def _cell_noise(seed, metric, i, j, shape):
    return derive_rng(seed, "infodyn", metric, i, j).standard_normal(shape)


def mi_noise_sweep(y, n_values, sigma_values, estimator="ksg", seed=0, k=DEFAULT_K,
                   bins=DEFAULT_BINS, include_current=False):
    """MI between noisy histories ``xi + sigma * eps`` and the current value.

    Cell (N, sigma) uses ``t = N .. T-1``; noise is drawn per (t, lag) from a
    stream derived from ``seed`` and the cell position.
    """
    values = _series_values(y)
    _check_sweep(values, n_values, sigma_values)
    if estimator not in ("ksg", "hist"):
        raise ConfigurationError(f"estimator must be 'ksg' or 'hist', got {estimator!r}")
    cells = np.empty((len(n_values), len(sigma_values)))
    for i, n in enumerate(n_values):
        lags, target = lag_matrix(values, n, include_current)
        for j, sigma in enumerate(sigma_values):
            noisy = lags + sigma * _cell_noise(seed, "mi", i, j, lags.shape)
            if estimator == "ksg":
                cells[i, j] = mi_ksg(noisy, target, k=k, seed=seed)
            else:
                cells[i, j] = mi_hist(noisy, target, bins=bins)
    return MiGrid(list(n_values), list(sigma_values), cells, "mi",
                  {"estimator": estimator, "seed": seed, "include_current": include_current})


def pearson(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    da, db = a - a.mean(), b - b.mean()
    sa, sb = math.sqrt(np.dot(da, da)), math.sqrt(np.dot(db, db))
    if sa == 0 or sb == 0:
        raise UndefinedCorrelationError("Pearson correlation is undefined for a constant series")
    return float(np.dot(da, db) / (sa * sb))


def pcc_sweep(y, n_values, sigma_values, seed=0, include_current=False):
    """Sum over lags of |Pearson(y_t, y_{t-i} + sigma * eps_i)|."""
    values = _series_values(y)
    _check_sweep(values, n_values, sigma_values)
    if values.std() == 0:
        raise UndefinedCorrelationError("series has zero variance")
    cells = np.empty((len(n_values), len(sigma_values)))
    for i, n in enumerate(n_values):
        lags, target = lag_matrix(values, n, include_current)
        for j, sigma in enumerate(sigma_values):
            noisy = lags + sigma * _cell_noise(seed, "pcc", i, j, lags.shape)
            cells[i, j] = sum(abs(pearson(target, noisy[:, c])) for c in range(noisy.shape[1]))
    return MiGrid(list(n_values), list(sigma_values), cells, "pcc_sum",
                  {"seed": seed, "include_current": include_current})


# --------------------------------------------------------------------------
# transfer entropy


def transfer_entropy(src, dst, cfg=None):
    """Binned transfer entropy from ``src`` (Y) to ``dst`` (X).

    Estimates I(X_t; Y_{t-src_lag} | X_{t-1}, ..., X_{t-L}).  When the joint
    space is too fine for the data (mean occupancy below 5) the result is
    flagged rather than rejected.
    """
    cfg = TransferEntropyConfig() if cfg is None else cfg
    ys = as_1d_float(src, "src")
    xs = as_1d_float(dst, "dst")
    if ys.shape != xs.shape:
        raise InputError(f"src and dst lengths differ: {ys.shape[0]} vs {xs.shape[0]}")
    start = max(cfg.lag, cfg.src_lag)
    if xs.shape[0] <= start + 1:
        raise InputError(f"series of length {xs.shape[0]} too short for lag {start}")
    xb = discretize(xs, cfg.bins)
    yb = discretize(ys, cfg.bins)
    t = np.arange(start, xs.shape[0])
    past = np.zeros(t.shape[0], dtype=np.int64)
    for i in range(1, cfg.lag + 1):
        past = past * cfg.bins + xb[t - i]
    value = _cmi_from_codes(xb[t], yb[t - cfg.src_lag], past)
    n = t.shape[0]
    occupancy = n / float(cfg.bins) ** (cfg.lag + 2)
    return TransferEntropyResult(value, n, occupancy, occupancy < _MIN_OCCUPANCY)
