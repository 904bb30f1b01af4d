"""Pair assembly, leave-one-session-out evaluation and autoregressive inference.

Training is teacher-forced: ``xi`` for segment ``t`` holds the ground-truth
labels of segments ``t-K .. t-1`` (oldest first).  At test time the model
never sees labels; it is seeded with spectral estimates for the first ``B``
segments and then consumes its own previous outputs.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from ._rng import derive_rng, derive_seed
from .exceptions import ConfigurationError, DegenerateSegmentError, InputError
from .infodyn import HrSeries
from .model import HR_CENTER_BPM, HRNet, ModelConfig
from .report import EvalReport
from .signal import Segment, segment
from .spectral import SpectralConfig, estimate_hr_fft
from .training import TrainConfig, augment_xi_array, fit_network, predict_bpm

logger = logging.getLogger(__name__)

MANIFEST_NAME = "run_manifest.json"
ABLATION_HEADER = ("variant", "k", "aug", "dataset", "mae_mean", "mae_std")


# --------------------------------------------------------------------------
# pairs


@dataclass(frozen=True)
class SegmentPair:
    x_t: Segment
    xi_t: np.ndarray
    y_t: float
    session_id: str
    segment_index: int

    @property
    def key(self):
        return self.session_id, self.segment_index


def session_segments(session):
    """Preprocessed segments of a session keyed by index (flat windows omitted)."""
    return {s.index: s for s in segment(session, session.window_s, session.hop_s)}


def make_pairs(session, K, xi_source="labels", predictions=None, segments=None):
    """One :class:`SegmentPair` per usable segment index ``>= K``.

    ``xi_source="labels"`` builds the history from ground truth (teacher
    forcing); ``"predictions"`` takes it from ``predictions``, a series with
    one value per segment.  Targets always come from the labels.
    """
    if K < 0 or int(K) != K:
        raise ConfigurationError(f"K must be a non-negative integer, got {K}")
    K = int(K)
    if session.labels is None:
        raise InputError(f"session {session.subject_id!r} has no labels")
    labels = session.labels
    if xi_source == "labels":
        history = labels
    elif xi_source == "predictions":
        if predictions is None:
            raise InputError("xi_source='predictions' needs a prediction series")
        history = np.asarray(getattr(predictions, "values", predictions), dtype=np.float64)
        if history.shape != labels.shape:
            raise InputError(f"{history.shape[0]} predictions for {labels.shape[0]} segments")
    else:
        raise ConfigurationError(f"unknown xi_source {xi_source!r}")
    if len(labels) < K + 1:
        logger.warning("session %s has %d segments, fewer than K+1=%d; no pairs",
                       session.subject_id, len(labels), K + 1)
        return []
    segments = session_segments(session) if segments is None else segments
    pairs = []
    for i in range(K, len(labels)):
        if i not in segments:
            continue
        xi = history[i - K:i].copy()
        if not np.all(np.isfinite(xi)):
            raise InputError(f"non-finite history for segment {i} of {session.subject_id}")
        pairs.append(SegmentPair(segments[i], xi, float(labels[i]), str(session.subject_id), i))
    return pairs


def augment_xi(pairs, fraction, sigma, seed):
    """Return a copy of ``pairs`` with ``round(fraction * len)`` histories perturbed."""
    if not 0.0 <= fraction <= 1.0:
        raise ConfigurationError(f"fraction must lie in [0, 1], got {fraction}")
    if not pairs:
        return []
    xi = np.stack([p.xi_t for p in pairs])
    aug, _ = augment_xi_array(xi, fraction, sigma, derive_rng(seed, "harness", "augment"))
    return [SegmentPair(p.x_t, a, p.y_t, p.session_id, p.segment_index)
            for p, a in zip(pairs, aug)]


def pairs_to_arrays(pairs, K):
    if not pairs:
        raise InputError("no segment pairs")
    x = np.stack([p.x_t.values for p in pairs])
    xi = np.stack([p.xi_t for p in pairs]) if K else np.empty((len(pairs), 0))
    y = np.array([p.y_t for p in pairs])
    return x, xi, y


# --------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class Fold:
    index: int
    test: object
    train: tuple

    @property
    def test_id(self):
        return str(self.test.subject_id)

    @property
    def train_ids(self):
        return tuple(str(s.subject_id) for s in self.train)


def loso_folds(sessions):
    sessions = list(sessions)
    if len(sessions) < 2:
        raise ConfigurationError(f"leave-one-session-out needs >= 2 sessions, got {len(sessions)}")
    ids = [str(s.subject_id) for s in sessions]
    if len(set(ids)) != len(ids):
        raise ConfigurationError("session ids must be unique")
    return [Fold(i, s, tuple(sessions[:i] + sessions[i + 1:])) for i, s in enumerate(sessions)]


@dataclass(frozen=True)
class InnerSplit:
    """Training/validation sessions for one inner fold.

    ``holdout_fraction`` is set only for the segment-level fallback, where
    ``train`` and ``val`` name the same sessions.
    """

    train: tuple
    val: tuple
    holdout_fraction: float | None = None


def inner_cv_split(train_sessions, seed, n_folds=3):
    """Session-level ``n_folds``-way partition, each part validating once."""
    sessions = list(train_sessions)
    if n_folds < 2:
        raise ConfigurationError(f"inner cross-validation needs >= 2 folds, got {n_folds}")
    if len(sessions) < n_folds:
        logger.warning("only %d training sessions; falling back to an 80/20 segment split",
                       len(sessions))
        return [InnerSplit(tuple(sessions), tuple(sessions), 0.2)]
    order = derive_rng(seed, "harness", "inner-cv").permutation(len(sessions))
    parts = np.array_split(order, n_folds)
    splits = []
    for part in parts:
        held = set(part.tolist())
        splits.append(InnerSplit(tuple(sessions[i] for i in range(len(sessions)) if i not in held),
                                 tuple(sessions[i] for i in part)))
    return splits


# --------------------------------------------------------------------------
# training


def _xi_source_series(session, train_config, segments, spectral_cfg):
    """Prediction series used when training histories come from estimates.

    Uses per-segment spectral estimates, which are label-free; flat windows
    carry the previous estimate forward.
    """
    if train_config.xi_train_source == "labels":
        return None
    out = np.empty(session.n_segments)
    prev = HR_CENTER_BPM
    for i in range(session.n_segments):
        if i in segments:
            prev = estimate_hr_fft(segments[i].values, spectral_cfg)
        out[i] = prev
    return out


def _session_pairs(sessions, K, train_config, cache, spectral_cfg):
    pairs = []
    for s in sessions:
        sid = str(s.subject_id)
        if sid not in cache:
            cache[sid] = session_segments(s)
        preds = _xi_source_series(s, train_config, cache[sid], spectral_cfg)
        pairs.extend(make_pairs(s, K, train_config.xi_train_source, preds, cache[sid]))
    return pairs


def _holdout(pairs, fraction, seed):
    order = derive_rng(seed, "harness", "holdout").permutation(len(pairs))
    n_val = max(1, int(round(fraction * len(pairs))))
    val = set(order[:n_val].tolist())
    return ([p for i, p in enumerate(pairs) if i not in val],
            [p for i, p in enumerate(pairs) if i in val])


def train(train_pairs, val_pairs, model_config, train_config, seed=None):
    """Fit a fresh network and return ``(net, history)`` at the best validation epoch.

    Augmentation is drawn per epoch inside the loop and only ever touches
    ``train_pairs``.
    """
    if not train_pairs or not val_pairs:
        raise InputError("train() needs non-empty training and validation pairs")
    seed = train_config.seed if seed is None else seed
    K = model_config.k_history if model_config.conditioning != "none" else 0
    x, xi, y = pairs_to_arrays(train_pairs, K)
    vx, vxi, vy = pairs_to_arrays(val_pairs, K)
    net = HRNet(model_config, seed=derive_seed(seed, "model", "init"))
    history = fit_network(net, x, xi, y, vx, vxi, vy, train_config.replace(seed=seed))
    return net, history


def fit_fold(train_sessions, model_config, train_config, seed, spectral_cfg=None, cache=None,
             exclude_ids=()):
    """Inner cross-validation; returns the network with the lowest validation MAE.

    ``exclude_ids`` lists session ids that must not contribute any pair
    (the outer test session); a violation raises ``AssertionError``.
    """
    cache = {} if cache is None else cache
    K = model_config.k_history if model_config.conditioning != "none" else 0
    splits = inner_cv_split(train_sessions, seed, train_config.inner_folds)
    splits = splits[:train_config.inner_max_splits]
    best = None
    diagnostics = []
    for j, split in enumerate(splits):
        split_seed = derive_seed(seed, "harness", "inner", j)
        tr = _session_pairs(split.train, K, train_config, cache, spectral_cfg)
        if split.holdout_fraction is not None:
            tr, va = _holdout(tr, split.holdout_fraction, split_seed)
        else:
            va = _session_pairs(split.val, K, train_config, cache, spectral_cfg)
        _assert_disjoint(tr, va, exclude_ids, split.holdout_fraction is None)
        net, history = train(tr, va, model_config, train_config, split_seed)
        score = history["best_val_mae"]
        diagnostics.append({
            "split": j, "val_sessions": [str(s.subject_id) for s in split.val],
            "best_val_mae": score, "epochs": len(history["epoch"]),
            "best_epoch": history["best_epoch"], "aborted": history["aborted"],
        })
        if score is not None and (best is None or score < best[0]):
            best = (score, net, history)
    if best is None:
        raise FloatingPointError("every inner split aborted before a finite validation epoch")
    return best[1], best[2], diagnostics


def _assert_disjoint(train_pairs, val_pairs, exclude_ids, session_level):
    excluded = set(exclude_ids)
    tr_ids = {p.session_id for p in train_pairs}
    va_ids = {p.session_id for p in val_pairs}
    assert not (tr_ids | va_ids) & excluded, "test session leaked into training or validation"
    if session_level:
        assert not tr_ids & va_ids, "validation session also used for training"
    else:
        assert not {p.key for p in train_pairs} & {p.key for p in val_pairs}, \
            "validation segment also used for training"


# --------------------------------------------------------------------------
# inference


class LabelAccessTracker:
    """Label-hiding view of a session that counts every attempt to read labels."""

    def __init__(self, session):
        self._session = session
        self.label_reads = 0
        self.subject_id = session.subject_id
        self.fs_hz = session.fs_hz
        self.samples = session.samples
        self.window_s = session.window_s
        self.hop_s = session.hop_s

    @property
    def labels(self):
        self.label_reads += 1
        return self._session.labels

    @property
    def n_segments(self):
        from .signal import segment_count
        return segment_count(len(self.samples), self.fs_hz, self.window_s, self.hop_s)


def _as_predict_fn(model):
    if isinstance(model, HRNet):
        conditioned = model.config.conditioning != "none"
        return (lambda x, xi: predict_bpm(model, x, xi if conditioned else None)), conditioned
    if callable(model):
        return model, True
    raise ConfigurationError("model must be an HRNet or a callable (segments, xi) -> bpm")


@dataclass
class AutoregressiveResult:
    series: HrSeries
    bootstrap: int
    carried_forward: list = field(default_factory=list)


def autoregressive_eval(model, session, K, spectral_cfg=None, bootstrap=None,
                        return_details=False):
    """Predict every segment of ``session`` without reading its labels.

    The first ``bootstrap`` segments (default ``K``) use the spectral
    estimate; each later segment is predicted from its PPG window and the
    previous ``K`` predictions.  When ``bootstrap < K`` the missing history
    is padded with the earliest prediction.  Flat segments repeat the
    previous prediction and are listed in ``carried_forward``.  An
    unconditioned network predicts every segment directly.
    """
    predict, conditioned = _as_predict_fn(model)
    K = int(K) if conditioned else 0
    B = (K if bootstrap is None else int(bootstrap)) if conditioned else 0
    if conditioned and K > 0 and B < 1:
        raise ConfigurationError("a conditioned model needs at least one bootstrap segment")
    fs_cfg = spectral_cfg or SpectralConfig(fs_hz=session.fs_hz)
    segs = {s.index: s for s in segment(session, session.window_s, session.hop_s)}
    n = session.n_segments
    preds = np.empty(n)
    carried = []

    def carry(i):
        carried.append(i)
        return preds[i - 1] if i > 0 else HR_CENTER_BPM

    if not conditioned or K == 0:
        present = sorted(segs)
        if present:
            x = np.stack([segs[i].values for i in present])
            out = predict(x, np.empty((len(present), 0)))
            for i, v in zip(present, out):
                preds[i] = v
        for i in range(n):
            if i not in segs:
                preds[i] = carry(i)
    else:
        for i in range(n):
            if i not in segs:
                preds[i] = carry(i)
            elif i < B:
                try:
                    preds[i] = estimate_hr_fft(segs[i].values, fs_cfg)
                except DegenerateSegmentError:
                    preds[i] = carry(i)
            else:
                hist = preds[max(0, i - K):i]
                if hist.shape[0] < K:
                    hist = np.concatenate([np.full(K - hist.shape[0], preds[0]), hist])
                preds[i] = predict(segs[i].values[None, :], hist[None, :])[0]
    if carried:
        logger.warning("session %s: carried prediction forward for flat segment(s) %s",
                       session.subject_id, carried[:10])
    series = HrSeries(preds, "predicted")
    if return_details:
        return AutoregressiveResult(series, B, carried)
    return series


# --------------------------------------------------------------------------
# LOSO


@dataclass
class FoldResult:
    test_id: str
    train_ids: list
    mae_bpm: float
    n_segments: int
    label_reads: int
    inner: list
    predictions: list


@dataclass
class LosoResult:
    report: EvalReport
    folds: list

    @property
    def maes(self):
        return [f.mae_bpm for f in self.folds]


def _run_fold(fold, model_config, train_config, spectral_cfg, bootstrap):
    from .report import mae

    seed = derive_seed(train_config.seed, "harness", "fold", fold.index)
    with threadpool_limits(limits=1):
        net, _, inner = fit_fold(fold.train, model_config, train_config, seed, spectral_cfg,
                                 exclude_ids=(fold.test_id,))
        view = LabelAccessTracker(fold.test)
        series = autoregressive_eval(net, view, model_config.k_history, spectral_cfg, bootstrap)
    assert view.label_reads == 0, f"labels of {fold.test_id} were read during inference"
    assert fold.test_id not in fold.train_ids, "test session present in its own training set"
    labels = fold.test.labels
    return FoldResult(fold.test_id, list(fold.train_ids), mae(series.values, labels),
                      len(labels), view.label_reads, inner, series.values.tolist())


def run_loso(sessions, model_config, train_config, spectral_cfg=None, bootstrap=None, jobs=1):
    """Leave-one-session-out evaluation with inner cross-validated model selection.

    Folds are independent and seeded from ``train_config.seed`` and their
    index, so ``jobs > 1`` gives the same numbers as a sequential run.
    """
    folds = loso_folds(sessions)
    union = set()
    for f in folds:
        assert f.test_id not in f.train_ids
        union.add(f.test_id)
    assert union == {str(s.subject_id) for s in sessions}
    args = (model_config, train_config, spectral_cfg, bootstrap)
    if jobs and jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold, folds, *[[a] * len(folds) for a in args]))
    else:
        results = [_run_fold(f, *args) for f in folds]
    report = EvalReport.from_predictions(
        [(r.test_id, np.array(r.predictions), f.test.labels) for r, f in zip(results, folds)],
        metadata={"model_config": model_config.to_dict(), "train_config": train_config.to_dict(),
                  "bootstrap": bootstrap})
    return LosoResult(report, results)


# --------------------------------------------------------------------------
# ablation


@dataclass(frozen=True)
class AblationCell:
    variant: str
    conditioning: str
    k: int
    aug: bool


def default_ablation_matrix(k_values=(3, 5, 7), k_default=5):
    """Three architecture rows followed by one row per history length."""
    rows = [
        AblationCell("baseline", "none", 0, False),
        AblationCell("hr_dynamics", "encoder_decoder", k_default, False),
        AblationCell("hr_dynamics+aug", "encoder_decoder", k_default, True),
    ]
    rows += [AblationCell(f"xi_{k}", "encoder_decoder", k, True) for k in k_values]
    return rows


def _cell_configs(cell, model_config, train_config):
    k = cell.k if cell.conditioning != "none" else model_config.k_history
    mc = model_config.replace(conditioning=cell.conditioning, k_history=k)
    tc = train_config.replace(aug_fraction=train_config.aug_fraction if cell.aug else 0.0,
                              k_history=k)
    return mc, tc


def run_ablation(sessions, model_config, train_config, matrix=None, dataset="dataset",
                 seeds=None, spectral_cfg=None, jobs=1):
    """Evaluate every cell with LOSO; returns a list of row dicts.

    Cells that resolve to identical configurations are evaluated once.  With
    several ``seeds`` the per-session MAEs are averaged across seeds first.
    """
    matrix = default_ablation_matrix() if matrix is None else list(matrix)
    seeds = [train_config.seed] if seeds is None else list(seeds)
    done = {}
    rows = []
    for cell in matrix:
        mc, tc = _cell_configs(cell, model_config, train_config)
        key = json.dumps([mc.to_dict(), tc.to_dict()], sort_keys=True)
        if key not in done:
            per_seed = [run_loso(sessions, mc, tc.replace(seed=s), spectral_cfg, jobs=jobs).maes
                        for s in seeds]
            per_session = np.mean(np.array(per_seed), axis=0)
            done[key] = (float(per_session.mean()), float(per_session.std()))
        mean, std = done[key]
        rows.append({"variant": cell.variant, "k": cell.k if cell.conditioning != "none" else "",
                     "aug": "on" if cell.aug else "off", "dataset": dataset,
                     "mae_mean": mean, "mae_std": std})
    return rows


def write_ablation_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATION_HEADER)
        writer.writeheader()
        for r in rows:
            writer.writerow({**r, "mae_mean": f"{r['mae_mean']:.6f}", "mae_std": f"{r['mae_std']:.6f}"})


# --------------------------------------------------------------------------
# desk benchmark


@dataclass(frozen=True)
class DeskBenchmark:
    """Settings of the single-core conditioning benchmark.

    Short sessions at 16 Hz and a 30-epoch budget with one inner split keep
    six LOSO runs (two configurations, three seeds) within ten minutes on one
    core.  The data seed is fixed and independent of the training seeds.
    """

    n_sessions: int = 12
    duration_s: float = 150.0
    fs_hz: float = 16.0
    artifact_rate: float = 4.0
    snr_db: float = 5.0
    data_seed: int = 2024
    preset: str = "bench"
    max_epochs: int = 30
    inner_max_splits: int = 1
    early_stop_patience: int = 30
    aug_fraction: float = 0.1
    seeds: tuple = (0, 1, 2)

    def sessions(self):
        from .datagen import SynthConfig, synth_dataset

        cfg = SynthConfig(duration_s=self.duration_s, fs_hz=self.fs_hz,
                          artifact_rate=self.artifact_rate, snr_db=self.snr_db,
                          seed=self.data_seed)
        return synth_dataset(self.n_sessions, cfg)

    def configs(self, conditioning):
        from .model import preset

        mc = preset(self.preset, conditioning=conditioning)
        tc = TrainConfig(max_epochs=self.max_epochs, inner_max_splits=self.inner_max_splits,
                         early_stop_patience=self.early_stop_patience,
                         aug_fraction=self.aug_fraction if conditioning != "none" else 0.0)
        return mc, tc


def desk_benchmark(bench=None, sessions=None, jobs=1, progress=None):
    """Run encoder_decoder with augmentation against conditioning none.

    Returns a dict with the per-seed :class:`LosoResult` lists under
    ``"runs"``, the seed-averaged MAE per configuration under ``"mae"`` and
    the relative gain ``1 - mae[encoder_decoder] / mae[none]``.
    """
    bench = DeskBenchmark() if bench is None else bench
    sessions = bench.sessions() if sessions is None else sessions
    spectral_cfg = SpectralConfig(fs_hz=bench.fs_hz)
    runs, maes = {}, {}
    for conditioning in ("encoder_decoder", "none"):
        mc, tc = bench.configs(conditioning)
        runs[conditioning] = []
        for s in bench.seeds:
            result = run_loso(sessions, mc, tc.replace(seed=s), spectral_cfg, jobs=jobs)
            runs[conditioning].append(result)
            if progress is not None:
                progress(conditioning, s, result)
        maes[conditioning] = float(np.mean([r.report.mae_mean for r in runs[conditioning]]))
    return {"runs": runs, "mae": maes, "gain": 1.0 - maes["encoder_decoder"] / maes["none"]}


# --------------------------------------------------------------------------
# manifest


def dataset_hash(sessions):
    """SHA-256 over ids, sampling rates, samples and labels in id order."""
    h = hashlib.sha256()
    for s in sorted(sessions, key=lambda s: str(s.subject_id)):
        h.update(str(s.subject_id).encode())
        h.update(np.float64(s.fs_hz).tobytes())
        h.update(np.ascontiguousarray(s.samples, dtype="<f8").tobytes())
        if s.labels is not None:
            h.update(np.ascontiguousarray(s.labels, dtype="<f8").tobytes())
    return "sha256:" + h.hexdigest()


def file_hash(paths):
    h = hashlib.sha256()
    for p in sorted(str(p) for p in paths):
        with open(p, "rb") as fh:
            h.update(os.path.basename(p).encode())
            h.update(fh.read())
    return "sha256:" + h.hexdigest()


def write_manifest(directory, command, configs=None, seeds=None, inputs_hash=None, metrics=None,
                   outputs=None):
    """Write ``run_manifest.json``; contents depend only on the run, never the clock."""
    doc = {
        "command": command,
        "configs": configs or {},
        "seeds": seeds or {},
        "inputs_hash": inputs_hash,
        "metrics": metrics or {},
        "outputs": sorted(outputs or []),
    }
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, MANIFEST_NAME)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    return path


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (ModelConfig, TrainConfig)):
        return o.to_dict()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
