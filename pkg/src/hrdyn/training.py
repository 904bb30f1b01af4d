"""Mini-batch training loop with HR-history augmentation and early stopping."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

import numpy as np

from ._rng import derive_rng
from .exceptions import ConfigurationError, NonFiniteLossError, PoisonedUpdateError
from .model import HR_SCALE_BPM, xi_scaling, xi_unscaling
from .nn import EarlyStopping, OptimizerState, ReduceLROnPlateau, adam_step, mae_loss

logger = logging.getLogger(__name__)

XI_TRAIN_SOURCES = ("labels", "predictions")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    lr: float = 5e-4
    weight_decay: float = 1e-6
    plateau_patience: int = 10
    plateau_factor: float = 0.1
    early_stop_patience: int = 30
    max_epochs: int = 500
    aug_fraction: float = 0.1
    aug_sigma: float = 3.0
    k_history: int = 5
    seed: int = 0
    inner_folds: int = 3
    # train only the first ``inner_max_splits`` inner folds (None: all of them)
    inner_max_splits: int | None = None
    xi_train_source: str = "labels"

    def __post_init__(self):
        positive = ("batch_size", "lr", "plateau_patience", "plateau_factor",
                    "early_stop_patience", "max_epochs", "inner_folds")
        if self.inner_folds < 2:
            raise ConfigurationError("inner_folds must be >= 2")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)!r}")
        if self.inner_max_splits is not None and self.inner_max_splits < 1:
            raise ConfigurationError("inner_max_splits must be >= 1 or None")
        if self.weight_decay < 0 or self.aug_sigma < 0 or self.k_history < 0:
            raise ConfigurationError("weight_decay, aug_sigma and k_history must be >= 0")
        if not 0.0 <= self.aug_fraction <= 1.0:
            raise ConfigurationError(f"aug_fraction must lie in [0, 1], got {self.aug_fraction}")
        if self.xi_train_source not in XI_TRAIN_SOURCES:
            raise ConfigurationError(f"xi_train_source must be one of {XI_TRAIN_SOURCES}")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def augment_xi_array(xi, fraction, sigma, rng):
    """Perturb ``round(fraction * n)`` randomly chosen rows by ``sigma * N(0, 1)``.

    Returns ``(augmented_copy, selected_row_indices)``.
    """
    xi = np.asarray(xi, dtype=np.float64)
    n = xi.shape[0]
    count = int(round(fraction * n))
    out = xi.copy()
    if count == 0 or xi.ndim < 2 or xi.shape[1] == 0:
        return out, np.empty(0, dtype=np.int64)
    rows = np.sort(rng.choice(n, size=count, replace=False))
    out[rows] += sigma * rng.standard_normal((count, xi.shape[1]))
    return out, rows


def _predict_normalized(net, segments, xi, batch_size=256):
    out = np.empty(segments.shape[0])
    for start in range(0, segments.shape[0], batch_size):
        sl = slice(start, start + batch_size)
        out[sl] = net.forward(segments[sl], None if xi is None else xi[sl], train=False)
    return out


def predict_bpm(net, segments, xi, batch_size=256):
    return xi_unscaling(_predict_normalized(net, segments, xi, batch_size))


def fit_network(net, segments, xi, y, val_segments, val_xi, val_y, cfg):
    """Train ``net`` in place and restore its best-validation weights.

    ``xi`` and ``y`` are in bpm.  Every epoch draws a fresh augmentation of
    ``xi`` (training rows only) and a fresh shuffle, both from streams derived
    from ``cfg.seed``.  Returns the history dict.
    """
    conditioned = net.config.conditioning != "none"
    y_norm = xi_scaling(y)
    val_norm = xi_scaling(val_y)
    params = net.named_parameters()
    grads = net.named_gradients()
    opt = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = ReduceLROnPlateau(cfg.lr, cfg.plateau_factor, cfg.plateau_patience)
    stopper = EarlyStopping(cfg.early_stop_patience)
    best_state = net.state_dict()
    history = {"epoch": [], "train_mae": [], "val_mae": [], "lr": [],
               "best_epoch": None, "stopped_early": False, "aborted": None}
    n = segments.shape[0]

    for epoch in range(cfg.max_epochs):
        xi_epoch = xi
        if conditioned and cfg.aug_fraction > 0:
            xi_epoch, _ = augment_xi_array(xi, cfg.aug_fraction, cfg.aug_sigma,
                                           derive_rng(cfg.seed, "harness", "augment", epoch))
        order = derive_rng(cfg.seed, "harness", "shuffle", epoch).permutation(n)
        abs_err_sum = 0.0
        try:
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                net.zero_grad()
                out = net.forward(segments[idx], xi_epoch[idx] if conditioned else None, train=True)
                loss, dout = mae_loss(out, y_norm[idx])
                if not np.isfinite(loss):
                    raise NonFiniteLossError(f"non-finite training loss at epoch {epoch}")
                net.backward(dout)
                adam_step(params, grads, opt)
                abs_err_sum += loss * len(idx)
        except (NonFiniteLossError, PoisonedUpdateError) as exc:
            logger.error("training aborted: %s; restoring last good checkpoint", exc)
            history["aborted"] = str(exc)
            break
        val_pred = _predict_normalized(net, val_segments, val_xi if conditioned else None)
        val_mae = float(np.mean(np.abs(val_pred - val_norm))) * HR_SCALE_BPM
        history["epoch"].append(epoch)
        history["train_mae"].append(abs_err_sum / n * HR_SCALE_BPM)
        history["val_mae"].append(val_mae)
        history["lr"].append(opt.lr)
        if not np.isfinite(val_mae):
            history["aborted"] = f"non-finite validation MAE at epoch {epoch}"
            break
        if stopper.step(val_mae, epoch):
            best_state = net.state_dict()
            history["best_epoch"] = epoch
        opt.lr = sched.step(val_mae)
        if stopper.stop:
            history["stopped_early"] = True
            break
    net.load_state_dict(best_state)
    history["best_val_mae"] = stopper.best if history["best_epoch"] is not None else None
    return history
