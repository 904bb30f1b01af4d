"""scikit-learn compatible wrapper around the HR-conditioned network.

Feature matrices pack the HR history in front of the PPG window::

    X = [xi_1 .. xi_K | ppg_1 .. ppg_L]      (xi oldest first, in bpm)

so the estimator can sit in pipelines, be cloned, and expose its whole
configuration through ``get_params``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._rng import derive_rng
from .exceptions import InputError
from .model import HRNet, ModelConfig
from .training import TrainConfig, fit_network, predict_bpm


def pack_features(segments, xi=None):
    segments = np.asarray(segments, dtype=np.float64)
    if xi is None or np.asarray(xi).size == 0:
        return segments.copy()
    xi = np.asarray(xi, dtype=np.float64)
    if xi.shape[0] != segments.shape[0]:
        raise InputError(f"{xi.shape[0]} history rows for {segments.shape[0]} segments")
    return np.hstack([xi, segments])


def unpack_features(X, k_history):
    X = np.asarray(X, dtype=np.float64)
    return X[:, k_history:], X[:, :k_history]


class HRDynamicsRegressor(RegressorMixin, BaseEstimator):
    """PPG -> heart rate regressor conditioned on the previous ``k_history`` HRs.

    ``conditioning`` selects ``"encoder_decoder"`` (default),
    ``"mlp_concat"`` or ``"none"``.  With ``"none"`` the first
    ``k_history`` columns are still expected (they are ignored); set
    ``k_history=0`` to pass bare PPG windows.
    """

    def __init__(self, k_history=5, conditioning="encoder_decoder", xi_embed_dim=50,
                 encoder_hidden=64, decoder_hidden=64, conv_channels=(16, 32),
                 conv_kernels=(7, 5), xi_order="oldest_first", batch_size=32, lr=5e-4,
                 weight_decay=1e-6, plateau_patience=10, plateau_factor=0.1,
                 early_stop_patience=30, max_epochs=500, aug_fraction=0.1, aug_sigma=3.0,
                 validation_fraction=0.2, random_state=0):
        self.k_history = k_history
        self.conditioning = conditioning
        self.xi_embed_dim = xi_embed_dim
        self.encoder_hidden = encoder_hidden
        self.decoder_hidden = decoder_hidden
        self.conv_channels = conv_channels
        self.conv_kernels = conv_kernels
        self.xi_order = xi_order
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.plateau_patience = plateau_patience
        self.plateau_factor = plateau_factor
        self.early_stop_patience = early_stop_patience
        self.max_epochs = max_epochs
        self.aug_fraction = aug_fraction
        self.aug_sigma = aug_sigma
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    @classmethod
    def from_configs(cls, model_config, train_config, **kwargs):
        return cls(
            k_history=model_config.k_history, conditioning=model_config.conditioning,
            xi_embed_dim=model_config.xi_embed_dim, encoder_hidden=model_config.encoder_hidden,
            decoder_hidden=model_config.decoder_hidden, conv_channels=model_config.conv_channels,
            conv_kernels=model_config.conv_kernels, xi_order=model_config.xi_order,
            batch_size=train_config.batch_size, lr=train_config.lr,
            weight_decay=train_config.weight_decay,
            plateau_patience=train_config.plateau_patience,
            plateau_factor=train_config.plateau_factor,
            early_stop_patience=train_config.early_stop_patience,
            max_epochs=train_config.max_epochs, aug_fraction=train_config.aug_fraction,
            aug_sigma=train_config.aug_sigma, random_state=train_config.seed, **kwargs)

    def model_config(self):
        return ModelConfig(
            k_history=self.k_history, xi_embed_dim=self.xi_embed_dim,
            encoder_hidden=self.encoder_hidden, conv_channels=tuple(self.conv_channels),
            conv_kernels=tuple(self.conv_kernels), decoder_hidden=self.decoder_hidden,
            conditioning=self.conditioning, xi_order=self.xi_order)

    def train_config(self):
        return TrainConfig(
            batch_size=self.batch_size, lr=self.lr, weight_decay=self.weight_decay,
            plateau_patience=self.plateau_patience, plateau_factor=self.plateau_factor,
            early_stop_patience=self.early_stop_patience, max_epochs=self.max_epochs,
            aug_fraction=self.aug_fraction, aug_sigma=self.aug_sigma,
            k_history=self.k_history, seed=self.random_state)

    def _split(self, X):
        segments, xi = unpack_features(X, self.k_history)
        if segments.shape[1] < 2:
            raise InputError("feature matrix holds no PPG samples after the history columns")
        return segments, xi

    def fit(self, X, y, eval_set=None):
        """Train; ``eval_set=(X_val, y_val)`` drives LR scheduling and early stopping.

        Without ``eval_set`` a random ``validation_fraction`` of rows is held out.
        """
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        if eval_set is None:
            order = derive_rng(self.random_state, "estimator", "holdout").permutation(len(y))
            n_val = max(1, int(round(self.validation_fraction * len(y))))
            val_idx, tr_idx = order[:n_val], order[n_val:]
            X_val, y_val = X[val_idx], y[val_idx]
            X, y = X[tr_idx], y[tr_idx]
        else:
            X_val, y_val = check_X_y(*eval_set, dtype=np.float64, y_numeric=True)
        segments, xi = self._split(X)
        val_segments, val_xi = self._split(X_val)
        self.net_ = HRNet(self.model_config(), seed=self.random_state)
        self.history_ = fit_network(self.net_, segments, xi, y, val_segments, val_xi, y_val,
                                    self.train_config())
        self.n_features_in_ = X.shape[1]
        self.segment_length_ = segments.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "net_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise InputError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        segments, xi = self._split(X)
        return predict_bpm(self.net_, segments, xi if self.conditioning != "none" else None)

    @classmethod
    def from_network(cls, net, segment_length):
        """Wrap an already-trained (or loaded) :class:`HRNet`."""
        cfg = net.config
        est = cls(k_history=cfg.k_history, conditioning=cfg.conditioning,
                  xi_embed_dim=cfg.xi_embed_dim, encoder_hidden=cfg.encoder_hidden,
                  decoder_hidden=cfg.decoder_hidden, conv_channels=cfg.conv_channels,
                  conv_kernels=cfg.conv_kernels, xi_order=cfg.xi_order, random_state=net.seed)
        est.net_ = net
        est.history_ = None
        est.segment_length_ = segment_length
        est.n_features_in_ = segment_length + cfg.k_history
        return est
