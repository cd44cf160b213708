"""scikit-learn style wrapper around the TinyT video classifier."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted

from .core import DTYPE, ContractError
from .network import TrainConfig, build_model, predict_logits, tinyt_spec, train

__all__ = ["TConvClassifier", "check_clips", "check_labels"]


def check_clips(X, in_channels: int | None = None) -> np.ndarray:
    """Validate a batch of clips and return it as float64 ``(N, C, T, W, H)``.

    A 4D array is read as single-channel ``(N, T, W, H)``.
    """
    X = np.asarray(X, dtype=DTYPE)
    if X.ndim == 4:
        X = X[:, None]
    if X.ndim != 5:
        raise ContractError(f"clips must be (N, C, T, W, H) or (N, T, W, H), got shape {X.shape}")
    if X.shape[0] == 0:
        raise ContractError("no clips given")
    if not np.all(np.isfinite(X)):
        raise ContractError("clips contain NaN or infinite values")
    if in_channels is not None and X.shape[1] != in_channels:
        raise ContractError(f"clips have {X.shape[1]} channels, the model was fit on {in_channels}")
    return X


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n:
        raise ContractError(f"need one label per clip: {n} clips, labels of shape {y.shape}")
    check_classification_targets(y)
    return y


class TConvClassifier(ClassifierMixin, BaseEstimator):
    """TinyT trained with SGD and momentum.

    ``mode`` picks factorized (``"3t"``) or dense (``"3d"``) conv layers.
    After ``fit`` the trained network is ``model_`` and the per-step loss
    curve ``loss_curve_``.
    """

    def __init__(self, mode="3t", lr=0.05, momentum=0.9, batch_size=16, epochs=20,
                 weight_decay=0.0, theta_lr_mult=1.0, input_offset=0.5, random_state=0):
        self.mode = mode
        self.lr = lr
        self.momentum = momentum
        self.batch_size = batch_size
        self.epochs = epochs
        self.weight_decay = weight_decay
        self.theta_lr_mult = theta_lr_mult
        self.input_offset = input_offset
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, momentum=self.momentum, batch_size=self.batch_size,
                           epochs=self.epochs, seed=self.random_state,
                           weight_decay=self.weight_decay, theta_lr_mult=self.theta_lr_mult)

    def fit(self, X, y):
        X = check_clips(X)
        y = check_labels(y, len(X))
        self.classes_, codes = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ContractError("need at least two classes")
        spec = tinyt_spec(len(self.classes_), mode=self.mode, in_channels=X.shape[1],
                          seed=self.random_state, input_offset=self.input_offset)
        self.model_ = build_model(spec)
        self.loss_curve_ = train(self.model_, X, codes, self._config())
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return predict_logits(self.model_, check_clips(X, self.n_features_in_))

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]
