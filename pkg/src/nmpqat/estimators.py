"""scikit-learn style estimators around the training engine."""

from __future__ import annotations

import numpy as np
from scipy.special import softmax
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .analysis import bit_report, memory_bytes
from .data import Dataset, fit_standardizer, standardize
from .model import QuantMode
from .numerics import seeded_rng
from .training import ArchSpec, TrainConfig, fit_model, validation_split


class _NMPQATBase(BaseEstimator):
    _task = "regression"

    def __init__(self, hidden_sizes=(64, 64), mode="nmp_weights_only", tau=0.05, lr=1e-3,
                 epochs=100, patience=20, batch_size=128, val_fraction=0.15,
                 standardize=True, random_state=0):
        self.hidden_sizes = hidden_sizes
        self.mode = mode
        self.tau = tau
        self.lr = lr
        self.epochs = epochs
        self.patience = patience
        self.batch_size = batch_size
        self.val_fraction = val_fraction
        self.standardize = standardize
        self.random_state = random_state

    def _quant_mode(self) -> QuantMode:
        if isinstance(self.mode, QuantMode):
            return self.mode
        return QuantMode.parse(self.mode, tau=self.tau)

    def _fit(self, X, y, n_classes=None):
        config = TrainConfig(lr=self.lr, epochs=self.epochs, patience=self.patience,
                             batch_size=self.batch_size, seeds=(int(self.random_state),),
                             val_fraction=self.val_fraction)
        arch = ArchSpec(tuple(int(h) for h in self.hidden_sizes), self._quant_mode())
        ds = Dataset(X, y, self._task, n_classes)
        stats = None
        if self.standardize:
            stats = fit_standardizer(ds)
            ds = standardize(ds, stats)
        # same draw order as training.train_seed so results match the CLI protocol
        rng = seeded_rng(int(self.random_state))
        tr, val = validation_split(ds.n_rows, config.val_fraction, rng)
        model = arch.build(ds.n_features, self._task, n_classes, rng=rng)
        self.history_ = fit_model(model, ds.features[tr], ds.targets[tr],
                                  ds.features[val], ds.targets[val], config, rng)
        self.model_ = model
        self.frozen_ = model.freeze(provenance={"seed": int(self.random_state)})
        if stats is not None:
            self.frozen_.feature_mean = stats.mean
            self.frozen_.feature_std = stats.std
        self.n_features_in_ = X.shape[1]
        return self

    def _raw(self, X) -> np.ndarray:
        check_is_fitted(self, "frozen_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, but the model expects {self.n_features_in_}")
        return self.frozen_.predict_raw(self.frozen_.preprocess(X))

    def bit_report(self):
        check_is_fitted(self, "frozen_")
        return bit_report(self.frozen_)

    def memory_bytes(self, batch_size=1):
        check_is_fitted(self, "frozen_")
        return memory_bytes(self.frozen_, batch_size)


class NMPQATRegressor(RegressorMixin, _NMPQATBase):
    """MLP regressor with learned per-neuron weight (and activation) precision.

    ``mode`` is one of ``"full_precision"``, ``"nmp_weights_only"``,
    ``"nmp_weights_acts"``, ``"uniform(b)"`` or ``"uniform(b,aB)"``.

    Attributes
    ----------
    model_ : MlpModel
        Trained live model (best validation epoch).
    frozen_ : FrozenModel
        Integer-code inference model used by ``predict``.
    history_ : History
        Per-epoch losses, squared gradient norms and initial bit assignments.
    """

    _task = "regression"

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        return self._fit(X, y.astype(np.float64))

    def predict(self, X):
        return self._raw(X)[:, 0]


class NMPQATClassifier(ClassifierMixin, _NMPQATBase):
    """Softmax MLP classifier with learned per-neuron precision; see ``NMPQATRegressor``."""

    _task = "classification"

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, idx = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ValueError("need at least two classes")
        self._fit(X, idx, n_classes=self.classes_.size)
        self.frozen_.label_map = [str(c) for c in self.classes_]
        return self

    def predict_proba(self, X):
        return softmax(self._raw(X), axis=1)

    def predict(self, X):
        return self.classes_[np.argmax(self._raw(X), axis=1)]
