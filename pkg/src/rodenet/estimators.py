"""scikit-learn classifier around a network and the SGD training loop."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import ChannelNormalizer, Dataset
from .network import DEFAULT_WIDTHS, build_model, forward
from .training import TrainConfig, train


class ODENetClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier backed by ResNet, ODENet or an rODENet variant.

    ``X`` is ``(n, C, H, W)``, or ``(n, C*H*W)`` together with ``image_shape``.

    Parameters
    ----------
    arch, n : str, int
        Architecture and depth.
    widths : tuple of int
        Channel widths of the three stages.
    solver_method : {"euler", "rk2", "rk4"}
    epochs, batch_size, lr0, milestones, weight_decay, momentum, grad_mode
        Training settings, see :class:`~rodenet.training.TrainConfig`.
    numeric : {"float", "q20"}
        Arithmetic used by :meth:`predict_proba`.
    bn_mode : {"running", "dynamic", "batch"} or None
        Batch-norm statistics at prediction time; None picks running
        statistics for float and per-image statistics for q20.
    normalize : bool
        Standardise channels with statistics from the training set.
    random_state : int
        Seeds initialisation and shuffling.
    """

    def __init__(self, arch="rodenet3", n=20, widths=DEFAULT_WIDTHS, solver_method="euler", epochs=200,
                 batch_size=128, lr0=0.01, milestones=(100, 150), weight_decay=1e-4, momentum=0.0,
                 grad_mode="unrolled", numeric="float", bn_mode=None, normalize=True, image_shape=None, random_state=0):
        self.arch = arch
        self.n = n
        self.widths = widths
        self.solver_method = solver_method
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr0 = lr0
        self.milestones = milestones
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.grad_mode = grad_mode
        self.numeric = numeric
        self.bn_mode = bn_mode
        self.normalize = normalize
        self.image_shape = image_shape
        self.random_state = random_state

    def _images(self, X):
        if X.ndim == 4:
            return X
        if X.ndim == 2 and self.image_shape is not None:
            return X.reshape((len(X),) + tuple(self.image_shape))
        raise ValueError(f"X must be (n, C, H, W) or (n, C*H*W) with image_shape; got shape {X.shape}")

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        check_classification_targets(y)
        X = self._images(X)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        _, c, h, w = X.shape
        if h != w:
            raise ValueError("images must be square")
        self.model_ = build_model(self.arch, self.n, widths=tuple(self.widths), num_classes=len(self.classes_),
                                  in_channels=c, image_size=h, seed=self.random_state,
                                  solver_method=self.solver_method)
        if self.normalize:
            self.normalizer_ = ChannelNormalizer().fit(X)
            self.model_.norm_mean, self.model_.norm_std = self.normalizer_.mean_, self.normalizer_.std_ + 1e-8
            X = self.normalizer_.transform(X)
        cfg = TrainConfig(lr0=self.lr0, milestones=tuple(self.milestones), weight_decay=self.weight_decay,
                          epochs=self.epochs, batch_size=self.batch_size, momentum=self.momentum,
                          grad_mode=self.grad_mode, seed=self.random_state)
        self.history_ = train(self.model_, Dataset(X, y_idx, len(self.classes_)), cfg).history
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = self._images(check_array(X, allow_nd=True, dtype=np.float64))
        if int(np.prod(X.shape[1:])) != self.n_features_in_:
            raise ValueError(f"X has {int(np.prod(X.shape[1:]))} features, expected {self.n_features_in_}")
        return forward(self.model_, X, self.numeric, self.bn_mode, normalized=False)

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]
