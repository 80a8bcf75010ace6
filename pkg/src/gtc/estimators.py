"""scikit-learn style wrappers.

Both estimators train a teacher/student pair and keep only the student,
exported as shift codes: ``predict`` and ``transform`` run the
multiplication-free engine.
"""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from gtc.data import DatasetSplit
from gtc.layers import build_lenet_small, build_mlp, build_vae
from gtc.quant import DEFAULT_EPS_ZERO
from gtc.shift import OpCounter, export_shift_model, export_shift_vae, shift_forward, shift_vae_forward
from gtc.tensor import Tensor
from gtc.train import TrainConfig, train

IMAGE_SHAPE = (1, 28, 28)


def _as_images(X, shape: tuple) -> np.ndarray:
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 2:
        if X.shape[1] != int(np.prod(shape)):
            raise ValueError(f"expected {int(np.prod(shape))} features, got {X.shape[1]}")
        return X.reshape((len(X),) + tuple(shape))
    if tuple(X.shape[1:]) != tuple(shape):
        raise ValueError(f"expected samples of shape {shape}, got {X.shape[1:]}")
    return X


def _check(X) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim > 2:
        flat = check_array(X.reshape(len(X), -1), dtype=np.float32)
        return flat.reshape(X.shape)
    return check_array(X, dtype=np.float32)


class _GTCBase(BaseEstimator):
    def _train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, lambda1=self.lambda1, lambda2=self.lambda2, optimizer=self.optimizer,
                           batch_size=self.batch_size, iters=self.iters, seed=self.seed, mode=self.mode,
                           log_every=min(self.log_every, max(self.iters, 1)), eval_every=0)

    @property
    def quantized_layers_(self) -> list:
        check_is_fitted(self, "model_")
        return self.model_.quantize_layers()

    def save_gtcq(self, path: str) -> int:
        from gtc.model_io import save_gtcq

        return save_gtcq(self.quantized_layers_, path)


class GTCClassifier(ClassifierMixin, _GTCBase):
    """Power-of-two classifier.

    ``architecture="lenet"`` expects 28x28 single-channel images (784
    features); ``"mlp"`` takes any flat feature vector.
    """

    def __init__(self, architecture: str = "mlp", model_scale: float = 0.5, hidden: int = 32,
                 lr: float = 1e-3, lambda1: float = 0.8, lambda2: float = 0.04, optimizer: str = "adam",
                 batch_size: int = 64, iters: int = 1000, seed: int = 0, eps_zero: float = DEFAULT_EPS_ZERO,
                 mode: str = "gtc", log_every: int = 50):
        self.architecture = architecture
        self.model_scale = model_scale
        self.hidden = hidden
        self.lr = lr
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.optimizer = optimizer
        self.batch_size = batch_size
        self.iters = iters
        self.seed = seed
        self.eps_zero = eps_zero
        self.mode = mode
        self.log_every = log_every

    def _build(self, n_features: int, n_classes: int):
        if self.architecture == "lenet":
            if n_features != 784 or n_classes > 10:
                raise ValueError("lenet needs 784 features and at most 10 classes")
            return build_lenet_small(self.model_scale, self.seed, self.eps_zero)
        if self.architecture == "mlp":
            return build_mlp(n_features, (self.hidden,), n_classes, self.seed, self.eps_zero)
        raise ValueError(f"unknown architecture {self.architecture!r}")

    def fit(self, X, y):
        X = _check(X)
        flat, y = check_X_y(X.reshape(len(X), -1), y, dtype=np.float32)
        self._encoder = LabelEncoder().fit(y)
        self.classes_ = self._encoder.classes_
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.n_features_in_ = flat.shape[1]
        self.model_ = self._build(flat.shape[1], len(self.classes_))
        x = _as_images(flat, self.model_.input_shape)
        result = train(self.model_, DatasetSplit(Tensor(x), self._encoder.transform(y)), self._train_config())
        self.records_ = result.records
        self.shift_model_ = export_shift_model(self.model_)
        self.bits_ = [q.bits for q in self.shift_model_.quantized]
        return self

    def _images(self, X) -> np.ndarray:
        check_is_fitted(self, "shift_model_")
        flat = check_array(_check(X).reshape(len(X), -1), dtype=np.float32)
        if flat.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {flat.shape[1]} features, expected {self.n_features_in_}")
        return _as_images(flat, self.shift_model_.input_shape)

    def predict_proba(self, X, counter: Optional[OpCounter] = None) -> np.ndarray:
        x = self._images(X)
        probs = shift_forward(self.shift_model_, x, counter)
        return probs[:, :len(self.classes_)]

    def predict(self, X) -> np.ndarray:
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]


class GTCAutoencoder(TransformerMixin, _GTCBase):
    """Variational auto-encoder on 28x28 images; ``transform`` returns latent means."""

    def __init__(self, model_scale: float = 0.25, latent_dim: int = 10, lr: float = 1e-3, lambda1: float = 3.0,
                 lambda2: float = 0.04, optimizer: str = "adam", batch_size: int = 64, iters: int = 1000,
                 seed: int = 0, eps_zero: float = DEFAULT_EPS_ZERO, mode: str = "gtc", log_every: int = 50):
        self.model_scale = model_scale
        self.latent_dim = latent_dim
        self.lr = lr
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.optimizer = optimizer
        self.batch_size = batch_size
        self.iters = iters
        self.seed = seed
        self.eps_zero = eps_zero
        self.mode = mode
        self.log_every = log_every

    def fit(self, X, y=None):
        x = _as_images(_check(X), IMAGE_SHAPE)
        if x.min() < 0 or x.max() > 1:
            raise ValueError("pixel values must lie in [0, 1]")
        self.n_features_in_ = int(np.prod(IMAGE_SHAPE))
        self.model_ = build_vae(self.model_scale, self.latent_dim, self.seed, self.eps_zero)
        result = train(self.model_, DatasetSplit(Tensor(x), np.zeros(len(x), np.int64)), self._train_config())
        self.records_ = result.records
        self.shift_model_ = export_shift_vae(self.model_)
        self.bits_ = [q.bits for q in self.shift_model_.quantized]
        return self

    def _images(self, X) -> np.ndarray:
        check_is_fitted(self, "shift_model_")
        return _as_images(_check(X), IMAGE_SHAPE)

    def transform(self, X) -> np.ndarray:
        x = self._images(X)
        sv = self.shift_model_
        return shift_forward(sv.mean_head, shift_forward(sv.encoder, x))

    def inverse_transform(self, Z) -> np.ndarray:
        check_is_fitted(self, "shift_model_")
        Z = check_array(Z, dtype=np.float32)
        return shift_forward(self.shift_model_.decoder, Z).reshape(len(Z), -1)

    def reconstruct(self, X, counter: Optional[OpCounter] = None) -> np.ndarray:
        x = self._images(X)
        return shift_vae_forward(self.shift_model_, x, counter).reshape(len(x), -1)

    def score(self, X, y=None) -> float:
        """Negative per-pixel binary cross-entropy of the reconstructions."""
        x = self._images(X).reshape(len(X), -1).astype(np.float64)
        p = np.clip(self.reconstruct(X).astype(np.float64), 1e-7, 1 - 1e-7)
        return float(np.mean(x * np.log(p) + (1 - x) * np.log1p(-p)))
