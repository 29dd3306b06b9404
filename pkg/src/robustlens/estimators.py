"""scikit-learn style wrappers around training, fusion and attacks."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .attacks import PerturbationBudget, fgsm_delta, pgd_delta
from .datasets import LabeledDataset
from .fusion import build_fusion, finetune_fusion
from .nn import classify, small_convnet_spec, softmax
from .training import TrainConfig, channel_stats, train


def check_images(X) -> np.ndarray:
    """Validate an (N, C, H, W) batch of finite pixels in [0, 1]."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4:
        raise ValueError(f"expected images shaped (N, C, H, W), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("empty input")
    if not np.all(np.isfinite(X)) or X.min() < 0 or X.max() > 1:
        raise ValueError("pixels must be finite and lie in [0, 1]")
    return X


def check_images_labels(X, y) -> tuple[np.ndarray, np.ndarray]:
    X = check_images(X)
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != X.shape[0]:
        raise ValueError(f"need one label per image, got {y.shape} for {X.shape[0]} images")
    return X, y


class ConvNetClassifier(ClassifierMixin, BaseEstimator):
    """SmallConvNet trained with the STD or ADV regime."""

    def __init__(
        self,
        regime="STD",
        epochs=20,
        batch_size=64,
        lr=0.01,
        momentum=0.9,
        decay_factor=0.1,
        decay_every=30,
        epsilon=0.005,
        attack="fgsm",
        channels=(16, 32),
        hidden=128,
        batchnorm=False,
        flip=False,
        seed=0,
    ):
        self.regime = regime
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.decay_factor = decay_factor
        self.decay_every = decay_every
        self.epsilon = epsilon
        self.attack = attack
        self.channels = channels
        self.hidden = hidden
        self.batchnorm = batchnorm
        self.flip = flip
        self.seed = seed

    def _config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            momentum=self.momentum,
            decay_factor=self.decay_factor,
            decay_every=self.decay_every,
            seed=self.seed,
            regime=self.regime,
            epsilon=self.epsilon,
            attack=self.attack,
            flip=self.flip,
            eval_robust=False,
            batchnorm=self.batchnorm,
        )

    def fit(self, X, y):
        X, y = check_images_labels(X, y)
        self.classes_, idx = np.unique(y, return_inverse=True)
        data = LabeledDataset(X, idx.astype(np.int64), len(self.classes_))
        mean, std = channel_stats(data)
        spec = small_convnet_spec(X.shape[1:], len(self.classes_), tuple(self.channels), self.hidden,
                                  self.batchnorm, mean, std)
        self.state_, self.history_ = train(self._config(), data, spec=spec)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    @property
    def model_(self):
        check_is_fitted(self, "state_")
        return self.state_

    def decision_function(self, X):
        return classify(self.model_, check_images(X))

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]


class FusionClassifier(ClassifierMixin, BaseEstimator):
    """Late fusion of two fitted :class:`ConvNetClassifier` backbones."""

    def __init__(self, first=None, second=None, epochs=30, lr=0.001, momentum=0.9, batch_size=64, freeze=False,
                 seed=0):
        self.first = first
        self.second = second
        self.epochs = epochs
        self.lr = lr
        self.momentum = momentum
        self.batch_size = batch_size
        self.freeze = freeze
        self.seed = seed

    def fit(self, X, y):
        X, y = check_images_labels(X, y)
        for est in (self.first, self.second):
            check_is_fitted(est, "state_")
        if not np.array_equal(self.first.classes_, self.second.classes_):
            raise ValueError("backbones were fitted on different classes")
        self.classes_ = self.first.classes_
        idx = np.searchsorted(self.classes_, y)
        if np.any(idx >= len(self.classes_)) or not np.array_equal(self.classes_[idx], y):
            raise ValueError("labels not seen by the backbones")
        data = LabeledDataset(X, idx.astype(np.int64), len(self.classes_))
        fused = build_fusion(self.first.state_, self.second.state_, len(self.classes_), seed=self.seed,
                             freeze=self.freeze)
        cfg = TrainConfig.profile("fusion", epochs=self.epochs, lr=self.lr, momentum=self.momentum,
                                  batch_size=self.batch_size, seed=self.seed, eval_robust=False)
        self.model_, self.history_ = finetune_fusion(fused, cfg, data)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return classify(self.model_, check_images(X))

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]


class AdversarialPerturber(TransformerMixin, BaseEstimator):
    """Replaces images by FGSM/PGD adversarial versions against ``model``.

    ``model`` is a fitted classifier estimator or a raw model state.  Without
    labels, the model's own predictions are attacked.
    """

    def __init__(self, model=None, epsilon=0.005, attack="pgd", alpha=None, steps=10, random_init=True, seed=0):
        self.model = model
        self.epsilon = epsilon
        self.attack = attack
        self.alpha = alpha
        self.steps = steps
        self.random_init = random_init
        self.seed = seed

    def _state(self):
        m = self.model
        return getattr(m, "model_", None) or getattr(m, "state_", None) or m

    def fit(self, X, y=None):
        check_images(X)
        if self.attack not in ("fgsm", "pgd"):
            raise ValueError(f"attack must be fgsm or pgd, got {self.attack!r}")
        self.budget_ = PerturbationBudget(self.epsilon, self.alpha, self.steps, self.random_init)
        return self

    def transform(self, X, y=None):
        check_is_fitted(self, "budget_")
        X = check_images(X)
        state = self._state()
        if y is None:
            t = np.argmax(classify(state, X), axis=1)
        else:
            classes = getattr(self.model, "classes_", None)
            t = np.searchsorted(classes, y) if classes is not None else np.asarray(y, dtype=np.int64)
        if self.attack == "fgsm":
            delta = fgsm_delta(state, X, t, self.epsilon)
        else:
            delta = pgd_delta(state, X, t, self.budget_, rng=self.seed)
        return X + delta

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X, y).transform(X, y)
