"""scikit-learn compatible wrappers around the training, quantization and
preprocessing code, so the pieces drop into pipelines and model selection."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .fixedpoint import QFormat, RoundingStrategy, from_fixed_array
from .frames import preprocess_frame
from .nn import build_lwdd, predict_logits
from .training import AugmentationConfig, LabeledDataset, TrainConfig, augment_batch, train


def check_images(X, side: int = 28) -> np.ndarray:
    """Accept (n, side, side) or flattened (n, side*side) byte images."""
    X = check_array(X, allow_nd=True, dtype=None, ensure_2d=False)
    if X.ndim == 2 and X.shape[1] == side * side:
        X = X.reshape(-1, side, side)
    if X.ndim != 3 or X.shape[1:] != (side, side):
        raise ValueError(f"expected images of shape (n, {side}, {side}) or (n, {side * side}), got {X.shape}")
    if X.size and (X.min() < 0 or X.max() > 255):
        raise ValueError("pixel values must lie in [0, 255]")
    return np.rint(X).astype(np.uint8) if X.dtype != np.uint8 else X


class LWDDClassifier(ClassifierMixin, BaseEstimator):
    """Float LWDD network trained with on-the-fly augmentation."""

    def __init__(self, num_classes=10, epochs=10, batch_size=32, learning_rate=0.02,
                 momentum=0.9, lr_decay=0.8, augment=True, random_state=0):
        self.num_classes = num_classes
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.lr_decay = lr_decay
        self.augment = augment
        self.random_state = random_state

    def fit(self, X, y):
        X = check_images(X)
        y = np.asarray(y, dtype=np.int64)
        self.config_ = build_lwdd(self.num_classes)
        aug = AugmentationConfig() if self.augment else AugmentationConfig.identity()
        cfg = TrainConfig(self.epochs, self.batch_size, self.learning_rate, self.momentum,
                          int(self.random_state or 0), self.lr_decay)
        self.weights_, self.history_ = train(self.config_, LabeledDataset(X, y), aug, cfg)
        self.classes_ = np.arange(self.num_classes)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "weights_")
        return predict_logits(self.config_, self.weights_, check_images(X))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]


class FixedPointClassifier(ClassifierMixin, BaseEstimator):
    """Fixed-point twin of a fitted float classifier.

    ``fit`` derives the reduction profile (calibrating on X unless the
    profile is worst-case) and quantizes the weights; ``predict`` runs the
    bit-exact integer engine.
    """

    def __init__(self, estimator=None, frac_bits=12, strategy="at-end", profile="percent:0.05"):
        self.estimator = estimator
        self.frac_bits = frac_bits
        self.strategy = strategy
        self.profile = profile

    def fit(self, X=None, y=None):
        from .quantization import make_profile, parse_margin, quantize

        if self.estimator is None:
            raise ValueError("FixedPointClassifier needs a fitted float estimator")
        check_is_fitted(self.estimator, "weights_")
        RoundingStrategy.parse(self.strategy)
        model, weights = self.estimator.config_, self.estimator.weights_
        calib = None
        if parse_margin(self.profile)[0] != "worst-case":
            if X is None:
                raise ValueError(f"profile {self.profile!r} needs calibration images")
            calib = check_images(X)
        self.profile_ = make_profile(model, weights, self.profile, calib)
        self.quantized_ = quantize(model, weights, self.profile_, QFormat(self.frac_bits))
        self.classes_ = getattr(self.estimator, "classes_", np.arange(model.num_outputs))
        return self

    def _run(self, X):
        from .engine import infer_fxp_batch

        check_is_fitted(self, "quantized_")
        return infer_fxp_batch(self.quantized_, check_images(X), self.strategy)

    def decision_function(self, X):
        logits, _ = self._run(X)
        return from_fixed_array(logits, self.quantized_.fmt)

    def predict(self, X):
        logits, _ = self._run(X)
        return self.classes_[np.argmax(logits, axis=1)]

    def overflow_counts(self, X) -> np.ndarray:
        return self._run(X)[1]

    def mismatch_rate(self, X) -> float:
        """Share of images where the fixed-point class differs from the float one."""
        return float(np.mean(self.predict(X) != self.estimator.predict(X)))


class FramePreprocessor(TransformerMixin, BaseEstimator):
    """(n, 240, 320, 3) camera frames -> (n, 28, 28) byte digits."""

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        X = check_array(X, allow_nd=True, dtype=None, ensure_2d=False)
        if X.ndim == 3 and X.shape[-1] == 3:  # a single frame
            X = X[None]
        return np.stack([preprocess_frame(np.asarray(f, dtype=np.uint8)) for f in X])


class DigitAugmenter(TransformerMixin, BaseEstimator):
    """Deterministic augmentation: image i of every transform call uses seed (random_state, i)."""

    def __init__(self, invert=True, max_rotation_deg=10.0, max_resize_px=4,
                 max_intensity_shift=80, max_noise_fraction=0.10, random_state=0):
        self.invert = invert
        self.max_rotation_deg = max_rotation_deg
        self.max_resize_px = max_resize_px
        self.max_intensity_shift = max_intensity_shift
        self.max_noise_fraction = max_noise_fraction
        self.random_state = random_state

    def fit(self, X, y=None):
        self.config_ = AugmentationConfig(self.invert, self.max_rotation_deg, self.max_resize_px,
                                          self.max_intensity_shift, self.max_noise_fraction)
        return self

    def transform(self, X):
        check_is_fitted(self, "config_")
        X = check_images(X)
        seeds = [(int(self.random_state or 0), i) for i in range(len(X))]
        return augment_batch(X, self.config_, seeds) if len(X) else X
