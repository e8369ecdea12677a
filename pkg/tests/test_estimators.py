import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline

from fxpcnn.estimators import (
    DigitAugmenter,
    FixedPointClassifier,
    FramePreprocessor,
    LWDDClassifier,
    check_images,
)
from fxpcnn.training import AugmentationConfig, augment


@pytest.fixture(scope="module")
def toy():
    rng = np.random.default_rng(0)
    X = rng.integers(0, 256, size=(48, 28, 28), dtype=np.uint8)
    y = rng.integers(0, 10, size=48)
    return X, y


@pytest.fixture(scope="module")
def fitted(toy):
    X, y = toy
    return LWDDClassifier(epochs=1, batch_size=16).fit(X, y)


def test_params_and_clone():
    clf = LWDDClassifier(epochs=3, learning_rate=0.01)
    assert clf.get_params()["epochs"] == 3
    c2 = clone(clf)
    assert c2.get_params() == clf.get_params()
    fx = FixedPointClassifier(clf, frac_bits=10, strategy="per-operation")
    assert clone(fx).get_params(deep=False)["frac_bits"] == 10
    assert "estimator__epochs" in fx.get_params(deep=True)
    assert DigitAugmenter(max_rotation_deg=5).set_params(random_state=3).random_state == 3


def test_check_images():
    flat = np.zeros((2, 784))
    assert check_images(flat).shape == (2, 28, 28)
    with pytest.raises(ValueError):
        check_images(np.zeros((2, 10)))
    with pytest.raises(ValueError):
        check_images(np.full((1, 28, 28), 256.0))


def test_float_classifier(fitted, toy):
    X, _ = toy
    pred = fitted.predict(X)
    assert pred.shape == (48,) and set(pred) <= set(range(10))
    assert fitted.decision_function(X[:3]).shape == (3, 10)
    assert 0 <= fitted.score(X, toy[1]) <= 1
    with pytest.raises(NotFittedError):
        LWDDClassifier().predict(X)


def test_fixed_point_classifier(fitted, toy):
    X, _ = toy
    fx = FixedPointClassifier(fitted, frac_bits=20, strategy="at-end", profile="percent:0.05+fit").fit(X)
    assert fx.mismatch_rate(X) == 0.0
    assert fx.overflow_counts(X).sum() == 0
    wc = FixedPointClassifier(fitted, frac_bits=12, profile="worst-case").fit()
    assert wc.overflow_counts(X).sum() == 0
    np.testing.assert_allclose(fx.decision_function(X[:5]) * np.prod([r.M for r in fx.profile_.layers]),
                               fitted.decision_function(X[:5]), rtol=1e-3, atol=1e-2)
    cal = FixedPointClassifier(fitted, frac_bits=12, profile="percent:0.1").fit(X)
    assert cal.profile_.method == "percent"
    with pytest.raises(ValueError):
        FixedPointClassifier(fitted, profile="three-sigma").fit()
    with pytest.raises(ValueError):
        FixedPointClassifier(fitted, strategy="stochastic").fit()
    with pytest.raises(ValueError):
        FixedPointClassifier().fit(X)


def test_frame_preprocessor_in_pipeline(fitted):
    frames = np.random.default_rng(2).integers(0, 256, size=(3, 240, 320, 3), dtype=np.uint8)
    pipe = make_pipeline(FramePreprocessor(), fitted)
    assert pipe.predict(frames).shape == (3,)
    assert FramePreprocessor().fit_transform(frames[0]).shape == (1, 28, 28)


def test_augmenter(toy):
    X, _ = toy
    aug = DigitAugmenter(random_state=4).fit(X)
    out = aug.transform(X[:3])
    np.testing.assert_array_equal(out[1], augment(X[1], AugmentationConfig(), (4, 1)))
    np.testing.assert_array_equal(out, aug.transform(X[:3]))
