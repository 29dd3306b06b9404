import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from robustlens.estimators import AdversarialPerturber, ConvNetClassifier, FusionClassifier, check_images

from conftest import small_images

FAST = dict(epochs=3, batch_size=16, lr=0.05, channels=(3, 4), hidden=6)


@pytest.fixture(scope="module")
def fitted():
    data = small_images()
    labels = np.array([10, 20, 30])[data.labels]
    std = ConvNetClassifier(**FAST).fit(data.images, labels)
    adv = ConvNetClassifier(regime="ADV", epsilon=0.02, **FAST).fit(data.images, labels)
    return data.images, labels, std, adv


def test_params_round_trip_through_clone():
    est = ConvNetClassifier(regime="ADV", epochs=4, channels=(8, 8))
    params = est.get_params()
    assert params["regime"] == "ADV" and params["channels"] == (8, 8) and params["lr"] == 0.01
    again = clone(est)
    assert again.get_params() == params and again is not est
    assert ConvNetClassifier().set_params(epochs=7).epochs == 7


def test_fit_predict_with_arbitrary_labels(fitted):
    x, y, std, _ = fitted
    assert std.classes_.tolist() == [10, 20, 30]
    assert set(std.predict(x)) <= {10, 20, 30}
    proba = std.predict_proba(x)
    assert proba.shape == (48, 3) and np.allclose(proba.sum(axis=1), 1)
    assert len(std.history_) == 3 and std.state_.regime == "STD"
    assert 0 <= std.score(x, y) <= 1


def test_fit_is_deterministic(fitted):
    x, y, std, _ = fitted
    again = clone(std).fit(x, y)
    assert again.state_.fingerprint() == std.state_.fingerprint()


def test_unfitted_and_invalid_inputs():
    with pytest.raises(NotFittedError):
        ConvNetClassifier().predict(np.zeros((1, 1, 8, 8)))
    with pytest.raises(ValueError):
        check_images(np.zeros((2, 8, 8)))
    with pytest.raises(ValueError):
        check_images(np.full((1, 1, 2, 2), 2.0))
    with pytest.raises(ValueError):
        ConvNetClassifier(**FAST).fit(np.zeros((3, 1, 8, 8)), [0, 1])


def test_fusion_classifier(fitted):
    x, y, std, adv = fitted
    fused = FusionClassifier(std, adv, epochs=2, lr=0.01).fit(x, y)
    assert fused.model_.regime == "STD+ADV" and fused.predict(x).shape == (48,)
    assert fused.get_params(deep=False)["first"] is std
    with pytest.raises(ValueError):
        FusionClassifier(std, adv, epochs=1).fit(x, y + 1)


def test_perturber_respects_budget(fitted):
    x, y, std, _ = fitted
    pert = AdversarialPerturber(std, epsilon=0.03)
    adv = pert.fit_transform(x, y)
    assert np.max(np.abs(adv - x)) <= 0.03 + 1e-15 and adv.min() >= 0 and adv.max() <= 1
    assert np.mean(std.predict(adv) == y) <= np.mean(std.predict(x) == y)
    fg = AdversarialPerturber(std.state_, epsilon=0.03, attack="fgsm").fit(x).transform(x)
    step = np.abs(fg - x)[(x > 0.03) & (x < 0.97)]
    # zero only where the input gradient vanishes
    assert np.all(np.isclose(step, 0.03, rtol=0, atol=1e-15) | (step == 0)) and step.any()
    with pytest.raises(ValueError):
        AdversarialPerturber(std, attack="cw").fit(x)
