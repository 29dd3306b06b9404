import numpy as np
import pytest

from robustlens import autodiff as ad
from robustlens.fusion import FusionModel, build_fusion, finetune_fusion
from robustlens.nn import classify, init_state, softmax
from robustlens.training import TrainConfig

from conftest import small_images, tiny_spec


def features(model, x):
    tape = ad.Tape()
    return model.feature_tensor(tape, tape.constant(x)).data


def test_logits_are_head_over_concatenated_features(rng):
    a, b = init_state(tiny_spec(), 1, regime="STD"), init_state(tiny_spec(), 2, regime="ADV")
    fused = build_fusion(a, b, seed=3)
    x = rng.uniform(size=(5, 2, 8, 8))
    cat = np.concatenate([features(a, x), features(b, x)], axis=1)
    expected = cat @ fused.params["head.weight"].T + fused.params["head.bias"]
    assert np.allclose(classify(fused, x), expected, rtol=0, atol=1e-13)
    assert fused.params["head.weight"].shape == (3, 12)
    assert np.all(np.abs(fused.params["head.weight"]) <= 1 / np.sqrt(12))


def test_self_fusion_duplicates_features(rng):
    a = init_state(tiny_spec(), 1)
    fused = build_fusion(a, a, seed=0)
    x = rng.uniform(size=(3, 2, 8, 8))
    tape = ad.Tape()
    feat = fused.features_tensor(tape, tape.constant(x)).data
    assert np.array_equal(feat[:, :6], feat[:, 6:])


def test_zero_head_gives_uniform_softmax(rng):
    fused = build_fusion(init_state(tiny_spec(), 1), init_state(tiny_spec(), 2), init="zeros")
    p = softmax(classify(fused, rng.uniform(size=(4, 2, 8, 8))))
    assert np.array_equal(p, np.full((4, 3), 1 / 3))


def test_frozen_backbones_stay_bit_identical():
    a, b = init_state(tiny_spec(), 1), init_state(tiny_spec(), 2)
    fused = build_fusion(a, b, seed=0, freeze=True)
    assert fused.trainable == ["head.weight", "head.bias"]
    head = fused.params["head.weight"].copy()
    tuned, hist = finetune_fusion(fused, TrainConfig(epochs=2, lr=0.05, eval_robust=False), small_images())
    for name, value in a.params.items():
        assert np.array_equal(tuned.a.params[name], value)
    for name, value in b.params.items():
        assert np.array_equal(tuned.b.params[name], value)
    assert not np.array_equal(tuned.params["head.weight"], head)
    assert len(hist) == 2


def test_unfrozen_finetune_moves_backbones():
    a = init_state(tiny_spec(), 1)
    fused = build_fusion(a, init_state(tiny_spec(), 2), seed=0)
    tuned, _ = finetune_fusion(fused, TrainConfig(epochs=1, lr=0.05, eval_robust=False), small_images())
    assert not np.array_equal(tuned.a.params["0.weight"], a.params["0.weight"])


def test_zero_learning_rate_is_a_no_op():
    fused = build_fusion(init_state(tiny_spec(), 1), init_state(tiny_spec(), 2), seed=0)
    before = fused.fingerprint()
    tuned, hist = finetune_fusion(fused, TrainConfig(epochs=3, lr=0.0, eval_robust=False), small_images())
    assert tuned.fingerprint() == before
    assert len({h.train_loss for h in hist}) == 1


def test_incompatible_backbones_rejected():
    a = init_state(tiny_spec(), 1)
    with pytest.raises(ValueError):
        build_fusion(a, init_state(tiny_spec(size=10), 2))
    with pytest.raises(ValueError):
        build_fusion(a, a, init="normal")
    with pytest.raises(ValueError):
        finetune_fusion(build_fusion(a, a), TrainConfig(epochs=1), small_images().subset([]))


def test_regime_tag_and_copy_independence():
    fused = build_fusion(init_state(tiny_spec(), 1, regime="STD"), init_state(tiny_spec(), 2, regime="ADV"))
    assert isinstance(fused, FusionModel) and fused.regime == "STD+ADV"
    clone = fused.copy()
    clone.params["head.weight"][:] = 0
    assert clone.fingerprint() != fused.fingerprint()
