import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from robustlens.attacks import (
    AttackError,
    PerturbationBudget,
    fgsm,
    fit_box,
    is_adversarial,
    pgd,
    project_linf,
)
from robustlens.autodiff import finite_difference_gradient
from robustlens.nn import ModelState, classify, init_state, linear_spec, softmax_cross_entropy, zero_state

from conftest import tiny_spec


def linear_model(w, b=None):
    w = np.asarray(w, dtype=float)
    return ModelState(linear_spec(w.shape[1], w.shape[0]), {"0.weight": w, "0.bias": np.zeros(w.shape[0]) if b is None else b})


def test_budget_validation_and_defaults():
    b = PerturbationBudget(0.01)
    assert b.alpha == 0.0025 and b.steps == 10 and b.random_init
    for bad in (dict(epsilon=-1), dict(epsilon=0.1, alpha=-1), dict(epsilon=0.1, steps=0), dict(epsilon=0.1, norm="l2")):
        with pytest.raises(ValueError):
            PerturbationBudget(**bad)


def test_fgsm_linear_example():
    model = linear_model([[1.0, -1.0], [-1.0, 1.0]])
    x = np.array([0.5, 0.5])
    fd = finite_difference_gradient(lambda v: softmax_cross_entropy(classify(model, v), 0)[0], x)
    assert np.allclose(fd, [-1.0, 1.0], atol=1e-9)
    res = fgsm(model, x, 0, 0.1)
    assert np.allclose(res.delta, [-0.1, 0.1], rtol=0, atol=1e-15)


def test_fgsm_zero_budget(tiny_model, tiny_batch):
    x, y = tiny_batch
    res = fgsm(tiny_model, x, y, 0.0)
    assert not np.any(res.delta)
    assert np.array_equal(res.succeeded, np.argmax(classify(tiny_model, x), axis=1) != y)


def test_fgsm_stationary_point_is_noop(rng):
    model = zero_state(tiny_spec())
    res = fgsm(model, rng.uniform(size=(2, 8, 8)), 1, 0.3)
    assert not np.any(res.delta)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_fgsm_non_finite_rejected():
    model = linear_model([[np.inf, 0.0], [0.0, 1.0]])
    with pytest.raises(AttackError):
        fgsm(model, np.array([0.5, 0.5]), 0, 0.1)


def test_project_linf_examples():
    assert project_linf(np.array([0.3, -0.2]), 0.25).tolist() == [0.25, -0.2]
    d = np.array([0.1, -0.05])
    assert np.array_equal(project_linf(d, 0.2), d)


@given(hnp.arrays(np.float64, st.integers(1, 30), elements=st.floats(-2, 2)), st.floats(0, 1))
def test_projection_idempotent(delta, eps):
    once = project_linf(delta, eps)
    assert np.array_equal(project_linf(once, eps), once)
    assert np.all(np.abs(once) <= eps)


@given(
    hnp.arrays(np.float64, st.integers(1, 40), elements=st.sampled_from([0.0, 1.0, 0.5, 1e-17, 1 - 1e-16, 0.3])),
    hnp.arrays(np.float64, 40, elements=st.floats(-1, 1)),
    st.floats(0, 0.5),
)
def test_fit_box_exact(x, delta, eps):
    d = fit_box(x, delta[: x.size], eps)
    assert np.all(np.abs(d) <= eps)
    assert np.all(x + d >= 0) and np.all(x + d <= 1)


def test_pgd_one_step_equals_fgsm_on_random_models(rng):
    for seed in range(20):
        model = init_state(tiny_spec(), seed)
        x = rng.uniform(size=(3, 2, 8, 8))
        y = rng.integers(0, 3, size=3)
        eps = float(rng.uniform(0.01, 0.1))
        p = pgd(model, x, y, PerturbationBudget(eps, alpha=eps * rng.uniform(1, 3), steps=1, random_init=False))
        f = fgsm(model, x, y, eps)
        assert np.array_equal(p.delta, f.delta)


def test_pgd_zero_step_keeps_initialization(tiny_model, tiny_batch):
    x, y = tiny_batch
    budget = PerturbationBudget(0.05, alpha=0.0, steps=5)
    res = pgd(tiny_model, x, y, budget, rng=11)
    init = fit_box(x, np.random.default_rng(11).uniform(-0.05, 0.05, size=x.shape), 0.05)
    assert np.array_equal(res.delta, init)
    res = pgd(tiny_model, x, y, PerturbationBudget(0.05, alpha=0.0, steps=5, random_init=False))
    assert not np.any(res.delta)


def test_pgd_loss_non_decreasing_on_linear_models(rng):
    for _ in range(30):
        w = rng.normal(size=(2, 6))
        model = linear_model(w)
        x = rng.uniform(size=6)
        t = int(rng.integers(2))
        budget = PerturbationBudget(0.2, alpha=0.03, steps=10, random_init=False)
        # replay the iterates and evaluate the loss directly
        delta = np.zeros_like(x)
        losses = [softmax_cross_entropy(classify(model, x), t)[0]]
        for _ in range(budget.steps):
            g = finite_difference_gradient(lambda v: softmax_cross_entropy(classify(model, v), t)[0], x + delta)
            delta = fit_box(x, project_linf(delta + budget.alpha * np.sign(g), 0.2), 0.2)
            losses.append(softmax_cross_entropy(classify(model, x + delta), t)[0])
        assert np.all(np.diff(losses) >= -1e-12)
        res = pgd(model, x, t, budget)
        assert np.allclose(res.delta, delta, atol=1e-15)
        assert res.final_loss == pytest.approx(losses[-1], abs=1e-12)


def test_is_adversarial_examples(tiny_model, tiny_batch):
    x, y = tiny_batch
    pred = np.argmax(classify(tiny_model, x), axis=1)
    zero = np.zeros_like(x)
    assert not np.any(is_adversarial(tiny_model, x, zero, pred))
    wrong = (pred + 1) % 3
    assert np.all(is_adversarial(tiny_model, x, zero, wrong))
    assert is_adversarial(tiny_model, x[0], zero[0], int(pred[0])) is False
    with pytest.raises(ValueError):
        is_adversarial(tiny_model, x, zero[:2], y)


def test_successful_pgd_is_adversarial(tiny_model, rng):
    x = rng.uniform(size=(20, 2, 8, 8))
    y = np.argmax(classify(tiny_model, x), axis=1)
    res = pgd(tiny_model, x, y, PerturbationBudget(0.3, steps=20), rng=0)
    assert res.succeeded.any()
    direct = np.argmax(classify(tiny_model, x + res.delta), axis=1) != y
    assert np.array_equal(res.succeeded, direct)
    assert np.array_equal(is_adversarial(tiny_model, x, res.delta, y), direct)


def test_attacks_leave_model_untouched(tiny_model, tiny_batch):
    x, y = tiny_batch
    before, logits = tiny_model.fingerprint(), classify(tiny_model, x)
    fgsm(tiny_model, x, y, 0.1)
    pgd(tiny_model, x, y, PerturbationBudget(0.1), rng=0)
    assert tiny_model.fingerprint() == before
    assert np.array_equal(classify(tiny_model, x), logits)


def test_seeded_random_init_reproducible(tiny_model, tiny_batch):
    x, y = tiny_batch
    b = PerturbationBudget(0.05)
    assert np.array_equal(pgd(tiny_model, x, y, b, rng=5).delta, pgd(tiny_model, x, y, b, rng=5).delta)
    assert not np.array_equal(pgd(tiny_model, x, y, b, rng=5).delta, pgd(tiny_model, x, y, b, rng=6).delta)


@given(st.floats(0, 0.3), st.integers(0, 2**31 - 1))
def test_budget_respected(eps, seed):
    rng = np.random.default_rng(seed)
    model = init_state(tiny_spec(), seed % 5)
    x = rng.choice([0.0, 1.0, 0.5, 0.999999], size=(2, 2, 8, 8))
    y = rng.integers(0, 3, size=2)
    for res in (fgsm(model, x, y, eps), pgd(model, x, y, PerturbationBudget(eps, steps=3), rng=seed)):
        assert np.all(np.abs(res.delta) <= eps)
        assert np.all(x + res.delta >= 0) and np.all(x + res.delta <= 1)
