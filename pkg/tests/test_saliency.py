import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from robustlens import autodiff as ad
from robustlens.autodiff import finite_difference_gradient
from robustlens.nn import LayerSpec, ModelSpec, ModelState, classify, init_state, linear_spec, softmax, zero_state
from robustlens.saliency import (
    METHODS,
    AscentConfig,
    FunctionModel,
    SaliencyError,
    SaliencyMap,
    activation_maximization,
    compute_map,
    filter_objective,
    gradient_ascent,
    guided_backprop,
    integrated_gradient,
    load_map,
    loss_grad,
    render_map,
    save_map,
    smoothgrad,
    softmax_weighted_grad,
    vanilla_grad,
)

from conftest import tiny_spec


def linear_model(w):
    w = np.asarray(w, dtype=float)
    return ModelState(linear_spec(w.shape[1], w.shape[0]), {"0.weight": w, "0.bias": np.zeros(w.shape[0])})


def scalar_model(fn):
    return FunctionModel(lambda tape, x: fn(x), (1,), 1)


def test_vanilla_on_linear_model_is_weight_row(rng):
    w = rng.normal(size=(3, 5))
    model = linear_model(w)
    for t in range(3):
        for x in rng.normal(size=(4, 5)):
            assert np.array_equal(vanilla_grad(model, x, t).values, w[t])


def test_vanilla_on_zero_model_is_zero(rng):
    smap = vanilla_grad(zero_state(tiny_spec()), rng.uniform(size=(2, 8, 8)), 1)
    assert smap.shape == (2, 8, 8) and not np.any(smap.values)


def test_vanilla_matches_finite_differences(rng):
    model = init_state(tiny_spec(), 4)
    x = rng.uniform(size=(2, 8, 8))
    g = vanilla_grad(model, x, 2).values
    fd = finite_difference_gradient(lambda v: classify(model, v)[2], x, 1e-5)
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-4


def test_loss_grad_linear_example():
    smap = loss_grad(linear_model([[1.0, -1.0], [-1.0, 1.0]]), np.array([0.5, 0.5]), 0)
    assert np.allclose(smap.values, [-1.0, 1.0], rtol=0, atol=1e-15)


def test_loss_grad_zero_model(rng):
    assert not np.any(loss_grad(zero_state(tiny_spec()), rng.uniform(size=(2, 8, 8)), 0).values)


def test_loss_decomposition_identity(rng):
    for seed in range(10):
        model = init_state(tiny_spec(batchnorm=seed % 2 == 1), seed)
        x = rng.uniform(size=(3, 2, 8, 8))
        t = rng.integers(0, 3, size=3)
        lg = loss_grad(model, x, t).values
        vg = vanilla_grad(model, x, t).values
        # term-by-term oracle: softmax weights times per-class logit gradients
        p = softmax(classify(model, x))
        mix = sum(p[:, k, None, None, None] * vanilla_grad(model, x, k).values for k in range(3))
        assert np.max(np.abs(lg - (-vg + mix))) < 1e-9
        assert np.max(np.abs(softmax_weighted_grad(model, x) - mix)) < 1e-12


def test_guided_scalar_relu_examples():
    relu = scalar_model(ad.relu)
    neg = scalar_model(lambda x: -ad.relu(x))
    assert guided_backprop(relu, [2.0], 0).values.tolist() == [1.0]
    assert guided_backprop(relu, [-1.0], 0).values.tolist() == [0.0]
    assert vanilla_grad(neg, [2.0], 0).values.tolist() == [-1.0]
    assert guided_backprop(neg, [2.0], 0).values.tolist() == [0.0]


def test_guided_equals_vanilla_without_relus(rng):
    layers = (LayerSpec("conv", out=3, kernel=3), LayerSpec("maxpool", kernel=2, stride=2), LayerSpec("flatten"),
              LayerSpec("linear", out=4))
    spec = ModelSpec((2, 6, 6), layers, 4)
    model = init_state(spec, 0)
    for _ in range(5):
        x = rng.uniform(size=(2, 6, 6))
        assert np.array_equal(guided_backprop(model, x, 1).values, vanilla_grad(model, x, 1).values)


def test_guided_depends_on_parameters(rng):
    x = rng.uniform(size=(2, 8, 8))
    a = guided_backprop(init_state(tiny_spec(), 1), x, 0).values
    b = guided_backprop(init_state(tiny_spec(), 2), x, 0).values
    assert not np.array_equal(a, b)


def test_smoothgrad_zero_sigma_bit_equals_vanilla(tiny_model, tiny_batch):
    x, y = tiny_batch
    for n in (1, 7):
        assert np.array_equal(smoothgrad(tiny_model, x, y, sigma=0.0, n=n).values, vanilla_grad(tiny_model, x, y).values)


def test_smoothgrad_linear_model_is_constant(rng):
    w = rng.normal(size=(2, 4))
    smap = smoothgrad(linear_model(w), rng.uniform(size=4), 1, sigma=0.5, n=9)
    assert np.allclose(smap.values, w[1], rtol=0, atol=1e-14)


def test_smoothgrad_square_clt_bound():
    sigma, n = 0.1, 10000
    smap = smoothgrad(scalar_model(ad.square), [1.0], 0, sigma=sigma, n=n, seed=3)
    assert abs(smap.values[0] - 2.0) < 4 * (2 * sigma / np.sqrt(n))


def test_smoothgrad_seeded(tiny_model, tiny_batch):
    x, y = tiny_batch
    a = smoothgrad(tiny_model, x, y, n=4, seed=1).values
    assert np.array_equal(a, smoothgrad(tiny_model, x, y, n=4, seed=1).values)
    assert not np.array_equal(a, smoothgrad(tiny_model, x, y, n=4, seed=2).values)
    with pytest.raises(SaliencyError):
        smoothgrad(tiny_model, x, y, sigma=-1)


def test_integrated_degenerate_paths(tiny_model, tiny_batch, rng):
    x, y = tiny_batch
    assert not np.any(integrated_gradient(tiny_model, x, y, baseline=x).values)
    for xi, yi in zip(x, y):
        raw = integrated_gradient(tiny_model, xi, yi, baseline=xi, variant="raw").values
        assert np.array_equal(raw, vanilla_grad(tiny_model, xi, yi).values)
    w = rng.normal(size=(3, 6))
    for m in (1, 5, 64):
        lin = integrated_gradient(linear_model(w), rng.uniform(size=6), 2, steps=m, variant="raw").values
        assert np.allclose(lin, w[2], rtol=0, atol=1e-14)


def test_integrated_completeness(rng):
    model = init_state(tiny_spec(), 6)
    x = rng.uniform(size=(2, 8, 8))
    smap = integrated_gradient(model, x, 1, steps=512)
    gap = classify(model, x)[1] - classify(model, np.zeros_like(x))[1]
    assert abs(smap.values.sum() - gap) / abs(gap) < 0.01


def test_integrated_validation(tiny_model, tiny_batch):
    x, y = tiny_batch
    for kw in (dict(steps=0), dict(variant="other"), dict(baseline=np.zeros((3, 3)))):
        with pytest.raises((SaliencyError, ValueError)):
            integrated_gradient(tiny_model, x, y, **kw)


def test_map_metadata_and_validation(tiny_model, tiny_batch):
    x, y = tiny_batch
    for method in METHODS:
        smap = compute_map(method, tiny_model, x[0], int(y[0]))
        assert smap.shape == x[0].shape and smap.method == method and smap.model_id == tiny_model.model_id
    assert "param.sigma=0.15" in compute_map("smoothgrad", tiny_model, x[0], 0).metadata()
    with pytest.raises(SaliencyError):
        compute_map("deconvnet", tiny_model, x, y)
    with pytest.raises(SaliencyError):
        vanilla_grad(tiny_model, x, 3)
    with pytest.raises(SaliencyError):
        vanilla_grad(tiny_model, x[:, :1], 0)
    with pytest.raises(SaliencyError):
        SaliencyMap(np.array([np.nan]), "vanilla", "m", 0)


def test_maps_are_read_only(tiny_model, tiny_batch):
    x, y = tiny_batch
    before = tiny_model.fingerprint()
    for method in METHODS:
        compute_map(method, tiny_model, x, y)
    assert tiny_model.fingerprint() == before


def test_ascent_linear_objective_hits_box_corners(rng):
    w = rng.normal(size=12)
    x, traj = gradient_ascent(lambda tape, xt: (xt * tape.constant(w)).sum(), rng.uniform(size=12), 0.5, 20)
    assert np.array_equal(x, (w > 0).astype(float))
    assert traj[-1] == pytest.approx(w[w > 0].sum())


@given(st.integers(0, 2**31 - 1))
def test_ascent_quadratic_converges_to_center(seed):
    rng = np.random.default_rng(seed)
    c = rng.uniform(0.05, 0.95, size=6)

    def objective(tape, xt):
        return -ad.square(xt - tape.constant(c)).sum()

    x, traj = gradient_ascent(objective, rng.uniform(size=6), 0.1, 200, clamp=None)
    assert np.max(np.abs(x - c)) < 1e-3
    assert np.all(np.diff(traj) >= 0)


def test_ascent_on_network_is_monotone_at_default_step(rng):
    model = init_state(tiny_spec(), 2)
    for layer, filt in ((0, 0), (0, 2), (3, 1), (7, 4)):
        res = activation_maximization(model, AscentConfig(layer, filt, iterations=30, start="noise"))
        assert res.x.min() >= 0 and res.x.max() <= 1
        assert np.all(np.diff(res.trajectory) >= -1e-12)
        assert res.trajectory[-1] >= res.trajectory[0]


def test_ascent_zero_start_restarts_with_warning():
    model = zero_state(tiny_spec())
    with pytest.warns(RuntimeWarning):
        res = activation_maximization(model, AscentConfig(0, 0, iterations=2))
    assert res.restarted


def test_ascent_config_validation(tiny_model):
    with pytest.raises(ValueError):
        AscentConfig(0, 0, iterations=0)
    with pytest.raises(ValueError):
        AscentConfig(0, 0, start="ones")
    with pytest.raises(ValueError):
        filter_objective(tiny_model, 0, 3)
    with pytest.raises(ValueError):
        filter_objective(tiny_model, 20, 0)


def test_render_degenerate_maps():
    zero = np.zeros((3, 4, 5))
    assert np.all(render_map(zero, "signed") == 128)
    assert np.all(render_map(zero, "absolute") == 0)
    assert render_map(zero, "signed").shape == (4, 15, 3)


@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
def test_render_symmetries(seed, scale):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(2, 5, 5))
    signed = render_map(v, "signed")
    flipped = render_map(-v, "signed")
    assert np.array_equal(flipped[..., 0], signed[..., 2]) and np.array_equal(flipped[..., 1], signed[..., 1])
    for mode in ("signed", "absolute"):
        assert np.array_equal(render_map(v * scale, mode), render_map(v, mode))
    absolute = render_map(v, "absolute")
    i, j = np.unravel_index(np.argmax(np.max(np.abs(v), axis=0)), (5, 5))
    assert absolute[i, j] == 255


def test_render_rejects_bad_input():
    with pytest.raises(SaliencyError):
        render_map(np.array([[np.inf]]))
    with pytest.raises(SaliencyError):
        render_map(np.zeros((2, 2)), "rainbow")


def test_map_save_load_round_trip(tmp_path, tiny_model, tiny_batch):
    x, y = tiny_batch
    smap = smoothgrad(tiny_model, x[:2], y[:2], n=3)
    path = save_map(smap, tmp_path / "m.rlns")
    back = load_map(path)
    assert np.array_equal(back.values, smap.values)
    assert (back.method, back.model_id, back.label) == ("smoothgrad", tiny_model.model_id, [0, 1])
    assert back.params["n"] == "3"
