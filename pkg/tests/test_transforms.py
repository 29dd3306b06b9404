import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.base import clone
from sklearn.pipeline import make_pipeline

from robustlens.transforms import (
    BLUR_SIGMAS,
    MEDIAN_TIMES,
    ColorReverse,
    GaussianBlur,
    MedianFilter,
    TransformSpec,
    blur_grid,
    color_reverse,
    gaussian_blur,
    gaussian_kernel,
    median_filter,
    median_grid,
)

seeds = st.integers(0, 2**31 - 1)


def test_zero_sigma_is_bit_identity(rng):
    x = rng.uniform(size=(2, 3, 9, 9))
    out = gaussian_blur(x, 0.0)
    assert np.array_equal(out, x) and out is not x


@pytest.mark.parametrize("sigma", [0.25, 1.0, 3.5])
def test_constant_image_survives_blur(sigma):
    x = np.full((3, 10, 10), 0.37)
    assert np.allclose(gaussian_blur(x, sigma), x, rtol=0, atol=1e-15)


def test_impulse_response_is_kernel():
    x = np.zeros((1, 15, 15))
    x[0, 7, 7] = 1.0
    out = gaussian_blur(x, 1.0)
    # brute-force tabulation with the math module
    raw = [[math.exp(-(i * i + j * j) / 2.0) for j in range(-3, 4)] for i in range(-3, 4)]
    total = sum(map(sum, raw))
    table = np.array(raw) / total
    assert np.allclose(out[0, 4:11, 4:11], table, rtol=0, atol=1e-15)
    assert out[0, 7, 7] == pytest.approx(1 / total, abs=1e-15)
    assert out[0, 7, 7] == pytest.approx(0.1592, abs=5e-5)
    assert gaussian_kernel(1.0).sum() == pytest.approx(1.0, abs=1e-15)


def test_kernel_validation():
    with pytest.raises(ValueError):
        gaussian_kernel(-0.1)
    with pytest.raises(ValueError):
        gaussian_kernel(1.0, kernel=4)
    with pytest.raises(ValueError):
        gaussian_blur(np.zeros((4, 4)), 1.0)


def test_median_constant_and_outlier():
    flat = np.full((2, 8, 8), 0.6)
    assert np.array_equal(median_filter(flat, times=4), flat)
    spot = flat.copy()
    spot[1, 3, 5] = 0.0
    assert np.array_equal(median_filter(spot, times=1), flat)
    assert np.array_equal(median_filter(spot, times=0), spot)


def test_median_matches_sorted_window_oracle(rng):
    x = rng.uniform(size=(2, 8, 8))
    out = median_filter(x, times=1)
    for c in range(2):
        padded = np.pad(x[c], 2, mode="reflect")
        for i in range(8):
            for j in range(8):
                window = sorted(padded[i : i + 5, j : j + 5].ravel())
                assert out[c, i, j] == window[12]


def test_median_passes_are_sequential(rng):
    x = rng.uniform(size=(1, 2, 12, 12))
    assert np.array_equal(median_filter(x, times=3), median_filter(median_filter(median_filter(x))))


def test_color_reverse_examples():
    x = np.zeros((3, 1, 1))
    assert color_reverse(x)[0, 0, 0] == pytest.approx(0.97, abs=1e-15)
    at_mean = np.array([0.485, 0.456, 0.406]).reshape(3, 1, 1)
    assert np.allclose(color_reverse(at_mean), at_mean, rtol=0, atol=1e-15)
    with pytest.raises(ValueError):
        color_reverse(np.zeros((2, 4, 4)))
    with pytest.raises(ValueError):
        color_reverse(np.zeros((1, 4, 4)), means=(1.5,))


@given(seeds)
def test_color_reverse_is_involution_off_clamp(seed):
    rng = np.random.default_rng(seed)
    # values within 0.4 of each mean never clamp
    x = np.array([0.485, 0.456, 0.406])[:, None, None] + rng.uniform(-0.4, 0.4, size=(3, 5, 5))
    assert np.allclose(color_reverse(color_reverse(x)), x, rtol=0, atol=1e-15)


@given(seeds, st.sampled_from(["blur", "median", "reverse"]))
def test_transforms_keep_unit_range(seed, kind):
    rng = np.random.default_rng(seed)
    x = rng.choice([0.0, 1.0, rng.uniform()], size=(3, 9, 9))
    spec = TransformSpec(kind, sigma=float(rng.uniform(0, 5)), times=int(rng.integers(0, 3)))
    out = spec.apply(x)
    assert out.shape == x.shape and out.min() >= 0 and out.max() <= 1


@given(seeds)
def test_filters_commute_with_channel_offsets(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.2, 0.6, size=(2, 9, 9))
    offset = rng.uniform(-0.15, 0.15, size=(2, 1, 1))
    sigma = float(rng.uniform(0.25, 4))
    assert np.allclose(gaussian_blur(x + offset, sigma), gaussian_blur(x, sigma) + offset, rtol=0, atol=1e-13)
    assert np.allclose(median_filter(x + offset, 2), median_filter(x, 2) + offset, rtol=0, atol=1e-15)


@given(seeds)
def test_blur_commutes_with_horizontal_mirror(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(3, 8, 11))
    sigma = float(rng.uniform(0.25, 5))
    assert np.allclose(gaussian_blur(x[..., ::-1], sigma), gaussian_blur(x, sigma)[..., ::-1], rtol=0, atol=1e-14)


@given(seeds)
def test_median_fixed_points_are_stable(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(1, 10, 10))
    prev = x
    for _ in range(30):
        nxt = median_filter(prev, 1)
        if np.array_equal(nxt, prev):
            break
        prev = nxt
    if np.array_equal(median_filter(prev, 1), prev):
        assert np.array_equal(median_filter(prev, 3), prev)


def test_sweep_grids():
    assert len(BLUR_SIGMAS) == 21 and BLUR_SIGMAS[0] == 0 and BLUR_SIGMAS[-1] == 5.0
    assert np.allclose(np.diff(BLUR_SIGMAS), 0.25)
    assert MEDIAN_TIMES == (0, 1, 2, 3, 4, 5)
    assert [t.label for t in median_grid()][:2] == ["median:0", "median:1"]
    assert blur_grid()[5].label == "blur:1.25"
    with pytest.raises(ValueError):
        TransformSpec("sharpen")
    with pytest.raises(ValueError):
        TransformSpec("blur", sigma=-1)


def test_sklearn_transformers(rng):
    x = rng.uniform(size=(4, 3, 8, 8))
    pipe = make_pipeline(GaussianBlur(sigma=1.5), MedianFilter(times=2), ColorReverse())
    expected = color_reverse(median_filter(gaussian_blur(x, 1.5), 2))
    assert np.array_equal(pipe.fit_transform(x), expected)
    blur = clone(GaussianBlur(sigma=0.75, kernel=5))
    assert blur.get_params() == {"sigma": 0.75, "kernel": 5}
    assert np.array_equal(blur.fit(x).transform(x), gaussian_blur(x, 0.75, kernel=5))
