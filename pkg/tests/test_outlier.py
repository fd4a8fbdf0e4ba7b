import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from scipy import ndimage

from sparse_shield.outlier import (
    chebyshev_bound,
    classify_patches,
    dilate,
    erode,
    fit_moments,
    image_fpr_bound,
    mahalanobis,
    model_from_moments,
    refine_mask,
    tune_epsilon,
)

masks = hnp.arrays(bool, hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=9))
kernels = st.sampled_from([1, 3, 5])


def window_oracle(mask, k, op):
    h, w = mask.shape
    r = k // 2
    out = np.zeros_like(mask)
    for i in range(h):
        for j in range(w):
            vals = [mask[a, b] if 0 <= a < h and 0 <= b < w else False
                    for a in range(i - r, i + r + 1) for b in range(j - r, j + r + 1)]
            out[i, j] = op(vals)
    return out


def test_two_points():
    e = np.zeros(4)
    e[0] = 1
    m = fit_moments(np.stack([e, -e]))
    np.testing.assert_allclose(m.mean, 0)
    np.testing.assert_allclose(m.covariance, np.diag([2.0, 0, 0, 0]))
    assert np.all(np.isfinite(m.precision))


def test_identical_points():
    x = np.array([1.0, -2.0, 0.5])
    m = fit_moments(np.tile(x, (5, 1)))
    np.testing.assert_allclose(m.mean, x)
    assert not m.covariance.any()
    assert np.all(np.isfinite(m.precision))
    assert mahalanobis(m, x) == 0.0


def test_moments_match_numpy(rng):
    R = rng.standard_normal((50, 4))
    m = fit_moments(R)
    np.testing.assert_allclose(m.covariance, np.cov(R, rowvar=False), atol=1e-12)


def test_mean_within_monte_carlo_band(rng):
    mu0 = np.array([1.0, -2.0, 0.5])
    L = np.array([[1.0, 0, 0], [0.5, 2.0, 0], [-0.3, 0.2, 0.7]])
    R = mu0 + rng.standard_normal((1000, 3)) @ L.T
    m = fit_moments(R)
    sd = np.sqrt(np.diag(L @ L.T))
    assert np.all(np.abs(m.mean - mu0) <= 5 * sd / np.sqrt(1000))


def test_mahalanobis_cases(rng):
    m = model_from_moments(np.zeros(2), np.eye(2), 10, ridge=0.0)
    assert mahalanobis(m, [0, 0]) == 0.0
    assert mahalanobis(m, [3, 4]) == pytest.approx(25.0)
    B = rng.standard_normal((5, 5))
    S = B @ B.T + np.eye(5)
    mu = rng.standard_normal(5)
    m = model_from_moments(mu, S, 100, ridge=0.0)
    X = rng.standard_normal((7, 5))
    oracle = [(x - mu) @ np.linalg.solve(S, x - mu) for x in X]
    np.testing.assert_allclose(mahalanobis(m, X), oracle, rtol=1e-3)
    with pytest.raises(ValueError):
        mahalanobis(m, np.zeros(4))


def test_chebyshev_values():
    assert chebyshev_bound(4, 10**9, 400.0) == pytest.approx(0.01, abs=1e-6)
    assert chebyshev_bound(3, 10**6, 3.0) == 1.0
    assert chebyshev_bound(2, 10, 50.0) == pytest.approx(2 * (99 + 500) / (100 * 50), abs=1e-15)


def test_tune_single_patch():
    assert tune_epsilon(4, 1, 0.01) == pytest.approx(400.0)


def test_tune_table_row():
    eps = tune_epsilon(48, 64, 0.05)
    assert eps == pytest.approx(48 / (1 - 0.95 ** (1 / 64)), rel=1e-12)
    assert abs(image_fpr_bound(48, 64, eps) - 0.05) < 1e-9


@given(st.integers(1, 200), st.integers(1, 4096), st.floats(1e-6, 0.999))
def test_tune_roundtrip(d, k2, fpr):
    assert abs(image_fpr_bound(d, k2, tune_epsilon(d, k2, fpr)) - fpr) < 1e-9


@given(st.integers(1, 50), st.integers(1, 100), st.floats(0.01, 0.5), st.floats(0.01, 0.4))
def test_tune_monotone(d, k2, a, delta):
    assert tune_epsilon(d, k2, a) > tune_epsilon(d, k2, min(a + delta, 0.99))


def test_tune_rejects():
    for args in [(4, 1, 0.0), (4, 1, 1.0), (0, 1, 0.5), (4, 0, 0.5)]:
        with pytest.raises(ValueError):
            tune_epsilon(*args)


def test_classify_boundary():
    m = model_from_moments(np.zeros(2), np.eye(2), 10, epsilon_sq=25.0, ridge=0.0)
    bits = classify_patches(m, np.array([[0, 0], [3, 4], [3, 3.9]]))
    assert bits.tolist() == [False, True, False]
    with pytest.raises(ValueError):
        classify_patches(m.__class__(m.mean, m.covariance, m.precision, 10), np.zeros((1, 2)))


def test_image_flag_rate_under_bound(rng):
    d, k2, trials = 4, 16, 2000
    m = fit_moments(rng.standard_normal((5000, d))).with_threshold(tune_epsilon(d, k2, 0.05))
    flags = [classify_patches(m, rng.standard_normal((k2, d))).any() for _ in range(trials)]
    assert np.mean(flags) <= 0.05 + 3 * np.sqrt(0.05 * 0.95 / trials)


def test_erode_cases():
    e = erode(np.ones((5, 5), bool), 3)
    assert e[1:-1, 1:-1].all() and not e[0].any() and not e[:, -1].any()
    lone = np.zeros((5, 5), bool)
    lone[2, 2] = True
    assert not erode(lone, 3).any()


def test_dilate_cases():
    m = np.zeros((5, 5), bool)
    m[0, 4] = True
    d = dilate(m, 3)
    assert d.sum() == 4 and d[:2, 3:].all()
    assert not dilate(np.zeros((3, 3), bool)).any()


@given(masks, kernels)
def test_erode_matches_oracles(m, k):
    got = erode(m, k)
    assert np.array_equal(got, window_oracle(m, k, all))
    assert np.array_equal(got, ndimage.binary_erosion(m, np.ones((k, k)), border_value=0))


@given(masks, kernels)
def test_dilate_matches_oracles(m, k):
    got = dilate(m, k)
    assert np.array_equal(got, window_oracle(m, k, any))
    assert np.array_equal(got, ndimage.binary_dilation(m, np.ones((k, k))))


def test_opening_keeps_block_drops_specks():
    m = np.zeros((9, 9), bool)
    m[2:7, 2:7] = True
    assert np.array_equal(refine_mask(m), m)
    specks = np.zeros((9, 9), bool)
    specks[::4, ::4] = True
    assert not refine_mask(specks).any()


@given(masks, kernels)
def test_opening_idempotent(m, k):
    once = refine_mask(m, k)
    assert np.array_equal(refine_mask(once, k), once)


def test_separate_dilation_kernel():
    m = np.zeros((7, 7), bool)
    m[3, 3] = True
    assert refine_mask(m, 1, 3).sum() == 9
    with pytest.raises(ValueError):
        erode(m, 2)
