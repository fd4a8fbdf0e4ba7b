import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.fft import dctn

from sparse_shield.dct import (
    build_dct_basis,
    extract_dct,
    inverse_dct,
    suppress,
    upsample_mask,
    zigzag_order,
)

# standard JPEG zigzag for 8x8 blocks (row-major positions)
JPEG_ZIGZAG_8 = [
    0, 1, 8, 16, 9, 2, 3, 10, 17, 24, 32, 25, 18, 11, 4, 5,
    12, 19, 26, 33, 40, 48, 41, 34, 27, 20, 13, 6, 7, 14, 21, 28,
    35, 42, 49, 56, 57, 50, 43, 36, 29, 22, 15, 23, 30, 37, 44, 51,
    58, 59, 52, 45, 38, 31, 39, 46, 53, 60, 61, 54, 47, 55, 62, 63,
]


def direct_coeff(block, u, v):
    """Orthonormal 2-D DCT-II coefficient by explicit double sum."""
    P = block.shape[0]
    a = lambda k: np.sqrt(1 / P) if k == 0 else np.sqrt(2 / P)
    i = np.arange(P)
    cu = np.cos((2 * i + 1) * u * np.pi / (2 * P))
    cv = np.cos((2 * i + 1) * v * np.pi / (2 * P))
    return a(u) * a(v) * np.sum(block * np.outer(cu, cv))


def test_basis_p1():
    assert build_dct_basis(1).basis.tolist() == [[1.0]]


def test_dc_row_p4():
    np.testing.assert_allclose(build_dct_basis(4).basis[0], np.full(16, 0.25))


@pytest.mark.parametrize("P", [4, 8])
def test_orthonormal(P):
    B = build_dct_basis(P).basis
    assert np.abs(B @ B.T - np.eye(P * P)).max() < 1e-5


@pytest.mark.parametrize("P", [2, 4, 8])
def test_basis_matches_direct_sum(P, rng):
    block = rng.random((P, P))
    B = build_dct_basis(P).basis
    got = (B @ block.ravel()).reshape(P, P)
    want = np.array([[direct_coeff(block, u, v) for v in range(P)] for u in range(P)])
    np.testing.assert_allclose(got, want, atol=1e-12)
    np.testing.assert_allclose(got, dctn(block, norm="ortho"), atol=1e-12)


def test_zigzag_small():
    assert zigzag_order(2).tolist() == [0, 1, 2, 3]
    cells = [(0, 0), (0, 1), (1, 0), (2, 0), (1, 1), (0, 2), (1, 2), (2, 1), (2, 2)]
    assert zigzag_order(3).tolist() == [i * 3 + j for i, j in cells]


def test_zigzag_jpeg():
    assert zigzag_order(8).tolist() == JPEG_ZIGZAG_8


@given(st.integers(1, 16))
def test_zigzag_permutation(P):
    assert sorted(zigzag_order(P).tolist()) == list(range(P * P))


def test_constant_image_dc_only():
    c = 0.37
    grid = extract_dct(np.full((3, 8, 8), c), build_dct_basis(4))
    # per channel the DC sits at the first zigzag slot
    dc = grid.coeffs[:, [0, 16, 32]]
    np.testing.assert_allclose(dc, direct_coeff(np.full((4, 4), c), 0, 0))
    np.testing.assert_allclose(dc, c * 4)
    rest = np.delete(grid.coeffs, [0, 16, 32], axis=1)
    assert np.abs(rest).max() < 1e-12


def test_zero_image():
    grid = extract_dct(np.zeros((1, 8, 8)), build_dct_basis(4))
    assert not grid.coeffs.any()


def test_impulse():
    img = np.zeros((1, 4, 4))
    img[0, 0, 0] = 1.0
    grid = extract_dct(img, build_dct_basis(4))
    zz = zigzag_order(4)
    for slot, pos in enumerate(zz):
        u, v = divmod(int(pos), 4)
        a = lambda k: 0.5 if k == 0 else np.sqrt(0.5)
        want = a(u) * a(v) * np.cos(u * np.pi / 8) * np.cos(v * np.pi / 8)
        assert abs(grid.coeffs[0, slot] - want) < 1e-12


def test_layout_channel_major_and_grid_order(rng):
    img = rng.random((3, 8, 12))
    basis = build_dct_basis(4)
    grid = extract_dct(img, basis)
    assert (grid.n_patches_y, grid.n_patches_x) == (2, 3)
    assert grid.coeffs.shape == (6, 48)
    k = 1 * 3 + 2  # patch row 1, column 2
    block = img[1, 4:8, 8:12]
    want = dctn(block, norm="ortho").ravel()[zigzag_order(4)]
    np.testing.assert_allclose(grid.coeffs[k, 16:32], want, atol=1e-12)


@pytest.mark.parametrize("P", [4, 8])
def test_energy_and_inverse(P, rng):
    img = rng.random((3, 2 * P, 3 * P))
    basis = build_dct_basis(P)
    grid = extract_dct(img, basis)
    blocks = img.reshape(3, 2, P, 3, P).transpose(1, 3, 0, 2, 4).reshape(6, -1)
    np.testing.assert_allclose((grid.coeffs**2).sum(1), (blocks**2).sum(1), rtol=1e-4)
    assert np.abs(inverse_dct(grid, basis) - img).max() < 1e-4


def test_crop_to_multiple(rng):
    img = rng.random((1, 10, 9))
    grid = extract_dct(img, build_dct_basis(4))
    assert (grid.n_patches_y, grid.n_patches_x) == (2, 2)
    np.testing.assert_allclose(inverse_dct(grid, build_dct_basis(4)), img[:, :8, :8], atol=1e-12)


def test_too_small_image():
    with pytest.raises(ValueError):
        extract_dct(np.zeros((1, 3, 8)), build_dct_basis(4))


def test_upsample():
    assert upsample_mask(np.array([[1]]), 4).all() and upsample_mask(np.array([[1]]), 4).shape == (4, 4)
    up = upsample_mask(np.array([[1], [0]]), 2)
    assert up.tolist() == [[1, 1], [1, 1], [0, 0], [0, 0]]


@given(st.lists(st.lists(st.booleans(), min_size=3, max_size=3), min_size=1, max_size=4), st.integers(1, 5))
def test_upsample_popcount(rows, P):
    m = np.array(rows)
    assert upsample_mask(m, P).sum() == P * P * m.sum()


def test_suppress_cases():
    ramp = np.arange(16, dtype=float).reshape(1, 4, 4)
    assert np.array_equal(suppress(ramp, np.zeros((4, 4))), ramp)
    const = np.full((2, 8, 8), 0.3)
    m = np.zeros((8, 8), bool)
    m[:4, :4] = True
    np.testing.assert_allclose(suppress(const, m), const)
    checker = (np.indices((4, 4)).sum(0) % 2).astype(bool)
    out = suppress(ramp, checker)
    np.testing.assert_allclose(out[0][checker], ramp[0][~checker].mean())
    np.testing.assert_array_equal(out[0][~checker], ramp[0][~checker])


def test_suppress_full_mask():
    img = np.ones((2, 4, 4))
    with pytest.raises(ValueError):
        suppress(img, np.ones((4, 4)))
    out = suppress(img, np.ones((4, 4)), fallback_mean=[0.2, 0.4])
    assert np.all(out[0] == 0.2) and np.all(out[1] == 0.4)


def test_suppress_cropped_mask():
    img = np.arange(30, dtype=float).reshape(1, 5, 6)
    m = np.zeros((4, 4), bool)
    m[0, 0] = True
    out = suppress(img, m)
    assert out[0, 0, 0] == img[0].ravel()[1:].mean()


def test_trigger_patches_carry_more_high_band_energy():
    from sparse_shield import synthetic as syn

    images, _ = syn.make_corpus(30, seed=5)
    basis = build_dct_basis(4)
    origin = syn.trigger_origin()
    truth = [y * 8 + x for y, x in syn.trigger_patches(origin, 4)]
    # last quarter of the zigzag order, per channel
    high = np.concatenate([np.arange(c * 16 + 12, c * 16 + 16) for c in range(3)])
    clean = np.concatenate([np.abs(extract_dct(im, basis).coeffs[:, high]) for im in images])
    trig = np.concatenate([
        np.abs(extract_dct(syn.add_square_trigger(im, origin), basis).coeffs[truth][:, high]) for im in images
    ])
    assert trig.mean() > clean.mean()
