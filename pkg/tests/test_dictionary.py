import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sparse_shield.dictionary import (
    DictLearnConfig,
    Dictionary,
    InsufficientDataError,
    distinct_columns,
    learn_dictionary,
    projection_residual,
    reconstruction_error_stats,
    selection_probabilities,
)


def cluster_data(rng, per=20, l=10, noise=0.002):
    centers = np.linalg.qr(rng.standard_normal((l, 3)))[0]
    X = np.repeat(centers, per, axis=1) + noise * rng.standard_normal((l, 3 * per))
    return X, np.repeat(np.arange(3), per)


def exhaustive_residuals(X, ids):
    """Projection residual of every normalized column against the chosen ones."""
    Xn = X / np.linalg.norm(X, axis=0)
    D = Xn[:, ids]
    P = D @ np.linalg.pinv(D)
    return np.linalg.norm(Xn - P @ Xn, axis=0)


def test_orthogonal_columns_all_selected(rng):
    X = np.linalg.qr(rng.standard_normal((8, 8)))[0] * rng.uniform(1, 3, 8)
    D = learn_dictionary(X, DictLearnConfig(target_cols=8, init_cols=1))
    assert sorted(D.source_ids) == list(range(8))
    np.testing.assert_allclose(np.linalg.norm(D.atoms, axis=0), 1, atol=1e-6)


def test_duplicate_has_zero_probability():
    x = np.array([1.0, 0.0, 0.0])
    y = np.array([0.0, 1.0, 0.0])
    X = np.stack([x, x, y], axis=1)
    for seed in range(20):
        D = learn_dictionary(X, DictLearnConfig(target_cols=2, init_cols=1, seed=seed, init_indices=[0]))
        assert D.source_ids == (0, 2)
    p = selection_probabilities(exhaustive_residuals(X, [0]), np.array([False, True, True]))
    assert p[1] == 0.0 and p[2] == 1.0


def test_probabilities_proportional():
    p = selection_probabilities(np.array([0.5, 1.5, 0.0, 2.0]), np.array([True, True, True, False]))
    np.testing.assert_allclose(p, [0.25, 0.75, 0.0, 0.0])
    assert not selection_probabilities(np.zeros(3), np.ones(3, bool)).any()


def test_three_cluster_coverage():
    covered = 0
    for seed in range(100):
        rng = np.random.default_rng(1000 + seed)
        X, labels = cluster_data(rng)
        D = learn_dictionary(X, DictLearnConfig(target_cols=3, init_cols=1, seed=seed))
        covered += len({labels[i] for i in D.source_ids}) == 3
    assert covered >= 95


def exact_coverage_probability(X, labels):
    """Probability that m=3, m0=1 sampling covers all clusters, by enumerating every pick sequence."""
    n = X.shape[1]
    total = 0.0
    for i in range(n):
        r1 = exhaustive_residuals(X, [i])
        r1[i] = 0.0
        p1 = r1 / r1.sum()
        for j in np.flatnonzero(p1):
            if labels[j] == labels[i]:
                continue
            r2 = exhaustive_residuals(X, [i, j])
            r2[[i, j]] = 0.0
            third = labels != labels[i]
            third &= labels != labels[j]
            total += (1 / n) * p1[j] * r2[third].sum() / r2.sum()
    return total


def test_coverage_rate_matches_exhaustive_oracle():
    rng = np.random.default_rng(77)
    X, labels = cluster_data(rng, per=6, noise=0.2)
    want = exact_coverage_probability(X, labels)
    trials = 400
    got = sum(
        len({labels[i] for i in learn_dictionary(X, DictLearnConfig(3, 1, seed=s)).source_ids}) == 3
        for s in range(trials)
    ) / trials
    assert abs(got - want) <= 4 * np.sqrt(want * (1 - want) / trials)


def test_incremental_residuals_match_exhaustive(rng):
    # the second pick is drawn from residuals after the first; replay it by hand
    X, _ = cluster_data(rng, per=5)
    D1 = learn_dictionary(X, DictLearnConfig(target_cols=1, init_cols=1, seed=3))
    res = exhaustive_residuals(X, list(D1.source_ids))
    assert res[D1.source_ids[0]] < 1e-12
    D2 = learn_dictionary(X, DictLearnConfig(target_cols=2, init_cols=1, seed=3))
    assert D2.source_ids[0] == D1.source_ids[0]
    assert res[D2.source_ids[1]] > 0


def test_insufficient_distinct_columns():
    X = np.tile(np.arange(1.0, 5.0)[:, None], (1, 10))
    with pytest.raises(InsufficientDataError):
        learn_dictionary(X, DictLearnConfig(target_cols=2))


def test_distinct_columns_skips_zero_and_duplicates():
    X = np.array([[0.0, 1.0, 1.0, 2.0], [0.0, 0.0, 0.0, 1.0]])
    assert distinct_columns(X).tolist() == [1, 3]


def test_fill_after_span_exhausted(rng):
    # 20 distinct columns in R^3: adaptive sampling stops after 3, the rest are uniform
    X = rng.standard_normal((3, 20))
    D = learn_dictionary(X, DictLearnConfig(target_cols=12, init_cols=1, seed=1))
    assert len(set(D.source_ids)) == 12


def test_seed_determinism(rng):
    X = rng.standard_normal((6, 50))
    a = learn_dictionary(X, DictLearnConfig(target_cols=10, seed=5))
    b = learn_dictionary(X, DictLearnConfig(target_cols=10, seed=5))
    assert a.source_ids == b.source_ids and a.atoms.tobytes() == b.atoms.tobytes()


@given(st.integers(2, 8), st.integers(1, 30), st.integers(1, 3), st.integers(0, 2**31))
def test_dictionary_invariants(l, m, g, seed):
    r = np.random.default_rng(seed)
    X = r.standard_normal((l, 40))
    D = learn_dictionary(X, DictLearnConfig(target_cols=m, growth=g, seed=seed))
    assert D.atoms.shape == (l, m) and D.atoms.dtype == np.float32
    assert len(set(D.source_ids)) == m
    np.testing.assert_allclose(np.linalg.norm(D.atoms.astype(np.float64), axis=0), 1, atol=1e-6)


def test_config_validation():
    assert DictLearnConfig(target_cols=1000).init_cols == 50
    with pytest.raises(ValueError):
        DictLearnConfig(target_cols=3, init_cols=4)
    with pytest.raises(ValueError):
        Dictionary(np.ones((2, 2)), (0, 0))


def test_projection_residual(rng):
    D = rng.standard_normal((10, 3))
    x = D @ rng.standard_normal(3)
    assert projection_residual(D, x) <= 1e-5 * np.linalg.norm(x)
    assert projection_residual(np.eye(3)[:, 0], np.eye(3)[:, 1]) == pytest.approx(1.0)
    y = rng.standard_normal(10)
    oracle = np.linalg.norm(D @ np.linalg.inv(D.T @ D) @ D.T @ y - y)
    assert projection_residual(D, y) == pytest.approx(oracle, rel=1e-4)


def test_reconstruction_error_cases(rng):
    X = rng.standard_normal((12, 60))
    D = learn_dictionary(X, DictLearnConfig(target_cols=24, seed=0))
    held = X[:, list(D.source_ids[:5])]
    assert reconstruction_error_stats(D, held, 1)[0] <= 1e-5
    assert reconstruction_error_stats(D, rng.standard_normal((12, 10)), 12)[0] <= 1e-4


def test_more_atoms_per_signal_reduce_error(rng):
    l = 12
    X = rng.standard_normal((l, 400))
    D = learn_dictionary(X, DictLearnConfig(target_cols=4 * l, seed=0))
    hold = rng.standard_normal((l, 50))
    assert reconstruction_error_stats(D, hold, 5)[0] < reconstruction_error_stats(D, hold, 1)[0]


def test_trigger_residuals_exceed_clean_tail():
    from sparse_shield import synthetic as syn
    from sparse_shield.dct import build_dct_basis, extract_dct
    from sparse_shield.sparse import batch_reconstruct

    images, _ = syn.make_corpus(60, seed=8)
    basis = build_dct_basis(4)
    X = np.hstack([extract_dct(im, basis).coeffs.T for im in images[:40]])
    D = learn_dictionary(X, DictLearnConfig(target_cols=1000, seed=0))
    held = np.hstack([extract_dct(im, basis).coeffs.T for im in images[40:]])
    clean = np.linalg.norm(batch_reconstruct(D, held, 5).residuals, axis=0)
    origin = syn.trigger_origin()
    idx = [y * 8 + x for y, x in syn.trigger_patches(origin, 4)]
    trig = np.hstack([extract_dct(syn.add_square_trigger(im, origin), basis).coeffs[idx].T for im in images[40:]])
    trig_res = np.linalg.norm(batch_reconstruct(D, trig, 5).residuals, axis=0)
    assert trig_res.mean() > np.percentile(clean, 99)
