import numpy as np
import pytest

from nestnorm.core import RawMoment, filter_set, moment_set, standardized_set
from nestnorm.diagnostics import (DO_OPTIONS, commutator, deviation_from_orthogonality,
                                  discrimination_experiment, do_matrix, family_exclusions,
                                  family_gradients, frobenius_residual, hessian_vector,
                                  local_covariance, numeric_gradient)
from nestnorm.errors import InvalidInputError, NestNormError
from nestnorm.filterbank import builtin_bank
from nestnorm.gradproj import projected_moment_gradient
from nestnorm.nen import batch_orthokurtosis, standardize_chain


def test_numeric_gradient_linear_and_quadratic(rng):
    x = rng.standard_normal(20)
    np.testing.assert_allclose(numeric_gradient(np.mean, x), 1 / 20, atol=1e-10)
    g = numeric_gradient(lambda y: np.mean(y**2), x, 1e-5)
    np.testing.assert_allclose(g, 2 * x / 20, atol=1e-10)
    gv = numeric_gradient(lambda B: np.stack([B.mean(axis=1), (B**2).mean(axis=1)], 1), x,
                          vectorized=True)
    assert gv.shape == (2, 20)
    with pytest.raises(InvalidInputError):
        numeric_gradient(np.mean, x, eps=0)
    with pytest.raises(NestNormError):
        numeric_gradient(lambda y: np.nan, x)


def test_numeric_orthokurtosis_gradient_direction_seed8():
    x = np.random.default_rng(8).standard_normal(64)
    z, _ = standardize_chain(x, 3)  # point on the level-3 reference manifold
    num = numeric_gradient(lambda B: batch_orthokurtosis(B), z, 1e-6, vectorized=True)
    g4 = projected_moment_gradient(z, 4)
    c = num @ g4 / (np.linalg.norm(num) * np.linalg.norm(g4))
    assert c >= 0.999


def test_do_basic():
    assert deviation_from_orthogonality([1, 0], [0, 1]) == 0
    assert deviation_from_orthogonality([1, 1], [1, 1]) == pytest.approx(90)
    x = np.random.default_rng(0).standard_normal(30)
    x -= x.mean()
    d = do_matrix([(lambda y: np.ones_like(y), "analytic"), (lambda y: 2 * y, "analytic")], [x])
    assert d.pairwise[0, 0, 1] == pytest.approx(0, abs=1e-12)
    assert d.pairwise[0, 0, 0] == 90
    d2 = do_matrix([(np.mean, "numeric"), (lambda y: np.mean(y**2), "numeric")], [x])
    assert abs(d2.pairwise[0, 0, 1]) < 1e-6


def test_do_single_trial_std_zero_and_skips():
    x = np.random.default_rng(1).standard_normal(16)
    d = do_matrix(family_gradients("msm", range(1, 5)), [x],
                  exclude=family_exclusions("msm", range(1, 5)))
    assert np.all(d.abs_std == 0)
    z = do_matrix([(lambda y: np.zeros_like(y), "analytic"), (lambda y: y, "analytic")], [x])
    assert z.skipped == [(0, 0, 1)]
    with pytest.raises(InvalidInputError):
        do_matrix(family_gradients("msm"), [])


def test_df_msm_low_orders_exactly_orthogonal():
    rng = np.random.default_rng(3)
    xs = [rng.standard_normal(128) for _ in range(2)]
    d = do_matrix(family_gradients("df_msm", range(1, 6)), xs)
    for i in range(5):
        for j in range(i + 1, 5):
            if min(i, j) < 3 and max(i, j) < 4:
                assert np.all(np.abs(d.pairwise[:, i, j]) < 1e-4)


def test_df_vf_first_feature_decoupled():
    bank = builtin_bank("separable_9band_2d", (10, 10))
    rng = np.random.default_rng(4)
    d = do_matrix(family_gradients("df_vf", bank=bank), [rng.standard_normal((10, 10))])
    assert np.max(np.abs(d.pairwise[0, 0, 1:])) <= 0.01


def test_local_covariance():
    bank = builtin_bank("separable_9band_2d", (8, 8))
    fs = filter_set(bank, (2,))
    x = np.random.default_rng(2).standard_normal((8, 8))
    C = local_covariance(fs, x, 0.5, decoupled=True).matrix
    off = C - np.diag(np.diag(C))
    assert np.abs(off).max() <= 1e-9 * np.abs(C).max()
    single = local_covariance(moment_set((2,)), x.ravel(), 2.0).matrix
    assert single.shape == (1, 1) and single[0, 0] == pytest.approx(2.0 * np.sum((2 * x / 64) ** 2))
    y = np.random.default_rng(0).gamma(1.0, size=50)
    C2 = local_covariance(standardized_set((3, 4)), y, 1.0).matrix
    from nestnorm.gradproj import feature_gradient
    from nestnorm.core import StandardizedMoment
    dot = feature_gradient(y, StandardizedMoment(3), exact=True) @ feature_gradient(
        y, StandardizedMoment(4), exact=True)
    assert np.sign(C2[0, 1]) == np.sign(dot)
    np.testing.assert_array_equal(C2, C2.T)


def test_hessian_vector_matches_finite_differences(rng):
    bank = builtin_bank("separable_9band_2d", (5, 5))
    x = rng.standard_normal((5, 5))
    v = rng.standard_normal((5, 5))
    from nestnorm.core import FilterOutputMoment
    from nestnorm.gradproj import feature_gradient
    for f in (RawMoment(4), FilterOutputMoment(3, 3), FilterOutputMoment(0, 2)):
        h = 1e-6
        num = (feature_gradient(x + h * v, f, bank, exact=True)
               - feature_gradient(x - h * v, f, bank, exact=True)) / (2 * h)
        np.testing.assert_allclose(hessian_vector(x, f, v, bank), num, atol=1e-7)


def test_frobenius_small_moment_sets_and_vf():
    for seed in range(5):
        x = np.random.default_rng(seed).standard_normal(16)
        assert frobenius_residual(x, moment_set((1, 2, 3))).max() < 1e-8
        bank = builtin_bank("separable_9band_2d", (4, 4))
        assert frobenius_residual(x.reshape(4, 4), filter_set(bank, (2,))).max() < 1e-8


def test_frobenius_fails_for_high_order_moments():
    # the bracket of x^a and x^b fields is ~ x^(a+b-3): outside span{1..x^(M-1)} when a+b > M+2
    x = np.random.default_rng(0).standard_normal(16)
    R = frobenius_residual(x, moment_set(range(1, 5)))
    assert R[2, 3] > 1e-3
    assert R[0, 3] < 1e-8 and R[1, 3] < 1e-8
    # [mean, second moment] bracket is constant: nonzero but inside the span
    c, scale = commutator(x, RawMoment(1), RawMoment(2))
    assert np.linalg.norm(c) > 0
    np.testing.assert_allclose(c, c[0], rtol=1e-12)


def test_discrimination_small():
    rep = discrimination_experiment((5, 7), n_vectors=32, n_samples=256, seed=1, n_mc=5000)
    assert 0 <= rep.decoupled <= 1 and 0 <= rep.coupled <= 1
    assert set(rep.coupled_pairwise) == {(0, 1)}
    swapped = discrimination_experiment((5, 7), 32, 256, seed=1, n_mc=5000, swap=True)
    assert swapped.coupled == rep.decoupled and swapped.decoupled == rep.coupled
    one = discrimination_experiment((5,), 16, 64, seed=0, n_mc=100)
    assert one.coupled == 0 and one.decoupled == 0
    with pytest.raises(InvalidInputError):
        discrimination_experiment((5, 5))
    with pytest.raises(InvalidInputError):
        discrimination_experiment((5, 6), n_vectors=2, n_samples=64)
    again = discrimination_experiment((5, 7), n_vectors=32, n_samples=256, seed=1, n_mc=5000)
    assert again.coupled == rep.coupled


def test_do_options_are_lockstep():
    assert DO_OPTIONS.lockstep and DO_OPTIONS.analytic_arcs
