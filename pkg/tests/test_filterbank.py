import numpy as np
import pytest

from nestnorm.core import filter_output_moment, filter_set
from nestnorm.errors import (DegenerateSignalError, InvalidInputError, ShapeMismatchError,
                             UnreachableValueError)
from nestnorm.filterbank import (FilterBank, batch_decoupled_filter_features, builtin_bank,
                                 complementary_pair_normalize, decoupled_filter_features,
                                 half_spectrum_weights, spectral_normalize, spectral_solve)
from nestnorm.nen import normalize_homogeneous


def vf(x, bank):
    return filter_set(bank, (2,)).values(x)


# -- banks -----------------------------------------------------------------------------


@pytest.mark.parametrize("n", [2, 7, 64, 255])
def test_complementary_pair_is_parseval(n):
    bank = builtin_bank("complementary_pair_1d", n)
    P = bank.power((n,))
    np.testing.assert_allclose(P.sum(axis=0), 1.0, atol=1e-14)
    assert P.sum() == pytest.approx(n, rel=1e-14)
    k = np.arange(n)
    np.testing.assert_allclose(P[0], np.cos(np.pi * k / n) ** 2, atol=1e-14)


def test_nine_band_bank_properties():
    bank = builtin_bank("separable_9band_2d", (8, 8))
    assert len(bank) == 9
    P = bank.power((8, 8)).reshape(9, -1)
    np.testing.assert_allclose(P.sum(axis=0), 1.0, atol=1e-14)
    cosines = (P @ P.T) / np.outer(np.linalg.norm(P, axis=1), np.linalg.norm(P, axis=1))
    iu = np.triu_indices(9, 1)
    assert np.all(cosines[iu] < 1 - 1e-9)
    # only the low-low band passes DC
    dc = P[:, 0]
    assert dc[0] == pytest.approx(1.0) and np.all(np.abs(dc[1:]) < 1e-15)
    assert sum(bank.energy(j) for j in range(9)) == pytest.approx(1.0)


def test_bank_validation():
    with pytest.raises(InvalidInputError):
        FilterBank([[1.0, 1.0], [2.0, 2.0]])  # co-linear squared responses
    with pytest.raises(InvalidInputError):
        FilterBank([])
    with pytest.raises(InvalidInputError):
        FilterBank([[0.0, 0.0]])
    with pytest.raises(InvalidInputError):
        builtin_bank("separable_9band_2d", (2, 2))
    with pytest.raises(InvalidInputError):
        builtin_bank("complementary_pair_1d", 1)
    with pytest.raises(InvalidInputError):
        builtin_bank("nope", 8)
    with pytest.raises(ShapeMismatchError):
        builtin_bank("separable_9band_2d", (8, 8)).response((2, 2))


def test_cached_response_matches_kernel_transform():
    bank = builtin_bank("separable_9band_2d", (8, 8))
    for j in range(9):
        direct = np.fft.fft2(bank.embed(j, (8, 8)))
        np.testing.assert_allclose(bank.response((8, 8))[j], direct, atol=1e-12)
        np.testing.assert_allclose(bank.rfft_response((8, 8))[j], direct[:, :5], atol=1e-12)


def test_half_spectrum_weights_count_all_bins():
    for grid in ((8,), (7,), (6, 8), (5, 7)):
        assert half_spectrum_weights(grid).sum() == np.prod(grid)


# -- spectral normalization -----------------------------------------------------------------


def test_already_at_reference_is_identity():
    bank = builtin_bank("complementary_pair_1d", 32)
    x = np.random.default_rng(1).standard_normal(32)
    refs = vf(x, bank)
    y, trace = spectral_normalize(x, bank, refs, 2)
    np.testing.assert_allclose(y, x, atol=1e-12)
    np.testing.assert_allclose(trace.steps[0].record["beta"], 0.0, atol=1e-12)


def test_single_filter_closed_form(rng):
    bank = builtin_bank("separable_9band_2d", (16, 16))
    x = rng.standard_normal((16, 16))
    y, _ = spectral_normalize(x, bank, (0.7,) + (1.0,) * 8, 1)
    assert filter_output_moment(y, bank, 0, 2) == pytest.approx(0.7, rel=1e-10)


def test_full_nine_band_white_noise_seed9():
    bank = builtin_bank("separable_9band_2d", (64, 64))
    x = np.random.default_rng(9).standard_normal((64, 64))
    refs = [bank.energy(j) for j in range(9)]
    y, trace = spectral_normalize(x, bank, refs)
    np.testing.assert_allclose(vf(y, bank), refs, rtol=1e-8)
    beta = trace.steps[0].record["beta"]
    Y = np.fft.rfft2(y)
    X = np.fft.rfft2(x)
    P = np.abs(bank.rfft_response((64, 64))) ** 2
    np.testing.assert_allclose(Y, X * np.exp(np.tensordot(beta, P, 1)), atol=1e-9)


def test_outputs_real_and_conjugate_symmetric(rng):
    bank = builtin_bank("separable_9band_2d", (9, 10))
    x = rng.standard_normal((9, 10))
    y, _ = spectral_normalize(x, bank)
    assert y.dtype == np.float64
    F = np.fft.fft2(y)
    np.testing.assert_allclose(F, np.conj(np.roll(np.flip(F), 1, axis=(0, 1))), atol=1e-10)


def test_zero_spectrum_on_support_raises():
    bank = builtin_bank("separable_9band_2d", (8, 8))
    with pytest.raises(DegenerateSignalError):
        spectral_normalize(np.full((8, 8), 2.0), bank)


def test_negative_target_unreachable(rng):
    bank = builtin_bank("complementary_pair_1d", 16)
    with pytest.raises(UnreachableValueError):
        spectral_solve(rng.standard_normal((1, 16)), bank, [0], [-1.0])


def test_spectral_solve_batch_rows_converge_independently():
    bank = builtin_bank("separable_9band_2d", (16, 16))
    rng = np.random.default_rng(3)
    Y = rng.standard_normal((12, 16, 16)) * rng.uniform(0.1, 30, (12, 1, 1))
    refs = [bank.energy(j) for j in range(9)]
    out, beta, solver = spectral_solve(Y, bank, range(9), refs)
    for y in out:
        np.testing.assert_allclose(vf(y, bank), refs, rtol=1e-9)


# -- complementary pair ---------------------------------------------------------------------


def test_complementary_pair_normalize(rng):
    bank = builtin_bank("complementary_pair_1d", 128)
    for _ in range(5):
        x = rng.standard_normal(128).cumsum()
        y, trace = complementary_pair_normalize(x, bank, (0.3, 0.6))
        np.testing.assert_allclose(vf(y, bank), (0.3, 0.6), rtol=1e-9)
        # path independence: same signal as the joint Newton solve
        z, _ = spectral_normalize(x, bank, (0.3, 0.6), 2)
        np.testing.assert_allclose(vf(y, bank), vf(z, bank), rtol=1e-7)
        np.testing.assert_allclose(y, z, atol=1e-7 * np.abs(z).max())


def test_complementary_pair_identity():
    bank = builtin_bank("complementary_pair_1d", 32)
    x = np.random.default_rng(4).standard_normal(32)
    y, _ = complementary_pair_normalize(x, bank, vf(x, bank))
    np.testing.assert_allclose(y, x, atol=1e-10)


def test_complementary_pair_energy_bookkeeping(rng):
    bank = builtin_bank("complementary_pair_1d", 64)
    x = rng.standard_normal(64)
    y, _ = complementary_pair_normalize(x, bank, (0.25, 0.5))
    y0 = y - y.mean()
    e = vf(y0, bank)
    assert e.sum() == pytest.approx(np.var(y), rel=1e-10)


# -- homogeneous normalization ------------------------------------------------------------------


def test_homogeneous_matches_spectral(rng):
    bank = builtin_bank("separable_9band_2d", (16, 16))
    fs = filter_set(bank, (2,))
    x = rng.standard_normal((16, 16))
    refs = fs.references.values
    y, trace = normalize_homogeneous(x, fs.features, refs, bank)
    np.testing.assert_allclose(vf(y, bank), refs, rtol=1e-9)
    assert trace.solver in ("newton", "gauss-seidel")
    y1, t1 = normalize_homogeneous(x, fs.features[:1], refs[:1], bank)
    assert filter_output_moment(y1, bank, 0, 2) == pytest.approx(refs[0], rel=1e-10)
    y2, t2 = normalize_homogeneous(y, fs.features, refs, bank)
    assert all(abs(s.record["t"]) < 1e-9 for s in t2.steps)


def test_homogeneous_complementary_pair(rng):
    bank = builtin_bank("complementary_pair_1d", 64)
    fs = filter_set(bank, (2,))
    x = rng.standard_normal(64)
    y, _ = normalize_homogeneous(x, fs.features, (0.2, 0.9), bank)
    np.testing.assert_allclose(vf(y, bank), (0.2, 0.9), rtol=1e-9)


def test_homogeneous_rejects_non_closed_form(rng):
    bank = builtin_bank("complementary_pair_1d", 16)
    fs = filter_set(bank, (3,))
    with pytest.raises(InvalidInputError):
        normalize_homogeneous(rng.standard_normal(16), fs.features, (0.0, 0.0), bank)


# -- decoupled subband variances ------------------------------------------------------------------


def test_decoupled_filter_features_definition(rng):
    bank = builtin_bank("separable_9band_2d", (12, 12))
    x = rng.standard_normal((12, 12))
    d = decoupled_filter_features(x, bank)
    refs = [bank.energy(j) for j in range(9)]
    assert d[0] == pytest.approx(filter_output_moment(x, bank, 0, 2), rel=1e-14)
    for k in range(1, 9):
        y, _ = spectral_normalize(x, bank, refs, k)
        assert d[k] == pytest.approx(filter_output_moment(y, bank, k, 2), rel=1e-8)


def test_decoupled_filter_features_delta():
    bank = builtin_bank("separable_9band_2d", (8, 8))
    x = np.zeros((8, 8))
    x[0, 0] = 1.0
    d = decoupled_filter_features(x, bank)
    assert d[0] == filter_output_moment(x, bank, 0, 2)


def test_decoupled_filter_white_noise_near_refs():
    bank = builtin_bank("separable_9band_2d", (64, 64))
    x = np.random.default_rng(2).standard_normal((64, 64))
    d = decoupled_filter_features(x, bank)
    np.testing.assert_allclose(d.values, [bank.energy(j) for j in range(9)], rtol=0.1)


def test_batch_matches_single(rng):
    bank = builtin_bank("separable_9band_2d", (8, 8))
    Y = rng.standard_normal((4, 8, 8))
    B = batch_decoupled_filter_features(Y, bank)
    for b in range(4):
        np.testing.assert_allclose(B[b], decoupled_filter_features(Y[b], bank).values, rtol=1e-12)
