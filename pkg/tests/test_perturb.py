import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nestnorm.errors import DegenerateSignalError, InvalidInputError
from nestnorm.filterbank import builtin_bank
from nestnorm.perturb import PerturbationPlan, choose_theta, ranked_ramp, spectral_floor
from nestnorm import perturb


def test_ramp_hand_trace():
    e = ranked_ramp((2, 2), r=0.5)
    # ramp n_x + 0.5 n_y: (0,0)=0, (0,1)=0.5, (1,0)=1, (1,1)=1.5
    np.testing.assert_array_equal(e, [[-0.5, -0.25], [0.0, 0.25]])


@settings(max_examples=50, deadline=None)
@given(nx=st.integers(1, 30), ny=st.integers(1, 30), seed=st.integers(0, 2**32 - 1))
def test_ramp_contract(nx, ny, seed):
    if nx * ny < 2:
        return
    e = ranked_ramp((nx, ny), seed)
    N = nx * ny
    s = np.sort(e.ravel())
    assert np.unique(s).size == N
    assert s[0] == -0.5 and s[-1] == pytest.approx((N / 2 - 1) / N, abs=1e-15)
    np.testing.assert_allclose(np.diff(s), 1 / N, atol=1e-14)
    assert np.all((s >= -0.5) & (s < 0.5))
    np.testing.assert_array_equal(e, ranked_ramp((nx, ny), seed))


def test_ramp_errors(monkeypatch):
    with pytest.raises(InvalidInputError):
        ranked_ramp((1, 1))
    with pytest.raises(InvalidInputError):
        ranked_ramp((0, 5))
    # a forced tie (r = 1 on a 2x2 grid gives ramp {0,1,1,2})
    with pytest.raises(DegenerateSignalError):
        ranked_ramp((2, 2), r=1.0)
    monkeypatch.setattr(perturb, "MAX_RAMP_DRAWS", 0)
    with pytest.raises(DegenerateSignalError):
        ranked_ramp((3, 3), seed=1)


def test_spectral_floor_untouched_when_above():
    bank = builtin_bank("complementary_pair_1d", 32)
    x = np.random.default_rng(0).standard_normal(32) * 10
    theta = 0.5 * np.abs(np.fft.fft(x)).min()
    np.testing.assert_array_equal(spectral_floor(x, bank, theta, 1), x)


def test_spectral_floor_zero_signal():
    bank = builtin_bank("separable_9band_2d", (8, 10))
    y = spectral_floor(np.zeros((8, 10)), bank, 0.3, 4)
    S = bank.support((8, 10))
    mag = np.abs(np.fft.fft2(y))
    np.testing.assert_allclose(mag[S], 0.3, rtol=1e-12)
    assert y.dtype == np.float64


def test_spectral_floor_mixed_minimal_norm():
    bank = builtin_bank("separable_9band_2d", (8, 8))
    x = np.random.default_rng(5).standard_normal((8, 8))
    X = np.fft.fft2(x)
    theta = np.median(np.abs(X))
    y = spectral_floor(x, bank, theta, 2)
    Y = np.fft.fft2(y)
    S = bank.support((8, 8))
    assert np.abs(Y)[S].min() >= theta * (1 - 1e-12)
    low = S & (np.abs(X) <= theta) & (np.abs(X) > 0)
    E = Y - X
    np.testing.assert_allclose(np.abs(E[low]), theta - np.abs(X[low]), atol=1e-12)
    high = np.abs(X) > theta
    np.testing.assert_allclose(E[high], 0, atol=1e-12)
    # phases are preserved on the adjusted bins (radial push)
    np.testing.assert_allclose(np.angle(Y[low]), np.angle(X[low]), atol=1e-9)


def test_spectral_floor_off_support_untouched():
    mask = np.zeros((8, 8), bool)
    mask[1, 2] = mask[-1, -2] = True
    y = spectral_floor(np.zeros((8, 8)), None, 1.0, 0, support=mask)
    mag = np.abs(np.fft.fft2(y))
    assert mag[1, 2] == pytest.approx(1.0) and mag[~mask].max() < 1e-12


def test_spectral_floor_deterministic_and_seeded():
    bank = builtin_bank("complementary_pair_1d", 16)
    a = spectral_floor(np.zeros(16), bank, 1.0, 7)
    np.testing.assert_array_equal(a, spectral_floor(np.zeros(16), bank, 1.0, 7))
    assert not np.array_equal(a, spectral_floor(np.zeros(16), bank, 1.0, 8))
    with pytest.raises(InvalidInputError):
        spectral_floor(np.zeros(16), bank, 0.0, 7)


def test_choose_theta():
    bank = builtin_bank("separable_9band_2d", (8, 8))
    x = np.round(np.random.default_rng(1).standard_normal((8, 8)) * 5)
    th = choose_theta(x, 1.0, bank)
    assert th > 0
    y = spectral_floor(x, bank, th, 0)
    np.testing.assert_array_equal(np.round(y), x)
    # a slightly larger theta breaks re-quantization (1e-3 bracket)
    assert not np.array_equal(np.round(spectral_floor(x, bank, th * 1.01, 0)), x)
    assert choose_theta(x, np.inf, bank, cap=7.0) == 7.0
    z = np.zeros((8, 8))
    tz = choose_theta(z, 1.0, bank)
    assert tz > 0
    np.testing.assert_array_equal(np.round(spectral_floor(z, bank, tz, 0)), z)


def test_plan():
    bank = builtin_bank("complementary_pair_1d", 16)
    with pytest.raises(InvalidInputError):
        PerturbationPlan("spectral_floor", 1)
    with pytest.raises(InvalidInputError):
        PerturbationPlan("other")
    x = np.ones(16)
    y = PerturbationPlan("ranked_ramp", 3).apply(x, scale=1e-3)
    assert np.unique(y).size == 16
    z = PerturbationPlan("spectral_floor", 3, theta=0.1).apply(x, bank)
    assert np.abs(np.fft.fft(z)).min() >= 0.1 * (1 - 1e-12)
