"""Seeded outputs frozen from a reference run; guards against silent drift."""
import numpy as np

from nestnorm.core import filter_set, moment_set
from nestnorm.diagnostics import discrimination_experiment
from nestnorm.filterbank import builtin_bank
from nestnorm.harness import DistributionSpec, sample
from nestnorm.nen import batch_decouple, orthokurtosis_fast
from nestnorm.perturb import ranked_ramp, spectral_floor

GAMMA = np.random.default_rng(2024).gamma(2.0, size=100)
GAUSS = np.random.default_rng(2024).standard_normal((8, 8))


def test_frozen_orthokurtosis():
    np.testing.assert_allclose(orthokurtosis_fast(GAMMA), 2.49661420406673, rtol=1e-12)


def test_frozen_decoupled_moments():
    got = batch_decouple(GAMMA[None], moment_set(range(1, 6)))[0]
    want = [1.942866267885064, 1.9738509256134638, 1.524846343293021, 2.496614202649741,
            -0.07530154602165007]
    np.testing.assert_allclose(got[:3], want[:3], rtol=1e-12)
    np.testing.assert_allclose(got[3:], want[3:], rtol=1e-7)


def test_frozen_decoupled_filter_energies():
    bank = builtin_bank("separable_9band_2d", (8, 8))
    got = batch_decouple(GAUSS[None], filter_set(bank, (2,)))[0]
    want = [0.12773676037092066, 0.10297467204373811, 0.09985474744086822, 0.13205909206915298,
            0.04874474875199451, 0.08894506778413258, 0.10310511796539454, 0.07351385907856244,
            0.14641125839846908]
    np.testing.assert_allclose(got, want, rtol=1e-7)


def test_frozen_perturbations():
    want = np.array([-6, -5, -3, -1, -4, -2, 1, 3, 0, 2, 4, 5]) / 12
    np.testing.assert_array_equal(ranked_ramp((3, 4), 7).ravel(), want)
    floor = spectral_floor(np.zeros(8), builtin_bank("complementary_pair_1d", 8), 1.0, 3)
    np.testing.assert_allclose(floor, [0.6031873521392297, -0.3934852828478362,
                                       0.08595596681250789, -0.20897174069984464,
                                       -0.17785805367315483, -0.36937397201368954,
                                       -0.5112852652785829, -0.028169004438629644], atol=1e-14)


def test_frozen_discrimination_and_sampler():
    r = discrimination_experiment((5, 7), 32, 256, seed=1, n_mc=5000)
    assert (r.coupled, r.decoupled) == (0.0655, 0.0368)
    np.testing.assert_allclose(sample(DistributionSpec("GGD", 1.5), 5, seed=9),
                               [-1.1404063029323022, -0.37032010799043297, -0.6009790904609492,
                                1.7528142103120654, 0.3588912910716191], rtol=1e-12)
