"""End-to-end acceptance criteria.

Each test prints one ``PASS``/``FAIL`` line; the lines are repeated in the
terminal summary. Run only these with ``pytest -m acceptance -s``.
"""
import time

import numpy as np
import pytest

from nestnorm.core import filter_set, moment_set, standardized_set
from nestnorm.diagnostics import (discrimination_experiment, do_matrix, family_exclusions,
                                  family_gradients, frobenius_residual)
from nestnorm.filterbank import builtin_bank
from nestnorm.harness import (ExperimentSpec, regression_benchmark, synthetic_textures,
                              texture_benchmark, TEXTURE_MODES)
from nestnorm.nen import (batch_decouple, batch_denormalize, decouple_narrow, denormalize,
                          normalize, orthokurtosis_fast)
from nestnorm.perturb import ranked_ramp, spectral_floor

pytestmark = pytest.mark.acceptance

RESULTS = {}


def report(n, ok, detail):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print("\n" + line)
    assert ok, line


def _signal(rng, n):
    kind = rng.integers(4)
    if kind == 0:
        return rng.standard_normal(n)
    if kind == 1:
        return rng.gamma(rng.uniform(0.5, 4.0), size=n)
    if kind == 2:
        return rng.uniform(-1, 1, n) ** 3
    return rng.standard_t(rng.uniform(3, 10), size=n)


def test_1_standardized_chain():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        x = _signal(rng, int(rng.integers(64, 1025)))
        d, _ = decouple_narrow(x, moment_set((1, 2, 3)))
        z = (x - x.mean()) / x.std()
        want = np.array([x.mean(), x.var(), np.mean(z**3)])
        worst = max(worst, float(np.max(np.abs(d.values - want) / np.maximum(np.abs(want), 1e-300))))
    dt = time.perf_counter() - t0
    report(1, worst <= 1e-8 and dt < 10, f"max rel err {worst:.2e} (<=1e-8), {dt:.1f}s (<10s)")


def test_2_orthokurtosis_dual_path():
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        x = _signal(rng, int(rng.integers(32, 513)))
        d, _ = decouple_narrow(x, moment_set(range(1, 5)))
        worst = max(worst, abs(d.values[3] - orthokurtosis_fast(x)))
    dt = time.perf_counter() - t0
    report(2, worst <= 1e-6 and dt < 60, f"max |narrow - fast| {worst:.2e} (<=1e-6), {dt:.1f}s (<60s)")


def test_3_range_invariants():
    rng = np.random.default_rng(303)
    sizes = (4, 5, 8, 16, 64, 256, 1024)
    fs = moment_set(range(1, 5))
    total = bad = 0
    t0 = time.perf_counter()
    per = -(-10_000 // (len(sizes) * 4))
    for n in sizes:
        groups = [rng.standard_normal((per, n)),
                  rng.gamma(0.3, size=(per, n)),
                  rng.lognormal(0, 2, (per, n)),
                  rng.standard_t(2.5, size=(per, n))]
        for Y in groups:
            D = batch_decouple(Y, fs)
            b = (n - 2) / np.sqrt(n - 1)
            bad += int(np.sum(np.abs(D[:, 2]) > b))
            bad += int(np.sum((D[:, 3] < 1) | (D[:, 3] > n / 2)))
            total += len(Y)
    dt = time.perf_counter() - t0
    report(3, bad == 0 and total >= 10_000, f"{bad} violations over {total} signals, {dt:.1f}s")


def test_4_gradient_orthogonality():
    t0 = time.perf_counter()
    rng = np.random.default_rng(404)
    bank = builtin_bank("separable_9band_2d", (23, 23))
    out = {}
    for fam in ("msm", "df_msm"):
        xs = [rng.standard_normal(512) for _ in range(64)]
        out[fam] = do_matrix(family_gradients(fam), xs, exclude=family_exclusions(fam))
    for fam in ("vf", "df_vf"):
        xs = [rng.standard_normal((23, 23)) for _ in range(64)]
        out[fam] = do_matrix(family_gradients(fam, bank=bank), xs)
    dt = time.perf_counter() - t0
    m = {k: v.summary_mean for k, v in out.items()}
    s = {k: v.summary_std for k, v in out.items()}
    ok = (m["df_msm"] <= 5 and m["msm"] >= 20 and m["df_vf"] <= 1 and m["vf"] >= 8 and dt < 600)
    txt = ", ".join(f"{k} {m[k]:.2f}+-{s[k]:.2f}" for k in ("msm", "df_msm", "vf", "df_vf"))
    report(4, ok, f"{txt} deg, {dt:.0f}s (<600s)")


def test_5_first_filter_feature_exact():
    rng = np.random.default_rng(505)
    bank = builtin_bank("separable_9band_2d", (16, 16))
    xs = [rng.standard_normal((16, 16)) for _ in range(16)]
    d = do_matrix(family_gradients("df_vf", bank=bank), xs)
    worst = float(np.max(np.abs(d.pairwise[:, 0, 1:])))
    report(5, worst <= 0.01, f"max |DO(f1, fj)| {worst:.2e} deg (<=0.01)")


def test_6_discrimination():
    t0 = time.perf_counter()
    reps = [discrimination_experiment((5, 6, 7), 128, 1024, seed=s) for s in range(10)]
    dt = time.perf_counter() - t0
    c = 100 * np.mean([r.coupled for r in reps])
    d = 100 * np.mean([r.decoupled for r in reps])
    ok = abs(c - 12.4) <= 3 and abs(d - 4.5) <= 2 and dt < 300
    report(6, ok, f"coupled {c:.1f}% (12.4+-3), decoupled {d:.1f}% (4.5+-2), {dt:.0f}s (<300s)")


def test_7_round_trip():
    rng = np.random.default_rng(707)
    fs = moment_set(range(1, 5))
    worst_m = 0.0
    for _ in range(50):
        x = _signal(rng, int(rng.integers(32, 257)))
        d, tr = decouple_narrow(x, fs)
        back = denormalize(tr.kernel, tr, d.values)
        worst_m = max(worst_m, np.linalg.norm(back - x) / np.linalg.norm(x))
    bank = builtin_bank("separable_9band_2d", (12, 12))
    vf = filter_set(bank, (2,))
    Y = rng.standard_normal((50, 12, 12)) * rng.uniform(0.5, 2, (50, 1, 1))
    vals, K = batch_decouple(Y, vf, return_kernel=True)
    back = batch_denormalize(K, vf, vals, start=len(vf) - 2)
    worst_v = float(np.max(np.linalg.norm((back - Y).reshape(50, -1), axis=1)
                           / np.linalg.norm(Y.reshape(50, -1), axis=1)))
    report(7, max(worst_m, worst_v) <= 1e-7,
           f"moments 1..4 {worst_m:.2e}, VF 9-band {worst_v:.2e} (<=1e-7)")


def test_8_idempotence():
    rng = np.random.default_rng(808)
    bank = builtin_bank("separable_9band_2d", (8, 8))
    fams = {"mm": moment_set(range(1, 5)), "msm": standardized_set(range(1, 5)),
            "vf": filter_set(bank, (2,)), "mf": filter_set(bank, (2, 3))}
    worst = {}
    for name, fs in fams.items():
        w = 0.0
        for _ in range(5 if name == "mf" else 10):
            x = rng.standard_normal((8, 8)) if fs.bank is not None else rng.gamma(2.0, size=100)
            y, _ = normalize(x, fs)
            z, _ = normalize(y, fs)
            a, b = fs.values(z), fs.values(y)
            w = max(w, float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1.0))))
        worst[name] = w
    ok = max(worst.values()) <= 1e-9
    report(8, ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (<=1e-9)")


def test_9_regression_property():
    t0 = time.perf_counter()
    spec = ExperimentSpec(family="GGD", sizes=(512, 1024, 2048), d=2048, repeats=20,
                          regressors=("knn",), seed=0)
    res = regression_benchmark(spec)
    dt = time.perf_counter() - t0
    every = {n: bool(np.all(res.rmse[(n, "knn", "DF_MSM")] < res.rmse[(n, "knn", "MSM")]))
             for n in spec.sizes}
    ratio = res.mean(2048, "knn", "DF_MSM") / res.mean(2048, "knn", "MSM")
    means = ", ".join(f"N={n}: {res.mean(n, 'knn', 'DF_MSM'):.3f}/{res.mean(n, 'knn', 'MSM'):.3f}"
                      for n in spec.sizes)
    ok = all(every.values()) and ratio <= 0.75 and dt < 900
    report(9, ok, f"DF/MSM RMSE {means}; ratio@2048 {ratio:.2f} (<=0.75); "
                  f"DF wins every repeat {every}; {dt:.0f}s (<900s)")


def test_10_texture_ordering():
    t0 = time.perf_counter()
    ps = synthetic_textures(8, 16, (32, 32), seed=0)
    bank = builtin_bank("separable_9band_2d", (32, 32))
    err = {m: 100 * texture_benchmark(ps, bank, (2, 3, 4), m, folds=4, repeats=50).mean
           for m in TEXTURE_MODES}
    dt = time.perf_counter() - t0
    msm, dfmsm, dfmf = err["MSM_per_subband"], err["DF_MSM_per_subband"], err["DF_MF_joint"]
    ok = dfmf <= dfmsm <= msm and msm - dfmf >= 2 and dt < 1200
    report(10, ok, f"DF_MF {dfmf:.2f}% <= DF_MSM {dfmsm:.2f}% <= MSM {msm:.2f}%, "
                   f"gap {msm - dfmf:.2f} pts (>=2), {dt:.0f}s (<1200s)")


def test_11_perturbation_contracts():
    problems = []
    for shape in [(7,), (64,), (5, 9), (16, 16), (1, 30)]:
        for seed in range(5):
            e = ranked_ramp(shape, seed)
            N = e.size
            s = np.sort(e.ravel())
            if not (np.unique(s).size == N and s[0] >= -0.5 and s[-1] < 0.5
                    and np.allclose(np.diff(s), 1 / N, atol=1e-14, rtol=0)
                    and np.array_equal(e, ranked_ramp(shape, seed))):
                problems.append(("ramp", shape, seed))
    rng = np.random.default_rng(1111)
    bank = builtin_bank("separable_9band_2d", (12, 12))
    S = bank.support((12, 12))
    for seed in range(20):
        x = rng.standard_normal((12, 12)) * rng.uniform(0.1, 3)
        X = np.fft.fft2(x)
        theta = float(np.quantile(np.abs(X[S]), rng.uniform(0.1, 0.9)))
        y = spectral_floor(x, bank, theta, seed)
        Y = np.fft.fft2(y)
        adj = S & (np.abs(X) <= theta)
        floor_ok = np.abs(Y)[S].min() >= theta * (1 - 1e-12)
        minimal = np.allclose(np.abs(Y - X)[adj], theta - np.abs(X)[adj], atol=1e-12 * theta)
        same = np.array_equal(y, spectral_floor(x, bank, theta, seed))
        if not (floor_ok and minimal and same):
            problems.append(("floor", seed))
    report(11, not problems, f"{len(problems)} contract violations {problems[:3]}")


def test_12_frobenius():
    rng = np.random.default_rng(1212)
    bank = builtin_bank("separable_9band_2d", (4, 4))
    mom = moment_set(range(1, 7))
    vf = filter_set(bank, (2,))
    worst_m = worst_v = 0.0
    low = 0.0  # pairs with a + b <= M + 2
    a, b = np.meshgrid(np.arange(1, 7), np.arange(1, 7), indexing="ij")
    for _ in range(20):
        x = rng.standard_normal(16)
        R = frobenius_residual(x, mom)
        worst_m = max(worst_m, float(R.max()))
        low = max(low, float(R[a + b <= 8].max()))
        worst_v = max(worst_v, float(frobenius_residual(x.reshape(4, 4), vf).max()))
    ok = worst_m <= 1e-8 and worst_v <= 1e-8
    report(12, ok, f"moments 1..6 {worst_m:.1e} (pairs with a+b<=8: {low:.1e}), "
                   f"VF {worst_v:.1e} (<=1e-8)")
