"""Desk-scale benchmarks: samplers, a regression benchmark and texture classification.

Seeds are split deterministically: repeat ``r`` of an experiment with master
seed ``s`` draws from ``default_rng([s, r])``, dataset ``n`` from
``default_rng([s, 1000 + n])``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from .core import batch_standardized_moment, filter_set, moment_set, \
    batch_filter_output
from .errors import InvalidInputError
from .nen import IntegratorOptions, batch_decouple

# feature extraction for benchmarks: closed-form arcs where available, loose
# step control elsewhere (feature noise is far below sampling noise)
BENCH_OPTIONS = IntegratorOptions(step_tol=1e-7, feature_tol=1e-9, analytic_arcs=True)

FAMILIES = ("GGD", "GMD", "GND")


# ---------------------------------------------------------------- sampling


@dataclass(frozen=True)
class DistributionSpec:
    """One member of a shape-parametrized family.

    GGD: density ~ exp(-|x|**beta). GMD: gamma with shape ``beta``.
    GND: ``|t|**beta`` with ``t`` standard normal.
    """

    family: str
    beta: float
    normalization: bool = True

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidInputError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if not (self.beta > 0 and np.isfinite(self.beta)):
            raise InvalidInputError("beta must be positive")
        if self.family == "GND" and self.beta < 1:
            raise InvalidInputError("GND needs beta >= 1")


def _draw(family: str, beta: np.ndarray, n: int, rng) -> np.ndarray:
    beta = np.asarray(beta, dtype=float)[:, None]
    shape = (beta.shape[0], n)
    if family == "GGD":
        # |x|**beta ~ Gamma(1/beta): invert the power, then attach a fair sign
        g = rng.standard_gamma(np.broadcast_to(1.0 / beta, shape))
        mag = np.exp(np.log(np.maximum(g, 1e-300)) / beta)
        return np.where(rng.uniform(size=shape) < 0.5, -mag, mag)
    if family == "GMD":
        # numpy's gamma sampler is the Marsaglia-Tsang accept-reject method
        return rng.standard_gamma(np.broadcast_to(beta, shape))
    return np.abs(rng.standard_normal(shape)) ** beta


def _standardize(X: np.ndarray) -> np.ndarray:
    X = X - X.mean(axis=1, keepdims=True)
    sd = X.std(axis=1, keepdims=True)
    return X / np.where(sd > 0, sd, 1.0)


def sample(dist: DistributionSpec, n: int, seed: int = 0) -> np.ndarray:
    """``n`` i.i.d. draws from ``dist`` (standardized when ``dist.normalization``)."""
    if n < 1:
        raise InvalidInputError("n must be at least 1")
    X = _draw(dist.family, [dist.beta], int(n), np.random.default_rng(seed))
    return (_standardize(X) if dist.normalization and n > 1 else X)[0]


# ---------------------------------------------------------------- regression


@dataclass(frozen=True)
class ExperimentSpec:
    """Regression experiment. ``beta_rule`` is ``"log2_uniform"`` (beta = 2**A,
    A ~ U[-3, 3], target A) or ``"uniform"`` (beta ~ U[1, 6], target beta);
    ``None`` picks the family default."""

    family: str = "GGD"
    sizes: tuple = (512, 1024, 2048)
    d: int = 2048
    orders: tuple = (3, 4, 5, 6)
    folds: int = 5
    repeats: int = 20
    seed: int = 0
    beta_rule: str | None = None
    regressors: tuple = ("knn", "ridge")
    constant_beta: float | None = None
    shuffle_targets: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidInputError(f"unknown family {self.family!r}")
        if self.d < 1 or self.repeats < 1 or self.folds < 2 or not self.sizes:
            raise InvalidInputError("counts must be at least 1 and folds at least 2")
        if self.d // self.folds < 2:
            raise InvalidInputError("fold size must be at least 2")
        if min(self.orders) < 3:
            raise InvalidInputError("feature orders start at 3 (data are standardized)")
        for r in self.regressors:
            if r not in REGRESSORS:
                raise InvalidInputError(f"unknown regressor {r!r}")

    @property
    def rule(self) -> str:
        if self.beta_rule is not None:
            return self.beta_rule
        return "uniform" if self.family == "GND" else "log2_uniform"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        d = dict(d)
        for key in ("sizes", "orders", "regressors"):
            if key in d:
                d[key] = tuple(d[key])
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidInputError(str(exc)) from None

    def to_dict(self) -> dict:
        return asdict(self)


def make_dataset(spec: ExperimentSpec, n: int):
    """``(signals, targets)`` for sample size ``n``: ``d`` standardized vectors."""
    rng = np.random.default_rng([spec.seed, 1000 + n])
    if spec.constant_beta is not None:
        beta = np.full(spec.d, float(spec.constant_beta))
        target = np.log2(beta) if spec.rule == "log2_uniform" else beta
    elif spec.rule == "log2_uniform":
        target = rng.uniform(-3.0, 3.0, spec.d)
        beta = 2.0 ** target
    elif spec.rule == "uniform":
        target = rng.uniform(1.0, 6.0, spec.d)
        beta = target
    else:
        raise InvalidInputError(f"unknown beta rule {spec.rule!r}")
    X = _standardize(_draw(spec.family, beta, n, rng))
    return X, target


def extract_features(X: np.ndarray, orders: Sequence[int], mode: str) -> np.ndarray:
    """Per-vector features: standardized moments (MSM) or decoupled moments (DF_MSM)."""
    orders = tuple(orders)
    if mode == "MSM":
        return np.stack([batch_standardized_moment(X, p) for p in orders], axis=1)
    if mode == "DF_MSM":
        fs = moment_set(range(1, max(orders) + 1))
        vals = batch_decouple(X, fs, BENCH_OPTIONS)
        return vals[:, [p - 1 for p in orders]]
    raise InvalidInputError(f"feature mode must be MSM or DF_MSM, got {mode!r}")


def _zscore(train, test):
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (train - mu) / sd, (test - mu) / sd


def knn_regressor(train_x, train_y, test_x, k: int = 7) -> np.ndarray:
    """Inverse-distance weighted k-nearest-neighbour regression on z-scored features."""
    a, b = _zscore(train_x, test_x)
    d2 = np.sum(b * b, axis=1)[:, None] + np.sum(a * a, axis=1)[None] - 2 * b @ a.T
    d = np.sqrt(np.maximum(d2, 0.0))
    k = min(k, len(a))
    idx = np.argpartition(d, k - 1, axis=1)[:, :k]
    dk = np.take_along_axis(d, idx, axis=1)
    yk = train_y[idx]
    exact = dk <= 1e-12
    w = np.where(exact.any(axis=1, keepdims=True), exact.astype(float), 1.0 / np.maximum(dk, 1e-12))
    return np.sum(w * yk, axis=1) / np.sum(w, axis=1)


def ridge_regressor(train_x, train_y, test_x, lam: float = 1e-3) -> np.ndarray:
    """Ridge linear regression on z-scored predictors with an unpenalized intercept."""
    a, b = _zscore(train_x, test_x)
    y0 = train_y.mean()
    A = a.T @ a + lam * len(a) * np.eye(a.shape[1])
    w = np.linalg.solve(A, a.T @ (train_y - y0))
    return b @ w + y0


REGRESSORS = {"knn": knn_regressor, "ridge": ridge_regressor}


def kfold_indices(n: int, folds: int, rng) -> list[np.ndarray]:
    """A random partition of ``range(n)`` into ``folds`` nearly equal parts."""
    if n // folds < 2:
        raise InvalidInputError("fold size must be at least 2")
    return np.array_split(rng.permutation(n), folds)


def cv_rmse(F: np.ndarray, y: np.ndarray, regressor, folds: int, rng) -> float:
    pred = np.empty_like(y, dtype=float)
    for test in kfold_indices(len(y), folds, rng):
        train = np.setdiff1d(np.arange(len(y)), test, assume_unique=True)
        pred[test] = regressor(F[train], y[train], F[test])
    return float(np.sqrt(np.mean((pred - y) ** 2)))


@dataclass
class RegressionResult:
    """RMSE per (N, regressor, mode, repeat)."""

    spec: ExperimentSpec
    rmse: dict = field(default_factory=dict)  # (N, regressor, mode) -> array(repeats)

    def mean(self, n, regressor, mode) -> float:
        return float(np.mean(self.rmse[(n, regressor, mode)]))

    def rows(self):
        for (n, reg, mode), v in sorted(self.rmse.items()):
            yield {"family": self.spec.family, "N": n, "regressor": reg, "mode": mode,
                   "rmse_mean": float(np.mean(v)), "rmse_std": float(np.std(v)),
                   "repeats": len(v)}


def regression_benchmark(spec: ExperimentSpec, feature_mode=("MSM", "DF_MSM"),
                         features: dict | None = None) -> RegressionResult:
    """Repeated k-fold cross-validated RMSE of shape-parameter regression.

    One dataset is drawn per sample size; each repeat reshuffles the folds
    with its own seed, identically for every mode and regressor so the
    comparisons are paired. ``features`` may carry precomputed feature
    arrays keyed by ``(N, mode)``.
    """
    modes = (feature_mode,) if isinstance(feature_mode, str) else tuple(feature_mode)
    out = RegressionResult(spec)
    features = {} if features is None else features
    for n in spec.sizes:
        X, y = make_dataset(spec, n)
        if spec.shuffle_targets:
            y = np.random.default_rng([spec.seed, 2000 + n]).permutation(y)
        for mode in modes:
            if (n, mode) not in features:
                features[(n, mode)] = extract_features(X, spec.orders, mode)
        for reg in spec.regressors:
            for mode in modes:
                out.rmse[(n, reg, mode)] = np.array([
                    cv_rmse(features[(n, mode)], y, REGRESSORS[reg], spec.folds,
                            np.random.default_rng([spec.seed, r]))
                    for r in range(spec.repeats)])
    return out


# ---------------------------------------------------------------- textures


@dataclass
class PatchSet:
    patches: np.ndarray  # (P, h, w)
    labels: np.ndarray  # (P,)
    class_params: list = field(default_factory=list)


def _envelope(dims, f0, bw, angle, aniso):
    fy = np.fft.fftfreq(dims[0])[:, None]
    fx = np.fft.fftfreq(dims[1])[None, :]
    r = np.hypot(fx, fy)
    phi = np.arctan2(fy, fx)
    E = np.exp(-0.5 * ((r - f0) / bw) ** 2) * (1 + aniso * np.cos(2 * (phi - angle)))
    return E + 0.02


def _nonlinearity(z, gamma, a):
    g = np.sign(z) * np.abs(z) ** gamma
    return np.expm1(a * g) / a if abs(a) > 1e-8 else g


def synthetic_textures(n_classes: int = 8, patches_per_class: int = 16, dims=(32, 32),
                       seed: int = 0, class_params: list | None = None) -> PatchSet:
    """Seeded filtered-noise textures: one band-pass envelope and one monotone
    pointwise nonlinearity per class, fresh noise per patch.

    ``class_params`` (a list of dicts with keys f0, bw, angle, aniso, gamma, a)
    overrides the random class draws.
    """
    if n_classes < 1 or patches_per_class < 1:
        raise InvalidInputError("counts must be at least 1")
    dims = tuple(int(d) for d in dims)
    rng = np.random.default_rng([seed, 0])
    if class_params is None:
        class_params = [dict(f0=rng.uniform(0.08, 0.3), bw=rng.uniform(0.04, 0.1),
                             angle=rng.uniform(0, np.pi), aniso=rng.uniform(0, 0.8),
                             gamma=rng.uniform(0.7, 1.4), a=rng.uniform(-0.8, 0.8))
                        for _ in range(n_classes)]
    elif len(class_params) != n_classes:
        raise InvalidInputError("class_params length must equal n_classes")
    patches, labels = [], []
    for c, prm in enumerate(class_params):
        E = np.sqrt(_envelope(dims, prm["f0"], prm["bw"], prm["angle"], prm["aniso"]))
        noise = np.random.default_rng([seed, 1, c]).standard_normal((patches_per_class,) + dims)
        z = np.fft.ifft2(np.fft.fft2(noise) * E).real
        z /= z.std(axis=(1, 2), keepdims=True)
        patches.append(_nonlinearity(z, prm["gamma"], prm["a"]))
        labels.append(np.full(patches_per_class, c))
    return PatchSet(np.concatenate(patches), np.concatenate(labels), list(class_params))


TEXTURE_MODES = ("MSM_per_subband", "DF_MSM_per_subband", "DF_MF_joint")


def _subband_moments(Ysub: np.ndarray, orders) -> list[np.ndarray]:
    cols = []
    for p in orders:
        if p == 1:
            cols.append(Ysub.reshape(len(Ysub), -1).mean(axis=1))
        elif p == 2:
            Z = Ysub.reshape(len(Ysub), -1)
            cols.append(Z.var(axis=1))
        else:
            cols.append(batch_standardized_moment(Ysub, p))
    return cols


def texture_features(patches: np.ndarray, bank, orders, mode: str,
                     opts: IntegratorOptions = BENCH_OPTIONS) -> np.ndarray:
    """Per-patch feature vectors (subbands x orders) for one of the texture modes."""
    orders = tuple(orders)
    Y = np.asarray(patches, dtype=float)
    if mode == "DF_MF_joint":
        return batch_decouple(Y, filter_set(bank, orders), opts)
    cols = []
    for j in range(len(bank)):
        S = batch_filter_output(Y, bank, j)
        if mode == "MSM_per_subband":
            cols += _subband_moments(S, orders)
        elif mode == "DF_MSM_per_subband":
            vals = batch_decouple(S, moment_set(range(1, max(orders) + 1)), opts)
            cols += [vals[:, p - 1] for p in orders]
        else:
            raise InvalidInputError(f"mode must be one of {TEXTURE_MODES}, got {mode!r}")
    return np.stack(cols, axis=1)


def naive_bayes_error(F: np.ndarray, labels: np.ndarray, train, test) -> float:
    """Test error of a per-feature Gaussian naive Bayes classifier (equal priors)."""
    classes = np.unique(labels[train])
    a, b = _zscore(F[train], F[test])
    ll = []
    for c in classes:
        A = a[labels[train] == c]
        mu = A.mean(axis=0)
        var = A.var(axis=0) + 1e-6
        ll.append(-0.5 * np.sum((b - mu) ** 2 / var + np.log(var), axis=1))
    pred = classes[np.argmax(np.stack(ll, axis=1), axis=1)]
    return float(np.mean(pred != labels[test]))


def stratified_folds(labels: np.ndarray, folds: int, rng) -> list[np.ndarray]:
    parts = [[] for _ in range(folds)]
    for c in np.unique(labels):
        idx = rng.permutation(np.nonzero(labels == c)[0])
        for f, chunk in enumerate(np.array_split(idx, folds)):
            parts[f].extend(chunk.tolist())
    return [np.array(sorted(p), dtype=int) for p in parts]


@dataclass
class TextureResult:
    mode: str
    errors: np.ndarray  # per repeat

    @property
    def mean(self) -> float:
        return float(np.mean(self.errors))

    @property
    def std(self) -> float:
        return float(np.std(self.errors))


def texture_benchmark(patches: PatchSet, bank, orders=(2, 3, 4), feature_mode="MSM_per_subband",
                      folds: int = 4, repeats: int = 50, seed: int = 0,
                      features: np.ndarray | None = None,
                      shuffle_labels: bool = False) -> TextureResult:
    """Stratified k-fold naive-Bayes error, averaged over ``repeats`` reshuffles."""
    labels = np.asarray(patches.labels)
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise InvalidInputError("need at least two classes")
    if counts.min() < 2:
        raise InvalidInputError("every class needs at least two patches")
    if counts.min() < folds:
        raise InvalidInputError("every class needs at least one patch per fold")
    F = texture_features(patches.patches, bank, orders, feature_mode) if features is None \
        else features
    if shuffle_labels:
        labels = np.random.default_rng([seed, 3000]).permutation(labels)
    errs = []
    for r in range(repeats):
        rng = np.random.default_rng([seed, r])
        wrong = 0
        for test in stratified_folds(labels, folds, rng):
            train = np.setdiff1d(np.arange(len(labels)), test, assume_unique=True)
            wrong += naive_bayes_error(F, labels, train, test) * len(test)
        errs.append(wrong / len(labels))
    return TextureResult(feature_mode, np.array(errs))
