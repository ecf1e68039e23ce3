"""Instruments for checking decoupling empirically.

* finite-difference gradients;
* deviation from orthogonality (DO), ``90 - angle`` between two gradients;
* local feature covariance ``sigma_d**2 * grad f_n . grad f_m``;
* the commutator (Lie bracket) test for integrability of a feature set;
* a small discrimination experiment contrasting kurtosis with orthokurtosis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
import warnings
from typing import Callable, Sequence

import numpy as np

from .core import (FeatureSet, FeatureSpec, as_grid, batch_standardized_moment, filter_set,
                   ipow, moment_set, standardized_set)
from .errors import InvalidInputError, NestNormError
from .gradproj import batch_feature_gradient, batch_orthogonal_complement
from .nen import IntegratorOptions, batch_decouple, batch_orthokurtosis

DO_OPTIONS = IntegratorOptions(step_tol=1e-7, analytic_arcs=True, lockstep=True)


# ---------------------------------------------------------------- gradients


def default_eps(x) -> float:
    return 1e-5 * max(1.0, float(np.max(np.abs(as_grid(x)))))


def numeric_gradient(feature_eval: Callable, x, eps: float | None = None,
                     vectorized: bool = False) -> np.ndarray:
    """Central-difference gradient ``(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)``.

    With ``vectorized=True`` the evaluator receives all ``2N`` perturbed
    signals at once as an array of shape ``(2N, *grid)`` and may return
    either ``(2N,)`` or ``(2N, M)`` values; in the latter case the result
    has shape ``(M, *grid)``.
    """
    g = as_grid(x)
    eps = default_eps(g) if eps is None else float(eps)
    if not eps > 0:
        raise InvalidInputError("eps must be positive")
    N = g.size
    E = eps * np.eye(N).reshape((N,) + g.shape)
    batch = np.concatenate([g[None] + E, g[None] - E])
    if vectorized:
        vals = np.asarray(feature_eval(batch), dtype=float)
    else:
        vals = np.array([feature_eval(b) for b in batch], dtype=float)
    if not np.all(np.isfinite(vals)):
        raise NestNormError("feature evaluation returned non-finite values")
    diff = (vals[:N] - vals[N:]) / (2 * eps)
    if diff.ndim == 1:
        return diff.reshape(g.shape)
    return diff.T.reshape((diff.shape[1],) + g.shape)


def deviation_from_orthogonality(g1, g2) -> float:
    """``90 - angle(g1, g2)`` in degrees (0 means orthogonal)."""
    a = np.ravel(g1)
    b = np.ravel(g2)
    c = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
    return 90.0 - float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


# ---------------------------------------------------------------- DO matrix


@dataclass
class DOMatrix:
    """Signed DO per trial plus per-pair statistics of ``|DO|``.

    ``summary_mean``/``summary_std`` pool ``|DO|`` over every trial and
    every off-diagonal pair not touching an ``excluded`` feature.
    """

    pairwise: np.ndarray  # (trials, M, M)
    abs_mean: np.ndarray
    abs_std: np.ndarray
    labels: tuple[str, ...]
    excluded: tuple[int, ...] = ()
    skipped: list[tuple[int, int, int]] = field(default_factory=list)

    def included_pairs(self):
        M = len(self.labels)
        return [(i, j) for i, j in combinations(range(M), 2)
                if i not in self.excluded and j not in self.excluded]

    def pooled(self) -> np.ndarray:
        pairs = self.included_pairs()
        vals = np.abs(np.stack([self.pairwise[:, i, j] for i, j in pairs], axis=1))
        return vals[np.isfinite(vals)]

    @property
    def summary_mean(self) -> float:
        return float(np.mean(self.pooled()))

    @property
    def summary_std(self) -> float:
        return float(np.std(self.pooled()))


def _gradient_table(features, x) -> np.ndarray:
    if callable(features):
        return np.asarray(features(x), dtype=float)
    rows = []
    for evaluator, mode in features:
        if mode == "analytic":
            rows.append(np.ravel(evaluator(x)))
        elif mode == "numeric":
            rows.append(np.ravel(numeric_gradient(evaluator, x)))
        else:
            raise InvalidInputError(f"mode must be 'analytic' or 'numeric', got {mode!r}")
    return np.stack(rows)


def do_matrix(features, xs: Sequence, exclude: Sequence[int] = (),
              labels: Sequence[str] | None = None) -> DOMatrix:
    """DO between every pair of feature gradients, over a set of signals.

    ``features`` is either a sequence of ``(evaluator, mode)`` pairs, where
    ``mode`` is ``"analytic"`` (the evaluator returns the gradient) or
    ``"numeric"`` (it returns the feature value and the gradient is taken by
    central differences), or a single callable returning the ``(M, N)``
    gradient table at ``x``. Pairs with a zero gradient are skipped and
    listed in ``skipped`` as ``(trial, i, j)``.
    """
    xs = list(xs)
    if not xs:
        raise InvalidInputError("need at least one signal")
    tables = [_gradient_table(features, x) for x in xs]
    M = tables[0].shape[0]
    T = len(tables)
    do = np.full((T, M, M), 90.0)
    skipped = []
    for t, G in enumerate(tables):
        G = G.reshape(M, -1)
        norms = np.linalg.norm(G, axis=1)
        for i, j in combinations(range(M), 2):
            if norms[i] == 0 or norms[j] == 0:
                do[t, i, j] = do[t, j, i] = np.nan
                skipped.append((t, i, j))
                continue
            v = deviation_from_orthogonality(G[i], G[j])
            do[t, i, j] = do[t, j, i] = v
    with np.errstate(invalid="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-skipped pairs stay nan
        absdo = np.abs(do)
        mean = np.nanmean(absdo, axis=0)
        std = np.nanstd(absdo, axis=0)
    labels = tuple(labels) if labels is not None else tuple(f"f{i + 1}" for i in range(M))
    return DOMatrix(do, mean, std, labels, tuple(exclude), skipped)


# ---------------------------------------------------------------- families


FAMILIES = ("mm", "msm", "df_msm", "vf", "df_vf", "mf", "df_mf")


def family_gradients(family: str, orders=range(1, 7), bank=None,
                     opts: IntegratorOptions = DO_OPTIONS) -> Callable:
    """Callable ``x -> (M, N)`` gradient table for a named feature family.

    Coupled families use analytic gradients; decoupled ones (``df_*``) use
    central differences of the batched nested normalization.
    """
    orders = tuple(orders)
    if family == "mm":
        fs = moment_set(orders)
        return lambda x: np.stack([np.ravel(batch_feature_gradient(as_grid(x)[None], f,
                                                                   exact=True)[0])
                                   for f in fs.features])
    if family == "msm":
        fs = standardized_set(orders)
        return lambda x: np.stack([np.ravel(batch_feature_gradient(as_grid(x)[None], f,
                                                                   exact=True)[0])
                                   for f in fs.features])
    if family == "df_msm":
        fs = moment_set(orders)
        return lambda x: numeric_gradient(lambda B: batch_decouple(B, fs, opts), x,
                                          vectorized=True).reshape(len(fs), -1)
    if bank is None:
        raise InvalidInputError(f"family {family!r} needs a filter bank")
    if family == "vf":
        fs = filter_set(bank, (2,))
        return lambda x: np.stack([np.ravel(batch_feature_gradient(as_grid(x)[None], f, bank,
                                                                   exact=True)[0])
                                   for f in fs.features])
    if family == "df_vf":
        from .filterbank import batch_decoupled_filter_features
        return lambda x: numeric_gradient(lambda B: batch_decoupled_filter_features(B, bank),
                                          x, vectorized=True).reshape(len(bank), -1)
    if family == "mf":
        fs = filter_set(bank, orders)
        return lambda x: np.stack([np.ravel(batch_feature_gradient(as_grid(x)[None], f, bank,
                                                                   exact=True)[0])
                                   for f in fs.features])
    if family == "df_mf":
        fs = filter_set(bank, orders)
        return lambda x: numeric_gradient(lambda B: batch_decouple(B, fs, opts), x,
                                          vectorized=True).reshape(len(fs), -1)
    raise InvalidInputError(f"unknown family {family!r}; choose from {FAMILIES}")


def family_labels(family: str, orders=range(1, 7), bank=None) -> tuple[str, ...]:
    if family in ("vf", "df_vf"):
        return tuple(f"band{j}" for j in range(len(bank)))
    if family in ("mf", "df_mf"):
        return tuple(f.label for f in filter_set(bank, tuple(orders)).features)
    return tuple(f"p{p}" for p in orders)


def family_exclusions(family: str, orders=range(1, 7)) -> tuple[int, ...]:
    """Marginal-moment families leave the mean and variance out of summaries."""
    if family in ("mm", "msm", "df_msm"):
        return tuple(i for i, p in enumerate(orders) if p <= 2)
    return ()


# ---------------------------------------------------------------- covariance


@dataclass(frozen=True)
class LocalCovariance:
    matrix: np.ndarray
    sigma_d2: float


def local_covariance(features, x0, sigma_d2: float, decoupled: bool = False) -> LocalCovariance:
    """First-order covariance of features under small isotropic noise at ``x0``.

    ``C[n, m] = sigma_d2 * grad f_n(x0) . grad f_m(x0)``. ``features`` is a
    FeatureSet or an ``(M, N)`` array of gradients. With ``decoupled=True``
    the gradients of the decoupled features at a point of the reference
    manifold are used, i.e. each gradient with the previous ones projected
    out.
    """
    if isinstance(features, FeatureSet):
        Y = as_grid(x0)[None]
        G = np.stack([batch_feature_gradient(Y, f, features.bank, exact=True).ravel()
                      for f in features.features])
        if decoupled:
            G = np.stack([batch_orthogonal_complement(G[None, i], G[None, :i])[0]
                          for i in range(len(G))])
    else:
        G = np.asarray(features, dtype=float)
        G = G.reshape(G.shape[0], -1)
    C = sigma_d2 * (G @ G.T)
    return LocalCovariance(0.5 * (C + C.T), float(sigma_d2))


# ---------------------------------------------------------------- Frobenius


def hessian_vector(x, f: FeatureSpec, v, bank=None) -> np.ndarray:
    """Hessian of ``f`` at ``x`` applied to ``v`` (raw and filter moments)."""
    g = as_grid(x)
    v = np.asarray(v, dtype=float).reshape(g.shape)
    N = g.size
    p = f.p
    if f.kind == "raw":
        return (p * (p - 1) / N) * ipow(g, p - 2) * v if p >= 2 else np.zeros_like(g)
    if f.kind == "filter":
        H = bank.rfft_response(g.shape)[f.filter_index]
        conv = lambda a, k: np.fft.irfftn(np.fft.rfftn(a) * k, s=g.shape, axes=tuple(range(g.ndim)))
        if p == 1:
            return np.zeros_like(g)
        y = conv(g, H)
        return (p * (p - 1) / N) * conv(ipow(y, p - 2) * conv(v, H), np.conj(H))
    raise InvalidInputError("Hessians are provided for raw and filter-output moments only")


def commutator(x, f: FeatureSpec, g: FeatureSpec, bank=None) -> tuple[np.ndarray, float]:
    """Lie bracket of the gradient fields of ``f`` and ``g`` at ``x``.

    Component ``j`` is ``sum_l (d_l f d_lj g - d_l g d_lj f)``. Also returns
    the scale ``max(|H_g grad f|, |H_f grad g|)`` against which residuals are
    measured.
    """
    Y = as_grid(x)[None]
    gf = batch_feature_gradient(Y, f, bank, exact=True)[0]
    gg = batch_feature_gradient(Y, g, bank, exact=True)[0]
    a = hessian_vector(x, g, gf, bank)
    b = hessian_vector(x, f, gg, bank)
    return (a - b).ravel(), float(max(np.linalg.norm(a), np.linalg.norm(b)))


def frobenius_residual(x, fs: FeatureSet) -> np.ndarray:
    """Relative distance of every pairwise commutator from the gradient span.

    Entry ``[i, j]`` is ``|(I - P) [X_i, X_j]| / scale`` where ``P`` projects
    on ``span{grad f_1 .. grad f_M}`` at ``x``. All entries vanish when the
    set satisfies the Frobenius integrability condition.
    """
    Y = as_grid(x)[None]
    G = np.stack([batch_feature_gradient(Y, f, fs.bank, exact=True).ravel()
                  for f in fs.features])
    M = len(fs)
    R = np.zeros((M, M))
    for i, j in combinations(range(M), 2):
        c, scale = commutator(x, fs.features[i], fs.features[j], fs.bank)
        if scale == 0:
            continue
        r = batch_orthogonal_complement(c[None], G[None])[0]
        R[i, j] = R[j, i] = np.linalg.norm(r) / scale
    return R


# ---------------------------------------------------------------- discrimination


@dataclass
class DiscriminationReport:
    """Misclassification probabilities of Gaussian class models.

    ``coupled`` uses (skewness, kurtosis); ``decoupled`` uses (skewness,
    orthokurtosis). Each headline number is the probability that the
    maximum-likelihood rule (equal priors) assigns a point drawn from one
    class model to another class; ``*_pairwise`` holds the two-class error of
    the likelihood-ratio test for every pair.
    """

    thetas: tuple[float, ...]
    coupled: float
    decoupled: float
    coupled_pairwise: dict = field(default_factory=dict)
    decoupled_pairwise: dict = field(default_factory=dict)


def _gauss_logpdf(points, mean, cov):
    L = np.linalg.cholesky(cov)
    z = np.linalg.solve(L, (points - mean).T)
    return -0.5 * np.sum(z * z, axis=0) - np.log(np.diag(L)).sum() \
        - 0.5 * len(mean) * np.log(2 * np.pi)


def _model_errors(features: list[np.ndarray], rng, n_mc: int):
    models = []
    for F in features:
        cov = np.cov(F.T)
        if not np.all(np.isfinite(cov)) or np.linalg.matrix_rank(cov) < cov.shape[0] \
                or np.linalg.eigvalsh(cov)[0] <= 0:
            raise InvalidInputError("singular class covariance; use more vectors per class")
        models.append((F.mean(axis=0), cov))
    K = len(models)
    if K < 2:
        return 0.0, {}
    samples = [rng.multivariate_normal(m, c, size=n_mc) for m, c in models]
    loglik = [np.stack([_gauss_logpdf(s, m, c) for m, c in models], axis=1) for s in samples]
    overall = float(np.mean([np.mean(np.argmax(L, axis=1) != k) for k, L in enumerate(loglik)]))
    pairwise = {}
    for i, j in combinations(range(K), 2):
        e_i = np.mean(loglik[i][:, j] > loglik[i][:, i])
        e_j = np.mean(loglik[j][:, i] > loglik[j][:, j])
        pairwise[(i, j)] = float(0.5 * (e_i + e_j))
    return overall, pairwise


def discrimination_experiment(thetas: Sequence[float] = (5, 6, 7), n_vectors: int = 128,
                              n_samples: int = 1024, seed: int = 0,
                              n_mc: int = 100_000, swap: bool = False) -> DiscriminationReport:
    """Separate classes ``x0**theta`` (``x0 ~ U(0,1)``) with coupled vs decoupled features.

    Per class, fits a bivariate Gaussian to (skewness, kurtosis) and to
    (skewness, orthokurtosis) and estimates misclassification by Monte Carlo
    with ``n_mc`` points per class. ``swap`` exchanges the two feature pairs
    (a symmetry check of the harness).
    """
    thetas = tuple(float(t) for t in thetas)
    if len(set(thetas)) != len(thetas):
        raise InvalidInputError("thetas must be distinct")
    if n_vectors < 2 or n_samples < 2:
        raise InvalidInputError("counts must be at least 2")
    rng = np.random.default_rng(seed)
    coupled, decoupled = [], []
    for th in thetas:
        X = rng.uniform(size=(n_vectors, n_samples)) ** th
        skew = batch_standardized_moment(X, 3)
        coupled.append(np.stack([skew, batch_standardized_moment(X, 4)], axis=1))
        decoupled.append(np.stack([skew, batch_orthokurtosis(X)], axis=1))
    if swap:
        coupled, decoupled = decoupled, coupled
    mc = np.random.default_rng([seed, 1])
    ec, pc = _model_errors(coupled, mc, n_mc)
    mc = np.random.default_rng([seed, 1])
    ed, pd = _model_errors(decoupled, mc, n_mc)
    return DiscriminationReport(thetas, ec, ed, pc, pd)
