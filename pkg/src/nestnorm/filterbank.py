"""Filter banks and Fourier-domain normalization of subband variances.

For ``p = 2`` the filter-output moment is a weighted spectral energy,

    f_j(x) = (1/N**2) * sum_xi |H_j(xi)|**2 |X(xi)|**2,

and the flow along its gradient multiplies the spectrum by
``exp(t |H_j|**2)``. Concatenating such flows gives the closed-form family
``Y = X * exp(sum_j beta_j |H_j|**2)`` on which all subband variances can be
fixed at once by solving for ``beta``. Everything here works on the real
half-spectrum (``rfftn``), which keeps outputs exactly real.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import prod
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from .core import (FeatureSet, ReferenceValues, as_grid, batch_filter_output_moment,
                   filter_set, like_input)
from .errors import (ConvergenceError, DegenerateSignalError, InvalidInputError,
                     ShapeMismatchError, UnreachableValueError)
from .trace import DecoupledFeatures, NormalizationTrace, TraceStep

SUPPORT_TOL = 1e-12


class FilterBank:
    """An immutable set of real convolution kernels.

    Kernels are small arrays whose centre (index ``size // 2`` on each axis)
    is placed at the grid origin; frequency responses for a given grid are
    computed once and cached.
    """

    def __init__(self, kernels: Sequence, check: bool = True):
        ks = []
        for k in kernels:
            a = np.array(k, dtype=float)
            if a.ndim not in (1, 2) or a.size == 0:
                raise InvalidInputError("kernels must be non-empty 1-D or 2-D arrays")
            if not np.all(np.isfinite(a)):
                raise InvalidInputError("kernel contains NaN or Inf")
            if not np.any(a):
                raise InvalidInputError("kernel is identically zero")
            a.flags.writeable = False
            ks.append(a)
        if not ks:
            raise InvalidInputError("a filter bank needs at least one kernel")
        if len({k.ndim for k in ks}) != 1:
            raise InvalidInputError("all kernels must share one dimensionality")
        self.kernels = tuple(ks)
        self._full: dict[tuple, np.ndarray] = {}
        self._half: dict[tuple, np.ndarray] = {}
        if check:
            self.check_independent()

    def __len__(self):
        return len(self.kernels)

    def __repr__(self):
        shapes = ", ".join("x".join(map(str, k.shape)) for k in self.kernels)
        return f"FilterBank([{shapes}])"

    @property
    def ndim(self) -> int:
        return self.kernels[0].ndim

    def energy(self, j: int) -> float:
        """Sum of squared kernel taps."""
        return float(np.sum(self.kernels[j] ** 2))

    def _check_grid(self, grid) -> tuple[int, ...]:
        grid = tuple(int(g) for g in grid)
        if len(grid) != self.ndim:
            raise ShapeMismatchError(
                f"{self.ndim}-D kernels cannot filter a {len(grid)}-D signal")
        for k in self.kernels:
            if any(s > g for s, g in zip(k.shape, grid)):
                raise ShapeMismatchError(f"kernel of shape {k.shape} exceeds grid {grid}")
        return grid

    def embed(self, j: int, grid) -> np.ndarray:
        """Kernel ``j`` zero-padded onto ``grid`` with its centre at the origin."""
        grid = self._check_grid(grid)
        k = self.kernels[j]
        out = np.zeros(grid)
        idx = np.ix_(*[(np.arange(s) - s // 2) % g for s, g in zip(k.shape, grid)])
        out[idx] = k
        return out

    def response(self, grid) -> np.ndarray:
        """Full DFT responses, shape ``(K, *grid)``."""
        grid = self._check_grid(grid)
        if grid not in self._full:
            H = np.stack([np.fft.fftn(self.embed(j, grid)) for j in range(len(self))])
            H.flags.writeable = False
            self._full[grid] = H
        return self._full[grid]

    def rfft_response(self, grid) -> np.ndarray:
        """Half-spectrum responses, shape ``(K, *grid[:-1], grid[-1]//2 + 1)``."""
        grid = self._check_grid(grid)
        if grid not in self._half:
            H = np.stack([np.fft.rfftn(self.embed(j, grid)) for j in range(len(self))])
            H.flags.writeable = False
            self._half[grid] = H
        return self._half[grid]

    def power(self, grid) -> np.ndarray:
        """Squared magnitude responses ``|H_j|**2`` on the full grid."""
        return np.abs(self.response(grid)) ** 2

    def support(self, grid, tol: float = SUPPORT_TOL) -> np.ndarray:
        """Boolean mask of frequencies where some ``|H_j|**2`` exceeds ``tol``."""
        P = self.power(grid)
        return np.any(P > tol * P.max(), axis=0)

    def check_independent(self, grid=None) -> None:
        """Reject banks with co-linear squared responses (every point would be critical)."""
        if grid is None:
            grid = tuple(max(8, 2 * max(k.shape[d] for k in self.kernels))
                         for d in range(self.ndim))
        P = self.power(grid).reshape(len(self), -1)
        norms = np.linalg.norm(P, axis=1)
        cos = (P @ P.T) / np.outer(norms, norms)
        iu = np.triu_indices(len(self), 1)
        bad = np.nonzero(cos[iu] >= 1 - 1e-9)[0]
        if bad.size:
            i, j = iu[0][bad[0]], iu[1][bad[0]]
            raise InvalidInputError(f"kernels {i} and {j} have co-linear squared responses")


def builtin_bank(kind: str, size) -> FilterBank:
    """Built-in banks.

    ``complementary_pair_1d``
        Low-pass ``[1/2, 1/2]`` and high-pass ``[1/2, -1/2]``: on any grid the
        squared responses are ``cos**2(pi k/N)`` and ``sin**2(pi k/N)`` and sum
        to one.
    ``separable_9band_2d``
        Outer products of the 1-D kernels low ``[1,2,1]/4``, first difference
        ``[1,0,-1]/(2 sqrt 2)`` and second difference ``[-1,2,-1]/4``. Their
        squared responses sum to one in 1-D, so the nine 2-D bands form a
        Parseval frame of bar and edge detectors. Only the low-low band passes
        DC.
    """
    dims = (size,) if np.isscalar(size) else tuple(size)
    if any(int(d) != d or d < 1 for d in dims) or prod(dims) < 2:
        raise InvalidInputError(f"degenerate grid dims {size}")
    if kind == "complementary_pair_1d":
        if len(dims) != 1:
            raise InvalidInputError("complementary_pair_1d needs 1-D dims")
        return FilterBank([[0.5, 0.5], [0.5, -0.5]])
    if kind == "separable_9band_2d":
        if len(dims) != 2 or min(dims) < 3:
            raise InvalidInputError("separable_9band_2d needs 2-D dims of at least 3x3")
        return FilterBank(separable_9band_kernels())
    raise InvalidInputError(f"unknown bank kind {kind!r}")


def separable_9band_kernels() -> list[np.ndarray]:
    low = np.array([1.0, 2.0, 1.0]) / 4
    d1 = np.array([1.0, 0.0, -1.0]) / (2 * np.sqrt(2))
    d2 = np.array([-1.0, 2.0, -1.0]) / 4
    oned = (low, d1, d2)
    return [np.outer(a, b) for a in oned for b in oned]


# ---------------------------------------------------------------- spectral solver


def half_spectrum_weights(grid) -> np.ndarray:
    """Multiplicity of each rfftn bin in the full spectrum (1 or 2)."""
    grid = tuple(grid)
    n = grid[-1]
    w_last = np.full(n // 2 + 1, 2.0)
    w_last[0] = 1.0
    if n % 2 == 0:
        w_last[-1] = 1.0
    return np.broadcast_to(w_last, grid[:-1] + (n // 2 + 1,)).copy()


@dataclass
class SpectralFlowState:
    """Half-spectrum of a batch plus accumulated flow exponents ``beta``."""

    spectrum: np.ndarray  # (B, F) complex
    exponents: np.ndarray  # (B, k)
    grid: tuple[int, ...]


class _SpectralProblem:
    """Weighted spectral energies of a batch on a fixed set of subbands."""

    def __init__(self, Y: np.ndarray, bank: FilterBank, indices: Sequence[int]):
        self.grid = tuple(Y.shape[1:])
        self.N = prod(self.grid)
        axes = tuple(range(1, Y.ndim))
        self.X = np.fft.rfftn(Y, axes=axes).reshape(Y.shape[0], -1)
        Hr = bank.rfft_response(self.grid)
        self.P = (np.abs(Hr[list(indices)]) ** 2).reshape(len(indices), -1)
        w = half_spectrum_weights(self.grid).ravel()
        self.WP = self.P * w / self.N**2  # energy weights per band
        self.X2 = np.abs(self.X) ** 2

    def restrict(self, k: int) -> "_SpectralProblem":
        """The same batch seen through its first ``k`` subbands only."""
        sub = object.__new__(_SpectralProblem)
        sub.__dict__.update(self.__dict__)
        sub.P, sub.WP = self.P[:k], self.WP[:k]
        return sub

    def rows(self, idx) -> "_SpectralProblem":
        """The problem for a subset of the batch."""
        sub = object.__new__(_SpectralProblem)
        sub.__dict__.update(self.__dict__)
        sub.X, sub.X2 = self.X[idx], self.X2[idx]
        return sub

    def energies(self, beta: np.ndarray) -> np.ndarray:
        """Subband second moments after the flow with exponents ``beta`` (B, k)."""
        return (self.X2 * np.exp(2.0 * beta @ self.P)) @ self.WP.T

    def jacobian_log(self, beta: np.ndarray):
        """Energies and the Jacobian of their logs with respect to ``beta``."""
        Y2 = self.X2 * np.exp(2.0 * beta @ self.P)
        E = Y2 @ self.WP.T
        J = 2.0 * np.einsum("bf,jf,lf->bjl", Y2, self.WP, self.P, optimize=True)
        return E, J / E[:, :, None]

    def signal(self, beta: np.ndarray) -> np.ndarray:
        Y = self.X * np.exp(beta @ self.P)
        Y = Y.reshape((Y.shape[0],) + self.grid[:-1] + (self.grid[-1] // 2 + 1,))
        axes = tuple(range(1, len(self.grid) + 1))
        return np.fft.irfftn(Y, s=self.grid, axes=axes)


def _newton_log(prob: _SpectralProblem, targets: np.ndarray, beta0: np.ndarray,
                max_iter: int = 100, tol: float = 1e-14, max_halvings: int = 30,
                accept: float = 1e-11):
    """Damped Newton on ``log E(beta) = log targets``.

    Each row of the batch is solved independently. A row stops when its
    largest log-residual drops below ``tol`` or when no halved step reduces it
    any further; it counts as converged if the residual is then below
    ``accept``. Returns ``(beta, converged)``.
    """
    logt = np.log(targets)
    beta = beta0.copy()
    r = np.log(prob.energies(beta)) - logt
    merit = np.max(np.abs(r), axis=1)
    done = merit <= tol
    for _ in range(max_iter):
        idx = np.nonzero(~done)[0]
        if idx.size == 0:
            break
        act = prob.rows(idx)
        _, J = act.jacobian_log(beta[idx])
        try:
            step = np.linalg.solve(J, -r[idx][:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            step = np.stack([np.linalg.lstsq(Ji, -ri, rcond=None)[0]
                             for Ji, ri in zip(J, r[idx])])
        lam = np.ones(idx.size)
        pending = np.ones(idx.size, bool)
        trial_r = np.empty_like(r[idx])
        trial_m = np.full(idx.size, np.inf)
        for _h in range(max_halvings + 1):
            cand = beta[idx][pending] + lam[pending, None] * step[pending]
            with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
                rc = np.log(act.rows(pending).energies(cand)) - logt[idx][pending]
            mc = np.max(np.abs(rc), axis=1)
            mc[~np.isfinite(mc)] = np.inf
            pidx = np.nonzero(pending)[0]
            trial_r[pidx], trial_m[pidx] = rc, mc
            ok = mc < merit[idx][pending]
            pending[pidx[ok]] = False
            if not np.any(pending):
                break
            lam[pending] *= 0.5
        improved = trial_m < merit[idx]
        upd = idx[improved]
        beta[upd] = beta[upd] + lam[improved, None] * step[improved]
        r[upd] = trial_r[improved]
        merit[upd] = trial_m[improved]
        done[idx[~improved]] = True
        done[merit <= tol] = True
    return beta, merit <= accept


def _gauss_seidel_log(prob: _SpectralProblem, targets: np.ndarray, beta0: np.ndarray,
                      sweeps: int = 500, tol: float = 1e-12):
    """Cyclic one-exponent-at-a-time solve used when Newton fails."""
    logt = np.log(targets)
    beta = beta0.copy()
    k = beta.shape[1]
    for _ in range(sweeps):
        for j in range(k):
            for _inner in range(50):
                E, J = prob.jacobian_log(beta)
                rj = np.log(E[:, j]) - logt[:, j]
                if np.all(np.abs(rj) < tol * 1e-2):
                    break
                beta[:, j] -= rj / J[:, j, j]
        E = prob.energies(beta)
        if np.all(np.abs(np.log(E) - logt) < tol):
            return beta, np.ones(beta.shape[0], bool)
    E = prob.energies(beta)
    return beta, np.max(np.abs(np.log(E) - logt), axis=1) < tol


def spectral_solve(Y: np.ndarray, bank: FilterBank, indices: Sequence[int], targets,
                   beta0=None, fallback: bool = True):
    """Find ``beta`` with subband variances ``targets`` for a batch ``Y`` (B, *grid).

    Returns ``(out, beta, solver)`` where ``solver`` is ``"newton"`` or
    ``"gauss-seidel"``.
    """
    Y = np.asarray(Y, dtype=float)
    prob = _SpectralProblem(Y, bank, indices)
    k = len(indices)
    targets = np.broadcast_to(np.asarray(targets, dtype=float), (Y.shape[0], k)).copy()
    if np.any(targets <= 0):
        bad = int(np.nonzero(np.any(targets <= 0, axis=0))[0][0])
        raise UnreachableValueError(
            f"subband variance target must be positive (feature {indices[bad]})", indices[bad])
    E0 = prob.energies(np.zeros((Y.shape[0], k)))
    scale = (prob.X2 @ (np.abs(prob.WP).T)).max()
    if np.any(E0 <= 1e-300) or np.any(E0 <= 1e-28 * max(scale, 1e-300)):
        raise DegenerateSignalError(
            "zero spectrum on a subband support; apply spectral_floor first")
    beta = np.zeros((Y.shape[0], k)) if beta0 is None else np.array(beta0, dtype=float)
    beta, ok = _newton_log(prob, targets, beta)
    solver = "newton"
    if not np.all(ok):
        if not fallback:
            raise ConvergenceError("Newton iteration on spectral exponents did not converge")
        bad = ~ok
        sub = _SpectralProblem(Y[bad], bank, indices)
        b2, ok2 = _gauss_seidel_log(sub, targets[bad], np.zeros((int(bad.sum()), k)))
        if not np.all(ok2):
            raise ConvergenceError(
                "spectral exponents did not converge (Newton and Gauss-Seidel both failed)")
        beta[bad] = b2
        solver = "gauss-seidel"
    return prob.signal(beta), beta, solver


def _vf_indices(fs: FeatureSet) -> list[int]:
    idx = []
    for f in fs.features:
        if f.kind != "filter" or f.p != 2:
            raise InvalidInputError("spectral normalization needs second-order filter features")
        idx.append(f.filter_index)
    return idx


def vf_references(bank: FilterBank) -> ReferenceValues:
    return filter_set(bank, (2,)).references


def spectral_normalize(x, bank: FilterBank, refs=None, k: int | None = None):
    """Pin the first ``k`` subband variances at ``refs`` with one spectral flow.

    Returns ``(signal, trace)``; the trace stores the exponents ``beta``.
    """
    g = as_grid(x)
    refs = vf_references(bank) if refs is None else ReferenceValues(tuple(refs))
    k = len(bank) if k is None else int(k)
    if not 1 <= k <= len(bank) or k > len(refs):
        raise InvalidInputError(f"k={k} out of range for a {len(bank)}-band bank")
    idx = list(range(k))
    fs = filter_set(bank, (2,))
    before = fs.values(g)[:k]
    out, beta, solver = spectral_solve(g[None], bank, idx, refs.values[:k])
    trace = NormalizationTrace(fs.prefix(k), grid_shape=g.shape, solver=solver)
    for j in range(k):
        trace.steps.append(TraceStep(j, float(before[j]), float(refs[j]), "spectral",
                                     {"beta": beta[0].copy()}))
    return like_input(x, out[0]), trace


def complementary_pair_normalize(x, bank: FilterBank, refs=None):
    """Two-stage analytic normalization for a Parseval pair.

    Stage one flows along the first feature's gradient,
    ``Y1 = X exp(t1 |H1|**2)``, until ``f1 = v1``. Stage two flows along
    ``|H2|**2`` while dividing by the square root of ``f1/v1`` so that the
    first subband stays pinned; ``t2`` is chosen so that ``f2 = v2``. Both
    scalars are found by bracketing and Brent's method.
    """
    g = as_grid(x)
    if len(bank) != 2 or g.ndim != 1:
        raise InvalidInputError("complementary_pair_normalize needs a 2-kernel bank and a 1-D signal")
    refs = vf_references(bank) if refs is None else ReferenceValues(tuple(refs))
    v1, v2 = refs[0], refs[1]
    if v1 <= 0 or v2 <= 0:
        raise UnreachableValueError("subband variance references must be positive")
    prob = _SpectralProblem(g[None], bank, [0, 1])
    E0 = prob.energies(np.zeros((1, 2)))[0]
    if np.any(E0 <= 0):
        raise DegenerateSignalError("zero spectrum on a subband support")

    def f1_stage1(t):
        return np.log(prob.energies(np.array([[t, 0.0]]))[0, 0]) - np.log(v1)

    t1 = _bracket_root(f1_stage1)
    # stage 2 combined exponents: beta = (t1 + c, t2 + c) with c a global scale
    def stage2(t):
        E = prob.energies(np.array([[t1, t]]))[0]
        return np.log(E[1] / E[0]) - np.log(v2 / v1)

    t2 = _bracket_root(stage2)
    E = prob.energies(np.array([[t1, t2]]))[0]
    c = 0.5 * np.log(v1 / E[0])
    beta = np.array([[t1 + c, t2 + c]])
    out = prob.signal(beta)[0]
    fs = filter_set(bank, (2,))
    before = fs.values(g)
    trace = NormalizationTrace(fs, grid_shape=g.shape, solver="complementary-pair")
    trace.steps.append(TraceStep(0, float(before[0]), v1, "spectral", {"t": t1}))
    trace.steps.append(TraceStep(1, float(before[1]), v2, "spectral-ratio",
                                 {"t": t2, "scale_exponent": c, "beta": beta[0].copy()}))
    return like_input(x, out), trace


def _bracket_root(fun, lo=-1.0, hi=1.0, max_expand=80):
    flo, fhi = fun(lo), fun(hi)
    for _ in range(max_expand):
        if np.sign(flo) != np.sign(fhi) or flo == 0 or fhi == 0:
            break
        if abs(flo) < abs(fhi):
            lo *= 2.0
            flo = fun(lo)
        else:
            hi *= 2.0
            fhi = fun(hi)
    else:
        raise ConvergenceError("could not bracket the flow parameter")
    if flo == 0:
        return lo
    if fhi == 0:
        return hi
    return brentq(fun, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)


def batch_decoupled_filter_features(Y: np.ndarray, bank: FilterBank, refs=None,
                                    indices=None) -> np.ndarray:
    """Decoupled subband variances for a batch (B, *grid) -> (B, M)."""
    idx = list(range(len(bank))) if indices is None else list(indices)
    fs = filter_set(bank, (2,), idx)
    refs = fs.references.values if refs is None else tuple(refs)
    prob = _SpectralProblem(Y, bank, idx)
    B, M = Y.shape[0], len(idx)
    out = np.empty((B, M))
    out[:, 0] = batch_filter_output_moment(Y, bank, idx[0], 2)  # f1 is never moved
    beta = np.zeros((B, 0))
    for k in range(1, M):
        sub = prob.restrict(k)
        beta0 = np.concatenate([beta, np.zeros((B, 1))], axis=1) if k > 1 else np.zeros((B, 1))
        beta, ok = _newton_log(sub, np.broadcast_to(refs[:k], (B, k)).copy(), beta0)
        if not np.all(ok):
            raise ConvergenceError(f"spectral normalization at level {k} did not converge")
        full = np.concatenate([beta, np.zeros((B, M - k))], axis=1)
        out[:, k] = prob.energies(full)[:, k]
    return out


def decoupled_filter_features(x, bank: FilterBank, refs=None) -> DecoupledFeatures:
    """``f1(x)`` followed by each next subband variance after pinning the previous ones."""
    g = as_grid(x)
    vals = batch_decoupled_filter_features(g[None], bank, refs)[0]
    return DecoupledFeatures(vals, filter_set(bank, (2,)).features)
