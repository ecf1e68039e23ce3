"""Feature gradients and their projection onto nested reference manifolds.

Gradients are returned *without* the positive factors ``p/N`` (and ``1/s``
for standardized moments) unless ``exact=True``. Only the direction and the
relative magnitudes within one feature matter to the flows.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import prod
from typing import Sequence

import numpy as np

from .core import FeatureSpec, as_grid, ipow, _grid_axes
from .errors import DegenerateSignalError, InvalidInputError, RankDeficiencyError

PIVOT_TOL = 1e-12


def _bshape(Y, v):
    """Broadcast a per-row vector against a batch."""
    return np.reshape(v, (-1,) + (1,) * (Y.ndim - 1))


def gradient_scale(Y: np.ndarray, f: FeatureSpec) -> np.ndarray:
    """Factor turning the scale-free gradient of ``f`` into the true one (per row)."""
    N = prod(Y.shape[1:])
    if f.kind == "standardized" and f.p >= 3:
        axes = _grid_axes(Y)
        s = np.sqrt(np.var(Y, axis=axes))
        return f.p / (N * s)
    return np.full(Y.shape[0], f.p / N)


def batch_feature_gradient(Y: np.ndarray, f: FeatureSpec, bank=None,
                           exact: bool = False) -> np.ndarray:
    """Gradient of ``f`` for every signal of the batch ``Y`` (B, *grid)."""
    axes = _grid_axes(Y)
    p = f.p
    if f.kind == "raw":
        G = ipow(Y, p - 1)
    elif f.kind == "standardized":
        if p == 1:
            G = np.ones_like(Y)
        elif p == 2:
            G = Y - np.mean(Y, axis=axes, keepdims=True)
        else:
            d = Y - np.mean(Y, axis=axes, keepdims=True)
            s = np.sqrt(np.mean(d * d, axis=axes, keepdims=True))
            if np.any(s == 0):
                raise DegenerateSignalError("zero variance: standardized moments are undefined")
            z = d / s
            zp1 = ipow(z, p - 1)
            G = zp1 - np.mean(zp1, axis=axes, keepdims=True) \
                - np.mean(zp1 * z, axis=axes, keepdims=True) * z
    elif f.kind == "filter":
        if bank is None:
            raise InvalidInputError("filter features need a FilterBank")
        grid = Y.shape[1:]
        H = bank.rfft_response(grid)[f.filter_index]
        X = np.fft.rfftn(Y, axes=axes)
        if p == 1:
            G = np.full_like(Y, np.real(H.flat[0]))
        elif p == 2:
            G = np.fft.irfftn(np.abs(H) ** 2 * X, s=grid, axes=axes)
        else:
            y = np.fft.irfftn(X * H, s=grid, axes=axes)
            G = np.fft.irfftn(np.fft.rfftn(ipow(y, p - 1), axes=axes) * np.conj(H),
                              s=grid, axes=axes)
    else:  # pragma: no cover - FeatureSpec validates kinds
        raise InvalidInputError(f"unknown feature kind {f.kind!r}")
    if exact:
        G = G * _bshape(Y, gradient_scale(Y, f))
    return G


def feature_gradient(x, f: FeatureSpec, bank=None, exact: bool = False) -> np.ndarray:
    """Gradient of feature ``f`` at ``x``, shaped like ``x``.

    By default the positive factor ``p/N`` is dropped (``p/(N s)`` for
    standardized moments of order 3 and up); pass ``exact=True`` for the true
    gradient.
    """
    if f.kind == "filter" and bank is None:
        raise InvalidInputError("filter features need a FilterBank")
    return batch_feature_gradient(as_grid(x)[None], f, bank, exact)[0]


# ---------------------------------------------------------------- Gram-Schmidt


def gram_schmidt_project(grad, basis: Sequence, tol: float = 1e-12,
                         return_skipped: bool = False):
    """Remove from ``grad`` its projection on ``span(basis)``.

    The basis is orthonormalised by modified Gram-Schmidt with a second
    re-orthogonalization pass; basis vectors whose residual norm falls below
    ``tol`` times their original norm are skipped (and reported when
    ``return_skipped`` is true). ``grad`` is then projected twice against the
    orthonormal set.
    """
    g = np.array(grad, dtype=float)
    shape = g.shape
    g = g.ravel()
    Q: list[np.ndarray] = []
    skipped: list[int] = []
    for i, b in enumerate(basis):
        v = np.array(b, dtype=float).ravel()
        if v.shape != g.shape:
            raise InvalidInputError("basis vectors must match the gradient length")
        n0 = np.linalg.norm(v)
        if n0 == 0:
            skipped.append(i)
            continue
        for _ in range(2):
            for q in Q:
                v -= (q @ v) * q
        n = np.linalg.norm(v)
        if n <= tol * n0:
            skipped.append(i)
            continue
        Q.append(v / n)
    for _ in range(2):
        for q in Q:
            g -= (q @ g) * q
    g = g.reshape(shape)
    return (g, skipped) if return_skipped else g


def batch_orthogonal_complement(G: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """Project each row of ``G`` (B, N) off the span of ``basis`` (B, m, N).

    Uses a QR factorisation per row with one refinement pass.
    """
    if basis.shape[1] == 0:
        return G.copy()
    Q, _ = np.linalg.qr(np.swapaxes(basis, 1, 2))  # (B, N, m)
    out = G.copy()
    for _ in range(2):
        out -= np.einsum("bnm,bm->bn", Q, np.einsum("bnm,bn->bm", Q, out))
    return out


# ---------------------------------------------------------------- moment recursion


@dataclass
class MomentProjectionCache:
    """Intermediate tables of the closed-form projected-moment recursion.

    The recursion runs on the standardized signal ``z``; ``raw_moments[i]``
    holds ``f_i(z)`` for ``i = 0 .. 2k-2``. ``c[l]`` is the level-``l`` table
    ``c^{(l)}_{i,j}`` divided by its level-``l-1`` pivot (a positive factor
    that leaves every ratio ``a`` unchanged but keeps the numbers O(1)).
    ``a[j, k]`` is the coefficient of ``g_j`` in ``g_k``.
    """

    raw_moments: np.ndarray
    c: list[np.ndarray]
    a: np.ndarray
    mean: float
    std: float


def _moment_tables(F: np.ndarray, k: int):
    """Batched c/a tables from raw moments ``F`` (B, 2k-1) of standardized rows.

    Returns ``(c_levels, a, pivots)`` with ``a`` of shape (B, k+1, k+1)
    (1-based indices) and ``pivots[:, j]`` the normalised pivot used for
    ``g_j`` (``j >= 2``).
    """
    B = F.shape[0]
    a = np.zeros((B, k + 1, k + 1))
    pivots = np.full((B, k + 1), np.inf)
    if k >= 2:
        a[:, 1, 2:] = F[:, 1:k]  # a_{1,k} = f_{k-1}
    levels = []
    if k >= 2:
        idx = np.arange(1, k)
        # c^{(1)}_{i,j} = f_{i+j} - f_i f_j for i, j in 1..k-1
        c = F[:, idx[:, None] + idx[None, :]] - F[:, idx][:, :, None] * F[:, idx][:, None, :]
        levels.append(c)
        for j in range(2, k + 1):
            # coefficients from level j-1 (stored at position j-2); row/col index m -> m-1
            cl = levels[j - 2]
            piv = cl[:, j - 2, j - 2]
            pivots[:, j] = piv
            if j < k:
                bad = piv < PIVOT_TOL
                safe = np.where(bad, 1.0, piv)
                a[:, j, j + 1:] = cl[:, j - 2, j - 1:k - 1] / safe[:, None]
                # next level: c^{(j)}_{i,m} = (c_{i,m} c_{j-1,j-1} - c_{j-1,i} c_{j-1,m}) / c_{j-1,j-1}
                row = cl[:, j - 2, :]
                nxt = cl - row[:, :, None] * row[:, None, :] / safe[:, None, None]
                levels.append(nxt)
    return levels, a, pivots


def batch_projected_moment_gradients(Y: np.ndarray, k: int, reorthogonalize: bool = True,
                                     check: bool = True) -> np.ndarray:
    """Projected gradients ``g_1 .. g_k`` of raw moments for a batch.

    ``g_j`` is the part of ``x**(j-1)`` orthogonal to ``1, x, ..., x**(j-2)``;
    the output has shape (B, k, *grid). Computed by the c/a recursion on the
    standardized signal and rescaled by ``s**(j-1)``, which is exactly the
    projection of the raw monomial.
    """
    if int(k) != k or k < 1:
        raise InvalidInputError("k must be a positive integer")
    k = int(k)
    B = Y.shape[0]
    flat = Y.reshape(B, -1)
    N = flat.shape[1]
    out = np.empty((B, k, N))
    out[:, 0] = 1.0
    if k == 1:
        return out.reshape((B, k) + Y.shape[1:])
    m = flat.mean(axis=1, keepdims=True)
    d = flat - m
    s = np.sqrt(np.mean(d * d, axis=1, keepdims=True))
    scale = np.maximum(np.abs(m), np.sqrt(np.mean(flat * flat, axis=1, keepdims=True)))
    if np.any(s <= 1e-14 * scale) or np.any(s == 0):
        raise RankDeficiencyError(
            "constant signal: moment gradients are dependent (perturb the signal first)")
    z = d / s
    powers = np.empty((B, 2 * k - 1, N))
    powers[:, 0] = 1.0
    for i in range(1, 2 * k - 1):
        powers[:, i] = powers[:, i - 1] * z
    F = powers.mean(axis=2)
    _, a, pivots = _moment_tables(F, k)
    if check and np.any(pivots[:, 2:] < PIVOT_TOL):
        j = int(np.nonzero(np.any(pivots[:, 2:] < PIVOT_TOL, axis=0))[0][0]) + 2
        raise RankDeficiencyError(
            f"moment gradients dependent at order {j}: fewer than {j} distinct values "
            "(perturb the signal first)")
    for kk in range(2, k + 1):
        g = powers[:, kk - 1] - a[:, 1, kk][:, None]
        for j in range(2, kk):
            g -= a[:, j, kk][:, None] * out[:, j - 1]
        if reorthogonalize:
            for j in range(1, kk):
                q = out[:, j - 1]
                g -= (np.sum(g * q, axis=1) / np.sum(q * q, axis=1))[:, None] * q
        out[:, kk - 1] = g
    out[:, 1:] *= s[:, :, None] ** np.arange(1, k)[None, :, None]
    return out.reshape((B, k) + Y.shape[1:])


def projected_moment_gradient(x, k: int, reorthogonalize: bool = True) -> np.ndarray:
    """``g_k(x)``: the raw-moment gradient of order ``k`` with the previous ones projected out.

    The positive factor ``k/N`` is dropped. Raises :class:`RankDeficiencyError`
    when ``x`` has fewer than ``k`` distinct values.
    """
    g = as_grid(x)
    return batch_projected_moment_gradients(g[None], k, reorthogonalize)[0, k - 1]


def moment_projection_cache(x, k: int) -> MomentProjectionCache:
    """The c/a tables behind :func:`projected_moment_gradient` (for inspection)."""
    g = as_grid(x).ravel()
    m = g.mean()
    s = g.std()
    if s == 0:
        raise RankDeficiencyError("constant signal")
    z = (g - m) / s
    F = np.array([np.mean(z**i) for i in range(2 * k - 1)])[None]
    levels, a, _ = _moment_tables(F, k)
    return MomentProjectionCache(F[0], [c[0] for c in levels], a[0], float(m), float(s))


def batch_moment_directions(Y: np.ndarray, k: int, which: Sequence[int]) -> np.ndarray:
    """Selected projected moment gradients ``g_j`` (1-based ``which``) for a batch.

    Same recursion as :func:`batch_projected_moment_gradients`, but the
    coefficients are expanded into monomial form and evaluated by Horner's
    rule, without the re-orthogonalization pass. This is the cheap variant
    used inside flow integrators.
    """
    B = Y.shape[0]
    flat = Y.reshape(B, -1)
    n = flat.shape[1]
    z = flat - flat.mean(axis=1, keepdims=True)
    s = np.sqrt(np.einsum("bn,bn->b", z, z) / n)[:, None]
    if k == 1:
        return np.ones((B, len(which)) + Y.shape[1:])
    if np.any(s == 0):
        raise RankDeficiencyError("constant signal: higher moment gradients are dependent")
    z /= s
    F = np.empty((B, 2 * k - 1))
    F[:, 0] = 1.0
    if k > 1:
        F[:, 1] = 0.0
        F[:, 2] = 1.0
        p = z * z
        for i in range(3, 2 * k - 1):
            p *= z
            F[:, i] = p.sum(axis=1) / n
    _, a, _ = _moment_tables(F, k)
    C = np.zeros((B, k, k))
    C[:, 0, 0] = 1.0
    for kk in range(2, k + 1):
        C[:, kk - 1, kk - 1] = 1.0
        C[:, kk - 1, 0] -= a[:, 1, kk]
        for j in range(2, kk):
            C[:, kk - 1] -= a[:, j, kk][:, None] * C[:, j - 1]
    out = np.empty((B, len(which), n))
    for o, j in enumerate(which):
        g = out[:, o]
        g[...] = C[:, j - 1, j - 1][:, None]
        for i in range(j - 2, -1, -1):
            g *= z
            g += C[:, j - 1, i][:, None]
        g *= s ** (j - 1)
    return out.reshape((B, len(which)) + Y.shape[1:])
