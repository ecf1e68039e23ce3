"""Low-impact perturbations that push signals off degenerate sets.

All randomness comes from ``numpy.random.default_rng(seed)`` (PCG64), so
the same seed always yields the same perturbation bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import as_grid, like_input
from .errors import DegenerateSignalError, InvalidInputError

MAX_RAMP_DRAWS = 100


@dataclass(frozen=True)
class PerturbationPlan:
    """Recipe for a reproducible perturbation.

    ``theta`` and ``support`` are used by ``spectral_floor`` only; ``support``
    is a boolean frequency mask, full grid or ``rfftn`` half (None = bank support).
    """

    kind: str
    seed: int = 0
    theta: Optional[float] = None
    support: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("ranked_ramp", "spectral_floor"):
            raise InvalidInputError(f"unknown perturbation kind {self.kind!r}")
        if self.kind == "spectral_floor" and not (self.theta is not None and self.theta > 0):
            raise InvalidInputError("spectral_floor needs theta > 0")

    def apply(self, x, bank=None, scale: float = 1.0):
        """Return the perturbed signal. ``scale`` multiplies the ramp pattern."""
        if self.kind == "ranked_ramp":
            g = as_grid(x)
            dims = g.shape if g.ndim == 2 else (g.size, 1)
            eps = ranked_ramp(dims, self.seed).reshape(g.shape)
            return like_input(x, g + scale * eps)
        return spectral_floor(x, bank, self.theta, self.seed, support=self.support)


def _ramp_ranks(ramp: np.ndarray) -> np.ndarray:
    order = np.argsort(ramp, kind="stable")
    ranks = np.empty(ramp.size, dtype=np.int64)
    ranks[order] = np.arange(1, ramp.size + 1)
    return ranks


def ranked_ramp(dims, seed: int = 0, r: Optional[float] = None) -> np.ndarray:
    """Unit-scaled ranked ramp pattern of shape ``dims``.

    The ramp ``n_x + r * n_y`` is ranked and mapped to
    ``(rank - 1 - N/2) / N``, giving N distinct values spaced exactly
    ``1/N`` apart in ``[-1/2, 1/2)``. ``r`` is drawn uniformly in [0, 1]
    (re-drawn while the ramp has ties, at most 100 times) unless given.

    Examples
    --------
    >>> ranked_ramp((2, 2), r=0.5).ravel().tolist()
    [-0.5, -0.25, 0.0, 0.25]
    """
    dims = tuple(int(d) for d in np.atleast_1d(dims))
    if len(dims) == 1:
        dims = dims + (1,)
    if len(dims) != 2 or min(dims) < 1 or dims[0] * dims[1] < 2:
        raise InvalidInputError(f"ranked_ramp needs dims (Nx, Ny) with Nx*Ny >= 2, got {dims}")
    nx, ny = np.meshgrid(np.arange(dims[0]), np.arange(dims[1]), indexing="ij")
    N = dims[0] * dims[1]
    rng = np.random.default_rng(seed)
    for _ in range(MAX_RAMP_DRAWS if r is None else 1):
        rr = rng.uniform(0.0, 1.0) if r is None else float(r)
        ramp = (nx + rr * ny).ravel()
        if np.unique(ramp).size == N:
            break
    else:
        raise DegenerateSignalError("could not draw a ramp slope without ties")
    return ((_ramp_ranks(ramp) - 1 - N / 2) / N).reshape(dims)


def _half(mask, shape) -> np.ndarray:
    """Accept a full-grid or half-spectrum mask and return the half-spectrum one."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape == tuple(shape):
        return mask[..., : shape[-1] // 2 + 1]
    return mask


def spectral_floor(x, bank, theta: float, seed: int = 0, support=None, return_support=False):
    """Raise every spectral magnitude on the support to at least ``theta``.

    Bins above ``theta`` are untouched; bins with ``0 < |X| <= theta`` are
    pushed radially out to exactly ``theta``; empty bins get magnitude
    ``theta`` with a uniform random phase. Bins whose conjugate partner is
    themselves (DC, Nyquist) take a random sign so the output stays real. Magnitudes refer to the unnormalized DFT.
    """
    if not (theta > 0 and np.isfinite(theta)):
        raise InvalidInputError("theta must be positive and finite")
    g = as_grid(x)
    if support is None:
        if bank is None:
            raise InvalidInputError("need a bank or an explicit support mask")
        support = bank.support(g.shape)
    support = _half(support, g.shape)
    X = np.fft.rfftn(g)
    if support.shape != X.shape:
        raise InvalidInputError("support mask does not match the half-spectrum")
    mag = np.abs(X)
    # phases of the transform of real white noise: uniform, and conjugate
    # symmetric by construction (self-conjugate bins get a random sign)
    W = np.fft.rfftn(np.random.default_rng(seed).standard_normal(g.shape))
    phase = W / np.abs(W)
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(mag > 0, X / np.where(mag > 0, mag, 1), phase)
    E = np.where(support & (mag <= theta), (theta - mag) * unit, 0)
    eps = np.fft.irfftn(E, s=g.shape, axes=tuple(range(g.ndim)))
    out = like_input(x, g + eps)
    return (out, support) if return_support else out


def choose_theta(x, quantization_step: float, bank=None, cap: Optional[float] = None,
                 seed: int = 0, rtol: float = 1e-3, support=None) -> float:
    """Largest ``theta`` whose spectral floor still re-quantizes to ``x``.

    Bisection on ``round((x + eps) / q) == round(x / q)`` up to a relative
    bracket of ``rtol``. Without a cap the search starts from the signal's
    largest spectral magnitude on the support (or 1). Returns 0 when no
    positive ``theta`` qualifies.
    """
    g = as_grid(x)
    if not quantization_step > 0:
        raise InvalidInputError("quantization_step must be positive")
    if support is None:
        support = bank.support(g.shape) if bank is not None else np.ones(g.shape, dtype=bool)
    support = _half(support, g.shape)
    q = float(quantization_step)
    if cap is None:
        cap = max(1.0, float(np.abs(np.fft.rfftn(g))[support].max(initial=0.0)))
    if not np.isfinite(q):
        return float(cap)
    base = np.round(g / q)

    def ok(theta):
        y = as_grid(spectral_floor(g, None, theta, seed, support=support))
        return np.array_equal(np.round(y / q), base)

    if ok(cap):
        return float(cap)
    lo, hi = 0.0, float(cap)
    # shrink geometrically first so tiny admissible thetas are found quickly
    t = hi
    while t > 1e-300:
        t /= 16
        if ok(t):
            lo = t
            break
        hi = t
    else:
        return 0.0
    while hi - lo > rtol * lo:
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return float(lo)
