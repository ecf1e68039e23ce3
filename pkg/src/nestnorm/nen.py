"""Nested normalization: decoupling, de-normalization and transfer.

A feature set ``f_1 .. f_M`` with references ``v_1 .. v_M`` is decoupled by
walking down a ladder of reference manifolds. Starting from ``x``, step ``k``
moves the signal along ``g_k``, the gradient of ``f_k`` with the gradients of
``f_1 .. f_{k-1}`` projected out, until ``f_k`` reaches ``v_k``. The
decoupled value of the next feature is read at that point:

    fhat_1 = f_1(x),    fhat_{k+1} = f_{k+1}(xhat_k).

Each step is a one-dimensional excursion, so it can be undone by walking the
same curve back (:func:`denormalize`), which also gives feature transfer.

Arcs are integrated numerically (explicit midpoint with step doubling) unless
``IntegratorOptions.analytic_arcs`` is set and the feature prefix admits a
closed-form path: shift and scale for the mean and variance, a Moebius map
for the skewness, and the spectral exponential flow for subband variances.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import prod

import numpy as np

from . import filterbank as fb
from .core import (FeatureSet, ReferenceValues, _grid_axes, as_grid, batch_values, ipow,
                   like_input, moment_set)
from .errors import (ConvergenceError, DegenerateSignalError, IntegrationError,
                     InvalidInputError, NestNormError, RankDeficiencyError,
                     UnreachableValueError)
from .gradproj import (batch_feature_gradient, batch_moment_directions,
                       batch_orthogonal_complement, batch_projected_moment_gradients,
                       gradient_scale)
from .trace import DecoupledFeatures, NormalizationTrace, TraceStep

SKEW_MARGIN = 1e-9


@dataclass(frozen=True)
class IntegratorOptions:
    """Controls for numeric arcs.

    step_tol
        Accepted local error per step, relative to the RMS of the signal.
    feature_tol
        An arc ends when ``|f_k - v| <= feature_tol * max(1, |v|)``.
    max_steps
        Step budget per arc; exceeding it raises :class:`IntegrationError`.
    drift_correction
        Re-pin the previously normalized features after every step.
    analytic_arcs
        Use closed-form arcs where the feature prefix allows it.
    lockstep
        Batches only: parametrise every arc by the feature value and give all
        rows one shared step sequence, so results are smooth functions of the
        input (needed for finite-difference gradients).
    """

    step_tol: float = 1e-9
    feature_tol: float = 1e-10
    max_steps: int = 100_000
    drift_correction: bool = True
    analytic_arcs: bool = False
    lockstep: bool = False
    initial_step: float = 0.05


DEFAULT_OPTIONS = IntegratorOptions()


# ---------------------------------------------------------------- prefix structure


def _moment_orders_prefix(fs: FeatureSet, k: int) -> bool:
    """True if features 0..k are marginal moments of orders 1..k+1 in order."""
    return all(f.kind in ("raw", "standardized") and f.p == i + 1
               for i, f in enumerate(fs.features[:k + 1]))


def _raw_prefix(fs: FeatureSet, k: int) -> bool:
    return all(f.kind == "raw" and f.p == i + 1 for i, f in enumerate(fs.features[:k + 1]))


def _vf_prefix(fs: FeatureSet, k: int) -> bool:
    return all(f.kind == "filter" and f.p == 2 for f in fs.features[:k + 1])


def _reshape(Y, v):
    return np.reshape(v, (-1,) + (1,) * (Y.ndim - 1))


def _rms(Y):
    return np.sqrt(np.mean(Y.reshape(Y.shape[0], -1) ** 2, axis=1))


# ---------------------------------------------------------------- directions


class _Arc:
    """Vector field and pinning for the excursion of feature ``k``."""

    def __init__(self, fs: FeatureSet, k: int, pins: np.ndarray):
        self.fs = fs
        self.k = k
        self.f = fs.features[k]
        self.bank = fs.bank
        self.pins = pins  # values for features 0..k-1
        self.moment_path = _raw_prefix(fs, k)
        prev = fs.features[:k]
        # mean and variance are re-pinned in closed form when they lead the ladder
        self.n_affine = 0
        if k >= 1 and prev[0].kind in ("raw", "standardized") and prev[0].p == 1:
            self.n_affine = 1
            if k >= 2 and prev[1].kind in ("raw", "standardized") and prev[1].p == 2:
                self.n_affine = 2

    def value(self, Y):
        return batch_values(Y, self.f, self.bank)

    def direction(self, Y):
        """Projected gradient ``g`` and ``rate = grad f_k . g`` (> 0)."""
        if self.moment_path:
            G = batch_moment_directions(Y, self.k + 1, [self.k + 1])[:, 0]
            rate = gradient_scale(Y, self.f) * np.sum(
                (G * G).reshape(Y.shape[0], -1), axis=1)
            return G, rate
        B = Y.shape[0]
        grad = batch_feature_gradient(Y, self.f, self.bank, exact=True).reshape(B, -1)
        basis = np.stack([batch_feature_gradient(Y, f, self.bank).reshape(B, -1)
                          for f in self.fs.features[:self.k]], axis=1) \
            if self.k else np.zeros((B, 0, grad.shape[1]))
        G = batch_orthogonal_complement(grad, basis)
        rate = np.sum(G * grad, axis=1)
        return G.reshape(Y.shape), rate

    def relative_strength(self, Y):
        """``|P grad f_k| / |grad f_k|``; small values flag a critical point."""
        B = Y.shape[0]
        grad = batch_feature_gradient(Y, self.f, self.bank).reshape(B, -1)
        if self.moment_path:
            G = batch_projected_moment_gradients(Y, self.k + 1, check=False)[:, self.k]
        else:
            G, _ = self.direction(Y)
        G = G.reshape(B, -1)
        return np.linalg.norm(G, axis=1) / np.maximum(np.linalg.norm(grad, axis=1), 1e-300)

    def repin(self, Y):
        """Put features 0..k-1 back on their pinned values."""
        if self.k == 0:
            return Y
        axes = _grid_axes(Y)
        if self.n_affine:
            m = np.mean(Y, axis=axes, keepdims=True)
            m_ref = _reshape(Y, self.pins[:, 0])
            if self.n_affine == 2:
                var = np.mean((Y - m) ** 2, axis=axes, keepdims=True)
                p2 = self.fs.features[1]
                var_ref = self.pins[:, 1] - (self.pins[:, 0] ** 2 if p2.kind == "raw" else 0.0)
                Y = m_ref + (Y - m) * np.sqrt(_reshape(Y, var_ref) / var)
            else:
                Y = Y - m + m_ref
        rest = list(range(self.n_affine, self.k))
        if not rest:
            return Y
        B = Y.shape[0]
        feats = [self.fs.features[j] for j in rest]
        r = np.stack([self.pins[:, j] - batch_values(Y, self.fs.features[j], self.bank)
                      for j in rest], axis=1)
        if self.moment_path:
            D = batch_moment_directions(Y, self.k, [j + 1 for j in rest]).reshape(
                B, len(rest), -1)
        else:
            D = np.stack([batch_feature_gradient(Y, f, self.bank).reshape(B, -1)
                          for f in feats], axis=1)
            if self.n_affine:
                D = np.stack([batch_orthogonal_complement(
                    D[:, i], np.stack([batch_feature_gradient(Y, f, self.bank).reshape(B, -1)
                                       for f in self.fs.features[:self.n_affine]], axis=1))
                    for i in range(len(rest))], axis=1)
        Gx = np.stack([batch_feature_gradient(Y, f, self.bank, exact=True).reshape(B, -1)
                       for f in feats], axis=1)
        A = np.einsum("bin,bjn->bij", Gx, D)
        try:
            c = np.linalg.solve(A, r[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            return Y
        Y = Y + np.einsum("bj,bjn->bn", c, D).reshape(Y.shape)
        if self.n_affine:
            Y = _Arc.repin(_affine_only(self), Y)
        return Y


def _affine_only(arc: _Arc) -> _Arc:
    a = object.__new__(_Arc)
    a.__dict__.update(arc.__dict__)
    a.k = arc.n_affine
    return a


# ---------------------------------------------------------------- numeric arc


def _numeric_arc(Y: np.ndarray, fs: FeatureSet, k: int, target: np.ndarray,
                 pins: np.ndarray, opts: IntegratorOptions):
    """Integrate the projected flow of feature ``k`` until it reaches ``target``.

    The curve is followed by arc length along the unit projected gradient,
    oriented towards the target. Steps are explicit midpoint with the error
    estimated by step doubling (the Richardson value is kept), and each step
    is capped at twice the distance a linear prediction needs to reach the
    target. Once ``f_k - target`` changes sign, the crossing is located by
    bisection on the cubic Hermite interpolant of the last step and polished
    by a Newton correction along ``g``.
    """
    arc = _Arc(fs, k, pins)
    Y = Y.copy()
    B = Y.shape[0]
    fcur = arc.value(Y)
    ftol = opts.feature_tol * np.maximum(1.0, np.abs(target))
    done = np.abs(target - fcur) <= ftol
    info = {"steps": 0, "rejected": 0, "checkpoints": []}
    if np.all(done):
        return Y, info
    strength = arc.relative_strength(Y[~done])
    if np.any(strength < 1e-9):
        raise RankDeficiencyError(
            f"feature {k} is at a critical point of the reference manifold "
            "(perturb the signal first)")
    sgn = np.sign(target - fcur)
    length = np.sqrt(np.sum(Y.reshape(B, -1) ** 2, axis=1))  # arc-length unit

    def field(Ys, rows):
        G, rate = arc.direction(Ys)
        gn = np.sqrt(np.sum(G.reshape(len(rows), -1) ** 2, axis=1))
        scale = sgn[rows] * length[rows] / gn
        return G * _reshape(Ys, scale), rate * np.abs(scale)

    F = np.empty_like(Y)
    speed = np.empty(B)  # |d f_k / d sigma|
    live = np.nonzero(~done)[0]
    F[live], speed[live] = field(Y[live], live)
    gap = np.abs(target - fcur)
    h = np.minimum(opts.initial_step, 2.0 * gap / np.maximum(speed, 1e-300))
    h[done] = 0.0
    steps = 0
    track = B == 1
    while not np.all(done):
        idx = np.nonzero(~done)[0]
        Ys, F0 = Y[idx], F[idx]
        hs = h[idx]
        hb = _reshape(Ys, hs)
        Fm, _ = field(Ys + 0.5 * hb * F0, idx)
        Y1 = Ys + hb * Fm
        Fq, _ = field(Ys + 0.25 * hb * F0, idx)
        Yh = Ys + 0.5 * hb * Fq
        Fh, _ = field(Yh, idx)
        Fq2, _ = field(Yh + 0.25 * hb * Fh, idx)
        Y2 = Yh + 0.5 * hb * Fq2
        diff = (Y2 - Y1).reshape(len(idx), -1)
        err = np.sqrt(np.mean(diff**2, axis=1)) / 3.0 / np.maximum(_rms(Ys), 1e-300)
        finite = np.isfinite(err)
        acc = finite & (err <= opts.step_tol)
        info["rejected"] += int(np.count_nonzero(~acc))
        grow = np.where(finite, 0.9 * (opts.step_tol / np.maximum(err, 1e-300)) ** (1 / 3), 0.1)
        hnext = hs * np.clip(grow, 0.1, 4.0)
        if np.any(acc):
            ai = idx[acc]
            Ynew = Y2[acc] + (Y2[acc] - Y1[acc]) / 3.0
            if opts.drift_correction:
                Ynew = replace_pins(arc, pins[ai]).repin(Ynew)
            fnew = arc.value(Ynew)
            Fnew, snew = field(Ynew, ai)
            before = target[ai] - fcur[ai]
            after = target[ai] - fnew
            crossed = (np.sign(after) != np.sign(before)) | (np.abs(after) <= ftol[ai])
            stalled = ~crossed & (np.abs(after) >= np.abs(before))
            if np.any(stalled):
                j = ai[np.nonzero(stalled)[0][0]]
                raise UnreachableValueError(
                    f"feature {k} ({fs.features[k].label}) cannot reach {float(target[j]):.6g} "
                    f"along its flow; it stops at about {float(fcur[j]):.6g}", k)
            if np.any(crossed):
                ci = np.nonzero(crossed)[0]
                rows = ai[ci]
                Y[rows] = _hermite_crossing(arc, Y[rows], F[rows], Ynew[ci], Fnew[ci],
                                            hs[acc][ci], target[rows])
                done[rows] = True
            keep = np.nonzero(~crossed)[0]
            rows = ai[keep]
            Y[rows], F[rows], fcur[rows], speed[rows] = Ynew[keep], Fnew[keep], fnew[keep], snew[keep]
            if track and keep.size:
                info["checkpoints"].append(float(fnew[keep][0]))
        h[idx] = hnext
        cap = 2.0 * np.abs(target[idx] - fcur[idx]) / np.maximum(speed[idx], 1e-300)
        h[idx] = np.minimum(h[idx], cap)
        tiny = idx[(h[idx] < 1e-14) & ~done[idx]]
        if tiny.size:
            raise UnreachableValueError(
                f"feature {k} ({fs.features[k].label}) stalls before reaching "
                f"{float(target[tiny[0]]):.6g}", k)
        steps += 1
        if steps > opts.max_steps:
            raise IntegrationError(f"step budget of {opts.max_steps} exhausted on feature {k}")
    info["steps"] = steps
    Y = _finish_arc(arc, Y, target, pins, ftol, opts)
    return Y, info


def _lockstep_arc(Y: np.ndarray, fs: FeatureSet, k: int, target: np.ndarray,
                  pins: np.ndarray, opts: IntegratorOptions):
    """Shared-step variant of :func:`_numeric_arc`.

    The curve is parametrised by ``tau`` in [0, 1] with
    ``f_k(y(tau)) = f_k(y0) + tau (target - f_k(y0))``; all rows take the
    same steps, accepted when the worst row meets the tolerance.
    """
    arc = _Arc(fs, k, pins)
    Y = Y.copy()
    s0 = arc.value(Y)
    delta = target - s0
    ftol = opts.feature_tol * np.maximum(1.0, np.abs(target))
    info = {"steps": 0, "rejected": 0, "checkpoints": []}
    if np.all(np.abs(delta) <= ftol):
        return Y, info
    if np.any(arc.relative_strength(Y) < 1e-9):
        raise RankDeficiencyError(
            f"feature {k} is at a critical point of the reference manifold "
            "(perturb the signal first)")

    def field(Ys):
        G, rate = arc.direction(Ys)
        return G * _reshape(Ys, delta / rate)

    tau, h, steps = 0.0, opts.initial_step, 0
    while tau < 1.0 - 1e-15:
        h = min(h, 1.0 - tau)
        F0 = field(Y)
        Y1 = Y + h * field(Y + 0.5 * h * F0)
        Yh = Y + 0.5 * h * field(Y + 0.25 * h * F0)
        Y2 = Yh + 0.5 * h * field(Yh + 0.25 * h * field(Yh))
        diff = (Y2 - Y1).reshape(Y.shape[0], -1)
        err = np.max(np.sqrt(np.mean(diff**2, axis=1)) / 3.0 / np.maximum(_rms(Y), 1e-300))
        if np.isfinite(err) and err <= opts.step_tol:
            Y = Y2 + (Y2 - Y1) / 3.0
            if opts.drift_correction:
                Y = arc.repin(Y)
            tau += h
        else:
            info["rejected"] += 1
        grow = 0.9 * (opts.step_tol / max(err, 1e-300)) ** (1 / 3) if np.isfinite(err) else 0.1
        h *= min(4.0, max(0.1, grow))
        if h < 1e-13:
            raise UnreachableValueError(
                f"feature {k} ({fs.features[k].label}) stalls before its target", k)
        steps += 1
        if steps > opts.max_steps:
            raise IntegrationError(f"step budget of {opts.max_steps} exhausted on feature {k}")
    info["steps"] = steps
    Y = _finish_arc(arc, Y, target, pins, ftol, opts)
    return Y, info


def _hermite_crossing(arc, Y0, F0, Y1, F1, h, target, iters: int = 60):
    """Bisection for ``f_k = target`` on the cubic Hermite interpolant of a step."""
    hb = _reshape(Y0, h)

    def at(theta):
        t = _reshape(Y0, theta)
        t2, t3 = t * t, t * t * t
        return ((2 * t3 - 3 * t2 + 1) * Y0 + (t3 - 2 * t2 + t) * hb * F0
                + (-2 * t3 + 3 * t2) * Y1 + (t3 - t2) * hb * F1)

    lo = np.zeros(len(Y0))
    hi = np.ones(len(Y0))
    s_lo = np.sign(arc.value(Y0) - target)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        s_mid = np.sign(arc.value(at(mid)) - target)
        same = s_mid == s_lo
        lo = np.where(same, mid, lo)
        hi = np.where(same, hi, mid)
        if np.all(hi - lo < 1e-15):
            break
    return at(0.5 * (lo + hi))


def replace_pins(arc: _Arc, pins: np.ndarray) -> _Arc:
    a = object.__new__(_Arc)
    a.__dict__.update(arc.__dict__)
    a.pins = pins
    return a


def _finish_arc(arc: _Arc, Y, target, pins, ftol, opts):
    """Newton refinement along ``g`` so that ``|f_k - target| <= ftol``."""
    for _ in range(20):
        r = target - arc.value(Y)
        if np.all(np.abs(r) <= ftol * 1e-2):
            break
        G, rate = arc.direction(Y)
        Y = Y + G * _reshape(Y, r / rate)
        if opts.drift_correction:
            Y = arc.repin(Y)
    r = target - arc.value(Y)
    if np.any(np.abs(r) > ftol):
        raise ConvergenceError(f"feature {arc.k} missed its target by {np.max(np.abs(r)):.3g}")
    return Y


# ---------------------------------------------------------------- analytic arcs


def _skew_rows(Z):
    """Skewness of each row."""
    d = Z - Z.mean(axis=1, keepdims=True)
    v = np.mean(d * d, axis=1)
    return np.mean(d * d * d, axis=1) / v**1.5


def _standardize_rows(Z):
    d = Z - Z.mean(axis=1, keepdims=True)
    return d / np.sqrt(np.mean(d * d, axis=1, keepdims=True))


def _skew_parameters(W: np.ndarray, goal: np.ndarray, index: int = 2,
                     iters: int = 200) -> np.ndarray:
    """Row-wise root ``t`` of ``skew(w / (1 - t w)) = goal``.

    Each row ``w`` is centred; the root is sought inside the open interval
    ``(1/min w, 1/max w)`` shrunk by a relative margin, where ``1 - t w``
    stays positive. Safeguarded bisection (Illinois regula falsi steps, with a
    bisection whenever they stall) runs on all rows at once; it ends when the
    skewness error reaches 1e-13 or the bracket collapses.
    """
    B = W.shape[0]

    def fun(t, rows):
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return _skew_rows(W[rows] / (1.0 - t[:, None] * W[rows])) - goal[rows]

    allr = np.arange(B)
    f0 = fun(np.zeros(B), allr)
    lo_end = (1.0 / W.min(axis=1)) * (1 - SKEW_MARGIN)
    hi_end = (1.0 / W.max(axis=1)) * (1 - SKEW_MARGIN)
    # the skewness increases with t: search below 0 if too high, above if too low
    a = np.where(f0 > 0, lo_end, 0.0)
    b = np.where(f0 > 0, 0.0, hi_end)
    fa = np.where(f0 > 0, fun(lo_end, allr), f0)
    fb = np.where(f0 > 0, f0, fun(hi_end, allr))
    t = np.zeros(B)
    done = np.abs(f0) <= 1e-14
    bad = ~done & ~((np.sign(fa) != np.sign(fb)) & np.isfinite(fa) & np.isfinite(fb))
    if np.any(bad):
        r = int(np.nonzero(bad)[0][0])
        raise UnreachableValueError(
            f"skewness {float(goal[r]):.6g} is outside the range reachable from this signal",
            index)
    side = np.zeros(B)
    for _ in range(iters):
        rows = np.nonzero(~done)[0]
        if rows.size == 0:
            break
        A, Bv, FA, FB = a[rows], b[rows], fa[rows], fb[rows]
        c = (A * FB - Bv * FA) / (FB - FA)
        width = Bv - A
        # fall back to bisection when the secant point hugs an end
        stall = ~np.isfinite(c) | (c <= A + 1e-3 * width) | (c >= Bv - 1e-3 * width)
        c = np.where(stall, 0.5 * (A + Bv), c)
        fc = fun(c, rows)
        t[rows] = c
        left = np.sign(fc) == np.sign(FA)
        # Illinois: halve the retained end's value when the same side repeats
        a[rows] = np.where(left, c, A)
        fa[rows] = np.where(left, fc, np.where(side[rows] == -1, FA / 2, FA))
        b[rows] = np.where(left, Bv, c)
        fb[rows] = np.where(left, np.where(side[rows] == 1, FB / 2, FB), fc)
        side[rows] = np.where(left, 1, -1)
        conv = (np.abs(fc) <= 1e-13) | (b[rows] - a[rows] <= 4e-16 * np.maximum(
            np.abs(a[rows]), np.abs(b[rows])))
        done[rows[conv]] = True
    return t


def _skew_parameter(w: np.ndarray, target_skew: float, index: int = 2) -> float:
    """Root ``t`` of ``skew(w / (1 - t w)) = target_skew`` in ``(1/min w, 1/max w)``."""
    w = np.asarray(w, dtype=float).ravel()
    return float(_skew_parameters((w - w.mean())[None], np.array([target_skew]), index)[0])


def _mobius_arc(Y: np.ndarray, fs: FeatureSet, target: np.ndarray, pins: np.ndarray):
    """Closed-form arc for the third moment on the mean/variance manifold."""
    B = Y.shape[0]
    flat = Y.reshape(B, -1)
    m = pins[:, 0]
    sig2 = pins[:, 1] - (m * m if fs.features[1].kind == "raw" else 0.0)
    sig = np.sqrt(sig2)
    if fs.features[2].kind == "raw":
        goal = (target - m**3 - 3 * m * sig2) / sig**3
    else:
        goal = np.asarray(target, dtype=float)
    W = _standardize_rows(flat)
    t = _skew_parameters(W, goal)
    out = m[:, None] + sig[:, None] * _standardize_rows(W / (1.0 - t[:, None] * W))
    return out.reshape(Y.shape), {"t": t}


def _analytic_arc(Y, fs, k, target, pins):
    """Closed-form arcs; returns None when the prefix has no closed form."""
    axes = _grid_axes(Y)
    if _moment_orders_prefix(fs, k) and k <= 2:
        if k == 0:
            shift = target - np.mean(Y, axis=axes)
            return Y + _reshape(Y, shift), {"shift": shift}
        if k == 1:
            m = _reshape(Y, pins[:, 0])
            var = np.mean((Y - m) ** 2, axis=axes)
            goal = target - (pins[:, 0] ** 2 if fs.features[1].kind == "raw" else 0.0)
            if np.any(goal <= 0):
                raise UnreachableValueError("variance target must be positive", 1)
            if np.any(var <= 1e-24 * np.maximum(1.0, pins[:, 0] ** 2)):
                raise RankDeficiencyError(
                    "feature 1 is at a critical point of the reference manifold "
                    "(constant signal; perturb it first)")
            log_scale = 0.5 * np.log(goal / var)
            return m + (Y - m) * _reshape(Y, np.exp(log_scale)), {"log_scale": log_scale}
        return _mobius_arc(Y, fs, target, pins)
    if _vf_prefix(fs, k):
        idx = [f.filter_index for f in fs.features[:k + 1]]
        targets = np.concatenate([pins, target[:, None]], axis=1)
        out, beta, solver = fb.spectral_solve(Y, fs.bank, idx, targets)
        return out, {"beta": beta, "solver": solver}
    return None


# ---------------------------------------------------------------- reachability


def _check_reachable(fs: FeatureSet, k: int, target: np.ndarray, pins: np.ndarray, N: int):
    """Closed-form range checks for standardized marginal moments."""
    if k < 1 or not _raw_prefix(fs, k):
        return
    if k == 1:
        if np.any(target - pins[:, 0] ** 2 <= 0):
            raise UnreachableValueError("variance target must be positive", 1)
        return
    if not np.allclose(pins[:, :2], [0.0, 1.0]):
        return
    if k == 2:
        bound = (N - 2) / np.sqrt(N - 1)
        if np.any(np.abs(target) >= bound):
            raise UnreachableValueError(
                f"skewness target outside (-{bound:.6g}, {bound:.6g}) for N={N}", 2)
    if k == 3 and np.allclose(pins[:, 2], 0.0):
        if np.any(target <= 1.0) or np.any(target >= N / 2):
            raise UnreachableValueError(
                f"orthokurtosis target outside (1, {N / 2:g}) for N={N}", 3)


# ---------------------------------------------------------------- engine


def _run_arc(Y, fs, k, target, pins, opts):
    N = prod(Y.shape[1:])
    _check_reachable(fs, k, target, pins, N)
    if opts.analytic_arcs:
        res = _analytic_arc(Y, fs, k, target, pins)
        if res is not None:
            return res[0], "analytic", res[1]
    if opts.lockstep:
        Y, info = _lockstep_arc(Y, fs, k, target, pins, opts)
    else:
        Y, info = _numeric_arc(Y, fs, k, target, pins, opts)
    return Y, "numeric", info


def _as_batch(x):
    g = as_grid(x)
    return g[None]


def _check_signal_for(fs: FeatureSet, Y: np.ndarray):
    if fs.bank is not None and any(f.kind == "filter" for f in fs.features):
        fs.bank._check_grid(Y.shape[1:])


def batch_decouple(Y: np.ndarray, fs: FeatureSet, opts: IntegratorOptions = DEFAULT_OPTIONS,
                   return_kernel: bool = False):
    """Decoupled feature values for every row of ``Y`` (B, *grid) -> (B, M)."""
    Y = np.array(Y, dtype=float)
    _check_signal_for(fs, Y)
    B, M = Y.shape[0], len(fs)
    refs = np.array(fs.references.values)
    vals = np.empty((B, M))
    vals[:, 0] = batch_values(Y, fs.features[0], fs.bank)
    for k in range(M - 1):
        pins = np.broadcast_to(refs[:k], (B, k))
        Y, _, _ = _run_arc(Y, fs, k, np.full(B, refs[k]), pins, opts)
        vals[:, k + 1] = batch_values(Y, fs.features[k + 1], fs.bank)
    _assert_ranges(fs, vals, prod(Y.shape[1:]))
    return (vals, Y) if return_kernel else vals


def _assert_ranges(fs: FeatureSet, vals: np.ndarray, N: int):
    """Decoupled skewness and orthokurtosis must respect their closed-form ranges."""
    M = len(fs)
    if M >= 3 and _raw_prefix(fs, 2):
        bound = (N - 2) / np.sqrt(N - 1)
        if np.any(np.abs(vals[:, 2]) > bound * (1 + 1e-9)):
            raise NestNormError("decoupled skewness outside its admissible range")
    if M >= 4 and _raw_prefix(fs, 3) and np.allclose(fs.references.values[:3], [0, 1, 0]):
        if np.any(vals[:, 3] < 1 - 1e-9) or np.any(vals[:, 3] > N / 2 * (1 + 1e-9)):
            raise NestNormError("orthokurtosis outside [1, N/2]")


def decouple_narrow(x, fs: FeatureSet, opts: IntegratorOptions = DEFAULT_OPTIONS):
    """Narrow-path nested normalization.

    Returns ``(DecoupledFeatures, NormalizationTrace)``. The trace ends at the
    kernel: ``x`` normalized on features ``1 .. M-1``; use :func:`kernel_of`
    to get it.
    """
    Y = _as_batch(x)
    _check_signal_for(fs, Y)
    M = len(fs)
    refs = np.array(fs.references.values)
    vals = np.empty(M)
    vals[0] = batch_values(Y, fs.features[0], fs.bank)[0]
    trace = NormalizationTrace(fs, grid_shape=Y.shape[1:])
    for k in range(M - 1):
        before = float(batch_values(Y, fs.features[k], fs.bank)[0])
        Y, method, info = _run_arc(Y, fs, k, np.array([refs[k]]), refs[None, :k], opts)
        trace.steps.append(TraceStep(k, before, float(refs[k]), method, info))
        vals[k + 1] = batch_values(Y, fs.features[k + 1], fs.bank)[0]
    _assert_ranges(fs, vals[None], Y[0].size)
    trace.kernel = like_input(x, Y[0])
    return DecoupledFeatures(vals, fs.features), trace


def decouple(x, fs: FeatureSet, opts: IntegratorOptions = DEFAULT_OPTIONS) -> DecoupledFeatures:
    return decouple_narrow(x, fs, opts)[0]


def kernel_of(trace: NormalizationTrace):
    """The normalized signal a trace ends on."""
    return trace.kernel


def normalize(x, fs: FeatureSet, level: int | None = None,
              opts: IntegratorOptions = DEFAULT_OPTIONS):
    """Normalize ``x`` on features ``1 .. level`` (default: all of them)."""
    level = len(fs) if level is None else int(level)
    Y = _as_batch(x)
    _check_signal_for(fs, Y)
    refs = np.array(fs.references.values)
    trace = NormalizationTrace(fs, grid_shape=Y.shape[1:])
    for k in range(level):
        before = float(batch_values(Y, fs.features[k], fs.bank)[0])
        Y, method, info = _run_arc(Y, fs, k, np.array([refs[k]]), refs[None, :k], opts)
        trace.steps.append(TraceStep(k, before, float(refs[k]), method, info))
    trace.kernel = like_input(x, Y[0])
    return like_input(x, Y[0]), trace


def batch_denormalize(K: np.ndarray, fs: FeatureSet, desired: np.ndarray,
                      opts: IntegratorOptions = DEFAULT_OPTIONS, start: int | None = None):
    """Walk arcs ``start .. 0`` backwards, setting feature ``k`` to ``desired[:, k]``."""
    Y = np.array(K, dtype=float)
    B = Y.shape[0]
    M = len(fs)
    start = M - 1 if start is None else start
    refs = np.array(fs.references.values)
    desired = np.broadcast_to(np.asarray(desired, dtype=float), (B, M))
    for k in range(start, -1, -1):
        pins = np.broadcast_to(refs[:k], (B, k))
        try:
            Y, _, _ = _run_arc(Y, fs, k, desired[:, k].copy(), pins, opts)
        except UnreachableValueError as exc:
            raise UnreachableValueError(
                f"desired value for feature {k} ({fs.features[k].label}) is not reachable: {exc}",
                k) from exc
    return Y


def denormalize(kernel, trace: NormalizationTrace | FeatureSet, desired,
                opts: IntegratorOptions = DEFAULT_OPTIONS):
    """Impose decoupled values ``desired`` on a normalized kernel.

    ``trace`` is the trace returned with the kernel (or just its FeatureSet).
    Features are visited from the last to the first; each is moved along its
    projected gradient until it reaches its desired value.
    """
    fs = trace.feature_set if isinstance(trace, NormalizationTrace) else trace
    desired = np.asarray(desired.values if isinstance(desired, (ReferenceValues,
                                                                DecoupledFeatures))
                         else desired, dtype=float)
    if desired.shape != (len(fs),):
        raise InvalidInputError(f"need {len(fs)} desired values, got {desired.shape}")
    Y = _as_batch(kernel)
    _check_signal_for(fs, Y)
    out = batch_denormalize(Y, fs, desired, opts)
    return like_input(kernel, out[0])


def transfer(source, target, fs: FeatureSet, opts: IntegratorOptions = DEFAULT_OPTIONS):
    """Give ``source`` the decoupled features of ``target`` while keeping its kernel."""
    wanted, _ = decouple_narrow(target, fs, opts)
    _, trace = decouple_narrow(source, fs, opts)
    return denormalize(trace.kernel, trace, wanted.values, opts)


def replay(x, trace: NormalizationTrace, opts: IntegratorOptions = DEFAULT_OPTIONS):
    """Re-run the arcs of ``trace`` forward from ``x``."""
    fs = trace.feature_set
    Y = _as_batch(x)
    for step in trace.steps:
        k = step.index
        refs = np.array(fs.references.values)
        if step.method == "analytic" and "shift" in step.record:
            Y = Y + step.record["shift"][0]
        elif step.method == "analytic" and "log_scale" in step.record:
            m = refs[0]
            Y = m + (Y - m) * np.exp(step.record["log_scale"][0])
        else:
            Y, _, _ = _run_arc(Y, fs, k, np.array([step.after]), refs[None, :k], opts)
    return like_input(x, Y[0])


def unwind(kernel, trace: NormalizationTrace, opts: IntegratorOptions = DEFAULT_OPTIONS):
    """Undo ``trace``: walk its arcs backwards to the recorded ``before`` values."""
    fs = trace.feature_set
    Y = _as_batch(kernel)
    refs = np.array(fs.references.values)
    for step in reversed(trace.steps):
        k = step.index
        Y, _, _ = _run_arc(Y, fs, k, np.array([step.before]), refs[None, :k], opts)
    return like_input(kernel, Y[0])


# ---------------------------------------------------------------- marginal moments


def standardize_chain(x, up_to: int = 3):
    """Closed-form normalization of mean, variance and skewness.

    ``up_to=1`` removes the mean, ``2`` also scales to unit variance and
    ``3`` additionally zeroes the skewness with the Moebius map
    ``z -> z / (1 - t z)`` followed by re-standardization.
    """
    if up_to not in (1, 2, 3):
        raise InvalidInputError("up_to must be 1, 2 or 3")
    g = as_grid(x)
    flat = g.ravel()
    fs = moment_set(range(1, up_to + 1))
    trace = NormalizationTrace(fs, grid_shape=g.shape, solver="analytic")
    m = flat.mean()
    trace.steps.append(TraceStep(0, float(m), 0.0, "shift", {"shift": -m}))
    y = flat - m
    if up_to >= 2:
        var = np.mean(y * y)
        if not var > 0 or var <= (1e-15 * max(1.0, np.abs(flat).max())) ** 2:
            raise DegenerateSignalError("zero variance: cannot standardize")
        trace.steps.append(TraceStep(1, float(var), 1.0, "scale",
                                     {"log_scale": -0.5 * np.log(var)}))
        y = y / np.sqrt(var)
    if up_to == 3:
        if np.unique(flat).size < 3:
            raise DegenerateSignalError("fewer than 3 distinct values: skewness cannot be zeroed")
        skew = float(np.mean(y**3))
        t = _skew_parameter(y, 0.0)
        z = y / (1.0 - t * y)
        zm = z.mean()
        zs = np.sqrt(np.mean((z - zm) ** 2))
        trace.steps.append(TraceStep(2, skew, 0.0, "mobius",
                                     {"t": t, "shift": -zm, "log_scale": -np.log(zs)}))
        y = (z - zm) / zs
    out = y.reshape(g.shape)
    trace.kernel = like_input(x, out)
    return like_input(x, out), trace


def orthokurtosis_fast(x) -> float:
    """Fourth moment after zeroing the skewness along its Moebius flow.

    Steps: centre ``x``; find ``t`` in ``(1/min, 1/max)`` of the centred
    values such that ``x1 / (1 - t x1)`` has zero skewness; standardize that
    vector and return its fourth moment.
    """
    g = as_grid(x).ravel()
    if np.unique(g).size < 3:
        raise DegenerateSignalError("orthokurtosis needs at least 3 distinct values")
    x1 = g - g.mean()
    t = _skew_parameter(x1, 0.0, index=3)
    z = x1 / (1.0 - t * x1)
    z = (z - z.mean()) / z.std()
    return float(np.mean(z**4))


def batch_orthokurtosis(Y: np.ndarray) -> np.ndarray:
    """:func:`orthokurtosis_fast` for every row of ``Y``, with one vectorized root solve."""
    flat = np.asarray(Y, dtype=float).reshape(Y.shape[0], -1)
    srt = np.sort(flat, axis=1)
    if np.any(np.sum(np.diff(srt, axis=1) > 0, axis=1) < 2):
        raise DegenerateSignalError("orthokurtosis needs at least 3 distinct values")
    W = _standardize_rows(flat)
    t = _skew_parameters(W, np.zeros(len(W)), index=3)
    Z = _standardize_rows(W / (1.0 - t[:, None] * W))
    return np.mean(ipow(Z, 4), axis=1)


# ---------------------------------------------------------------- homogeneous features


def normalize_homogeneous(x, feats, refs, bank=None):
    """Jointly pin several second-order filter-output moments.

    Each feature has the closed-form flow ``X -> X exp(t |H_j|**2)``; the
    flows are concatenated with unknown times and the simultaneous system is
    solved by damped Newton, falling back to Gauss-Seidel sweeps. The trace's
    ``solver`` field names the method that succeeded.
    """
    feats = tuple(feats)
    if isinstance(refs, ReferenceValues):
        refs = refs.values
    refs = tuple(float(v) for v in refs)
    if len(refs) != len(feats):
        raise InvalidInputError("one reference per feature is required")
    if bank is None:
        raise InvalidInputError("a FilterBank is required")
    if not all(f.kind == "filter" and f.p == 2 for f in feats):
        raise InvalidInputError(
            "closed-form flows exist only for second-order filter-output moments")
    if len({f.filter_index for f in feats}) != len(feats):
        raise InvalidInputError("features must use distinct filters")
    g = as_grid(x)
    idx = [f.filter_index for f in feats]
    fs = FeatureSet(feats, ReferenceValues(refs), bank)
    before = fs.values(g)
    out, beta, solver = fb.spectral_solve(g[None], bank, idx, refs)
    trace = NormalizationTrace(fs, grid_shape=g.shape, solver=solver)
    for j in range(len(feats)):
        trace.steps.append(TraceStep(j, float(before[j]), refs[j], "spectral",
                                     {"t": float(beta[0, j])}))
    trace.kernel = like_input(x, out[0])
    return like_input(x, out[0]), trace
