"""Signals, sample moments, filter-output moments and reference values.

Conventions used across the package:

* sample moments use ``1/N`` normalisation (biased variance);
* convolutions are circular;
* a *batch* is an array of shape ``(B, *grid)`` holding ``B`` independent
  signals that share one grid; batch helpers reduce over every axis but the
  first.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import prod
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from .errors import DegenerateSignalError, InvalidInputError

if TYPE_CHECKING:
    from .filterbank import FilterBank


# ---------------------------------------------------------------- signals


@dataclass(frozen=True)
class Signal:
    """A finite real sample vector with an optional 2-D grid shape.

    ``samples`` is stored flat and read-only. Only circular boundaries are
    supported.
    """

    samples: np.ndarray
    shape: tuple[int, int] | None = None
    boundary: str = "circular"

    def __post_init__(self):
        arr = np.array(self.samples, dtype=float).ravel()
        if arr.size < 2:
            raise InvalidInputError(f"a signal needs at least 2 samples, got {arr.size}")
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError("signal contains NaN or Inf")
        if self.shape is not None:
            shape = tuple(int(s) for s in self.shape)
            if len(shape) != 2 or prod(shape) != arr.size:
                raise InvalidInputError(f"shape {self.shape} does not hold {arr.size} samples")
            object.__setattr__(self, "shape", shape)
        if self.boundary != "circular":
            raise InvalidInputError("only circular boundaries are supported")
        arr.flags.writeable = False
        object.__setattr__(self, "samples", arr)

    @classmethod
    def from_array(cls, arr) -> "Signal":
        a = np.asarray(arr, dtype=float)
        if a.ndim == 2:
            return cls(a.ravel(), shape=a.shape)
        if a.ndim == 1:
            return cls(a)
        raise InvalidInputError(f"expected a 1-D or 2-D array, got ndim={a.ndim}")

    @property
    def N(self) -> int:
        return self.samples.size

    @property
    def grid(self) -> np.ndarray:
        """Samples laid out on their grid (1-D when no shape was given)."""
        return self.samples if self.shape is None else self.samples.reshape(self.shape)

    def with_samples(self, values) -> "Signal":
        return Signal(np.asarray(values, dtype=float).ravel(), shape=self.shape)


def as_grid(x) -> np.ndarray:
    """Return a validated float array (1-D or 2-D) for a Signal or array-like."""
    if isinstance(x, Signal):
        return np.array(x.grid, dtype=float)
    a = np.array(x, dtype=float)
    if a.ndim not in (1, 2):
        raise InvalidInputError(f"expected a 1-D or 2-D signal, got ndim={a.ndim}")
    if a.size == 0:
        raise InvalidInputError("empty signal")
    if a.size < 2:
        raise InvalidInputError("a signal needs at least 2 samples")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("signal contains NaN or Inf")
    return a


def like_input(template, values: np.ndarray):
    """Wrap ``values`` the same way ``template`` was given (Signal or ndarray)."""
    if isinstance(template, Signal):
        return Signal(values.ravel(), shape=template.shape)
    return values


def _grid_axes(Y: np.ndarray) -> tuple[int, ...]:
    return tuple(range(1, Y.ndim))


def _check_order(p) -> int:
    if int(p) != p or p < 1:
        raise InvalidInputError(f"moment order must be an integer >= 1, got {p}")
    return int(p)


# ---------------------------------------------------------------- features


@dataclass(frozen=True)
class FeatureSpec:
    """One differentiable global feature.

    ``kind`` is ``"raw"``, ``"standardized"`` or ``"filter"``. Filter features
    carry the index of a kernel in the attached :class:`FilterBank`.
    """

    kind: str
    p: int
    filter_index: int | None = None

    def __post_init__(self):
        if self.kind not in ("raw", "standardized", "filter"):
            raise InvalidInputError(f"unknown feature kind {self.kind!r}")
        object.__setattr__(self, "p", _check_order(self.p))
        if (self.kind == "filter") != (self.filter_index is not None):
            raise InvalidInputError("filter_index is required for filter features only")
        if self.filter_index is not None and self.filter_index < 0:
            raise InvalidInputError("filter_index must be non-negative")

    @property
    def label(self) -> str:
        if self.kind == "filter":
            return f"mf{self.filter_index}_p{self.p}"
        return f"{'mm' if self.kind == 'raw' else 'msm'}_p{self.p}"

    def value(self, x, bank: "FilterBank | None" = None) -> float:
        return float(batch_values(as_grid(x)[None], self, bank)[0])


def RawMoment(p: int) -> FeatureSpec:
    return FeatureSpec("raw", p)


def StandardizedMoment(p: int) -> FeatureSpec:
    return FeatureSpec("standardized", p)


def FilterOutputMoment(filter_index: int, p: int) -> FeatureSpec:
    return FeatureSpec("filter", p, filter_index)


@dataclass(frozen=True)
class ReferenceValues:
    values: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if not all(np.isfinite(vals)):
            raise InvalidInputError("reference values must be finite")
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return len(self.values)

    def __getitem__(self, i):
        return self.values[i]

    def __iter__(self):
        return iter(self.values)


@dataclass(frozen=True)
class FeatureSet:
    """Ordered features plus their reference values (order = hierarchy)."""

    features: tuple[FeatureSpec, ...]
    references: ReferenceValues
    bank: "FilterBank | None" = field(default=None, compare=False)

    def __post_init__(self):
        feats = tuple(self.features)
        if not feats:
            raise InvalidInputError("a feature set needs at least one feature")
        refs = self.references
        if not isinstance(refs, ReferenceValues):
            refs = ReferenceValues(tuple(refs))
        if len(refs) != len(feats):
            raise InvalidInputError(
                f"{len(refs)} reference values for {len(feats)} features")
        for f in feats:
            if f.kind == "filter":
                if self.bank is None:
                    raise InvalidInputError("filter features need a FilterBank")
                if f.filter_index >= len(self.bank):
                    raise InvalidInputError(
                        f"filter index {f.filter_index} out of range for a {len(self.bank)}-kernel bank")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "references", refs)

    def __len__(self):
        return len(self.features)

    def __iter__(self):
        return iter(self.features)

    def __getitem__(self, i):
        return self.features[i]

    def values(self, x) -> np.ndarray:
        """Original (coupled) feature values at ``x``."""
        g = as_grid(x)[None]
        return np.array([batch_values(g, f, self.bank)[0] for f in self.features])

    def prefix(self, m: int) -> "FeatureSet":
        return FeatureSet(self.features[:m], ReferenceValues(self.references.values[:m]), self.bank)


def default_reference(f: FeatureSpec, bank: "FilterBank | None" = None) -> float:
    """Reference value of a feature under unit white Gaussian input."""
    if f.kind == "filter":
        return filter_moment_reference(bank, f.filter_index, f.p)
    if f.kind == "standardized" and f.p == 1:
        return 0.0
    return gaussian_reference(f.p)


def moment_set(orders: Iterable[int] = range(1, 5)) -> FeatureSet:
    """Raw moments with Gaussian references (the MM family, decoupled into DF_MSM)."""
    feats = tuple(RawMoment(p) for p in orders)
    return FeatureSet(feats, ReferenceValues([default_reference(f) for f in feats]))


def standardized_set(orders: Iterable[int] = range(1, 5)) -> FeatureSet:
    feats = tuple(StandardizedMoment(p) for p in orders)
    return FeatureSet(feats, ReferenceValues([default_reference(f) for f in feats]))


def filter_set(bank: "FilterBank", orders: Iterable[int] = (2,), indices=None) -> FeatureSet:
    """Filter-output moments ordered by moment order, then by subband."""
    idx = range(len(bank)) if indices is None else indices
    feats = tuple(FilterOutputMoment(j, p) for p in orders for j in idx)
    refs = [default_reference(f, bank) for f in feats]
    return FeatureSet(feats, ReferenceValues(refs), bank)


# ---------------------------------------------------------------- values


def ipow(Y: np.ndarray, p: int) -> np.ndarray:
    """Integer power by repeated squaring (much faster than ``**`` on arrays)."""
    if p == 0:
        return np.ones_like(Y)
    result = None
    base = Y
    while p:
        if p & 1:
            result = base if result is None else result * base
        p >>= 1
        if p:
            base = base * base
    return result


def batch_raw_moment(Y: np.ndarray, p: int) -> np.ndarray:
    return np.mean(ipow(Y, p), axis=_grid_axes(Y))


def batch_standardized_moment(Y: np.ndarray, p: int) -> np.ndarray:
    axes = _grid_axes(Y)
    m = np.mean(Y, axis=axes, keepdims=True)
    d = Y - m
    var = np.mean(d * d, axis=axes)
    if p == 1:
        return m.reshape(-1)
    if p == 2:
        return var
    scale = np.maximum(np.abs(m.reshape(-1)), np.sqrt(np.mean(Y * Y, axis=axes)))
    if np.any(var <= (1e-15 * scale) ** 2) or np.any(var == 0):
        raise DegenerateSignalError("zero variance: standardized moments are undefined")
    z = d / np.sqrt(var).reshape((-1,) + (1,) * (Y.ndim - 1))
    return np.mean(ipow(z, p), axis=axes)


def batch_filter_output(Y: np.ndarray, bank: "FilterBank", j: int) -> np.ndarray:
    """Circular convolution of every signal in the batch with kernel ``j``."""
    grid = Y.shape[1:]
    axes = _grid_axes(Y)
    H = bank.rfft_response(grid)[j]
    return np.fft.irfftn(np.fft.rfftn(Y, axes=axes) * H, s=grid, axes=axes)


def batch_filter_output_moment(Y: np.ndarray, bank: "FilterBank", j: int, p: int) -> np.ndarray:
    out = batch_filter_output(Y, bank, j)
    return np.mean(ipow(out, p), axis=_grid_axes(Y))


def batch_values(Y: np.ndarray, f: FeatureSpec, bank: "FilterBank | None" = None) -> np.ndarray:
    if f.kind == "raw":
        return batch_raw_moment(Y, f.p)
    if f.kind == "standardized":
        return batch_standardized_moment(Y, f.p)
    if bank is None:
        raise InvalidInputError("filter features need a FilterBank")
    return batch_filter_output_moment(Y, bank, f.filter_index, f.p)


def raw_moment(x, p: int) -> float:
    """``(1/N) sum x_n**p``."""
    p = _check_order(p)
    return float(batch_raw_moment(as_grid(x)[None], p)[0])


def standardized_moment(x, p: int) -> float:
    """Moment of order ``p`` of the standardized signal.

    ``p=1`` gives the mean and ``p=2`` the biased variance; higher orders are
    affine invariant (``p=3`` skewness, ``p=4`` kurtosis).
    """
    p = _check_order(p)
    return float(batch_standardized_moment(as_grid(x)[None], p)[0])


def filter_output_moment(x, bank: "FilterBank", j: int, p: int) -> float:
    """``(1/N) sum (x * h_j)_n**p`` with circular convolution."""
    p = _check_order(p)
    if not 0 <= j < len(bank):
        raise InvalidInputError(f"filter index {j} out of range")
    return float(batch_filter_output_moment(as_grid(x)[None], bank, j, p)[0])


# ---------------------------------------------------------------- references


def double_factorial(n: int) -> int:
    out = 1
    while n > 1:
        out *= n
        n -= 2
    return out


def gaussian_reference(p: int) -> float:
    """Moment of order ``p`` of a standard normal: ``(p-1)!!`` for even ``p``, else 0."""
    p = _check_order(p)
    return float(double_factorial(p - 1)) if p % 2 == 0 else 0.0


def filterbank_reference(bank: "FilterBank", j: int) -> float:
    """Expected second moment at the output of kernel ``j`` for unit white noise."""
    return bank.energy(j)


def filter_moment_reference(bank: "FilterBank", j: int, p: int) -> float:
    """Order-``p`` moment of white Gaussian noise filtered by kernel ``j``."""
    return gaussian_reference(p) * filterbank_reference(bank, j) ** (p / 2)


def distinct_count(x, rtol: float = 0.0) -> int:
    v = np.sort(as_grid(x).ravel())
    if rtol:
        tol = rtol * max(1.0, float(np.max(np.abs(v))))
        return int(1 + np.count_nonzero(np.diff(v) > tol))
    return int(np.unique(v).size)


def check_distinct(x, k: int) -> None:
    """Raise unless ``x`` holds at least ``k`` distinct values."""
    if distinct_count(x) < k:
        raise DegenerateSignalError(
            f"signal has fewer than {k} distinct values; apply a perturbation first")


__all__: Sequence[str] = [
    "Signal", "FeatureSpec", "FeatureSet", "ReferenceValues",
    "RawMoment", "StandardizedMoment", "FilterOutputMoment",
    "moment_set", "standardized_set", "filter_set", "default_reference",
    "raw_moment", "standardized_moment", "filter_output_moment",
    "gaussian_reference", "filterbank_reference", "filter_moment_reference",
    "batch_values", "as_grid",
]
