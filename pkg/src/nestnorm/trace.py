"""Records produced by normalization: decoupled values and reversible arc traces."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .core import FeatureSet, FeatureSpec


@dataclass(frozen=True)
class TraceStep:
    """One 1-D excursion that moved feature ``index`` from ``before`` to ``after``.

    ``method`` names the arc type (``shift``, ``scale``, ``mobius``,
    ``spectral``, ``numeric`` ...) and ``record`` holds its parameters: the
    closed-form quantity for analytic arcs or the integrator checkpoints for
    numeric ones.
    """

    index: int
    before: float
    after: float
    method: str
    record: dict[str, Any] = field(default_factory=dict)


@dataclass
class NormalizationTrace:
    feature_set: FeatureSet | None
    steps: list[TraceStep] = field(default_factory=list)
    grid_shape: tuple[int, ...] | None = None
    solver: str = ""
    kernel: Any = None

    @property
    def before_values(self) -> list[float]:
        return [s.before for s in self.steps]

    def __len__(self):
        return len(self.steps)


@dataclass(frozen=True)
class DecoupledFeatures:
    values: np.ndarray
    features: tuple[FeatureSpec, ...]

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (len(self.features),):
            raise ValueError("one value per feature is required")
        if not np.all(np.isfinite(v)):
            raise ValueError("decoupled features must be finite")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def __len__(self):
        return len(self.features)

    def __getitem__(self, i):
        return self.values[i]

    def __iter__(self):
        return iter(self.values)

    def as_dict(self) -> dict[str, float]:
        return {f.label: float(v) for f, v in zip(self.features, self.values)}
