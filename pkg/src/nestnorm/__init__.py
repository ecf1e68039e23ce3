"""Decoupling global signal features by nested normalization.

Each feature is measured after the signal has been moved onto the set
where all earlier features take reference values, travelling along
directions that leave the earlier features unchanged. The resulting decoupled features
have mutually orthogonal gradients.
"""

from .core import (FeatureSet, FeatureSpec, FilterOutputMoment, RawMoment, ReferenceValues,
                   Signal, StandardizedMoment, filter_output_moment, filter_set, moment_set,
                   raw_moment, standardized_moment, standardized_set)
from .errors import (ConvergenceError, DegenerateSignalError, IntegrationError,
                     InvalidInputError, NestNormError, RankDeficiencyError,
                     ShapeMismatchError, UnreachableValueError)
from .filterbank import (FilterBank, builtin_bank, complementary_pair_normalize,
                         decoupled_filter_features, spectral_normalize)
from .gradproj import feature_gradient, gram_schmidt_project, projected_moment_gradient
from .nen import (IntegratorOptions, decouple, decouple_narrow, denormalize, normalize,
                  orthokurtosis_fast, transfer)
from .perturb import PerturbationPlan, choose_theta, ranked_ramp, spectral_floor
from .trace import DecoupledFeatures, NormalizationTrace

__version__ = "0.1.0"

__all__ = [
    "FeatureSet", "FeatureSpec", "FilterOutputMoment", "RawMoment", "ReferenceValues",
    "Signal", "StandardizedMoment", "filter_output_moment", "filter_set", "moment_set",
    "raw_moment", "standardized_moment", "standardized_set",
    "ConvergenceError", "DegenerateSignalError", "IntegrationError", "InvalidInputError",
    "NestNormError", "RankDeficiencyError", "ShapeMismatchError", "UnreachableValueError",
    "FilterBank", "builtin_bank", "complementary_pair_normalize",
    "decoupled_filter_features", "spectral_normalize",
    "feature_gradient", "gram_schmidt_project", "projected_moment_gradient",
    "IntegratorOptions", "decouple", "decouple_narrow", "denormalize", "normalize",
    "orthokurtosis_fast", "transfer",
    "PerturbationPlan", "choose_theta", "ranked_ramp", "spectral_floor",
    "DecoupledFeatures", "NormalizationTrace",
]
