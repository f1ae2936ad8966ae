"""Geometry-aware learning on the SPD manifold for cross-subject
motor-imagery decoding: Riemannian geometry primitives, a reverse-mode
autodiff engine for matrix functions, covariance alignment stages,
manifold classifiers, and a leave-one-subject-out evaluation harness.
"""

from . import align, autodiff, classify, data, geometry, gradcheck, harness
from .errors import (
    EmptyInput,
    FormatError,
    InsufficientSubjects,
    NotPositiveDefinite,
    NumericalError,
    ShapeError,
    SpdGeoError,
    TrainingError,
    UnknownSubject,
)

__version__ = "0.1.0"

__all__ = [
    "align",
    "autodiff",
    "classify",
    "data",
    "geometry",
    "gradcheck",
    "harness",
    "EmptyInput",
    "FormatError",
    "InsufficientSubjects",
    "NotPositiveDefinite",
    "NumericalError",
    "ShapeError",
    "SpdGeoError",
    "TrainingError",
    "UnknownSubject",
]
