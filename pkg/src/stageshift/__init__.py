"""Two-stage progressive cancer natural-history model: calibration to
age/stage incidence tables and stage-shift projection for screening
protocols."""

__version__ = "0.1.0"

from .errors import (
    ConstraintViolation,
    InvalidParameter,
    NonConvergence,
    NumericalIntegrityError,
    StageShiftError,
    TableFormatError,
)
from .ctmc import StateSpace, build_intensity, transition_density, transition_matrix
from .natural_history import (
    NaturalHistoryParams,
    SojournHypothesis,
    cumulative_diagnosis,
    cumulative_onset,
    emst,
    hazards,
    lambda24_from_hypothesis,
    omst,
)

__all__ = [
    "ConstraintViolation",
    "InvalidParameter",
    "NonConvergence",
    "NumericalIntegrityError",
    "StageShiftError",
    "TableFormatError",
    "StateSpace",
    "build_intensity",
    "transition_density",
    "transition_matrix",
    "NaturalHistoryParams",
    "SojournHypothesis",
    "cumulative_diagnosis",
    "cumulative_onset",
    "emst",
    "hazards",
    "lambda24_from_hypothesis",
    "omst",
]
