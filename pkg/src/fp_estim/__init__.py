"""Estimate modern contraceptive prevalence by fusing surveys with service statistics."""

from fp_estim.core import (
    DataType,
    EmuObservation,
    HyperEstimates,
    ObservationKind,
    PopulationGroup,
    SurveyObservation,
    TypeEstimate,
)

__version__ = "0.1.0"

__all__ = [
    "DataType",
    "EmuObservation",
    "HyperEstimates",
    "ObservationKind",
    "PopulationGroup",
    "SurveyObservation",
    "TypeEstimate",
    "__version__",
]
