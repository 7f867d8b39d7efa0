"""Bayesian region-referenced functional data analysis of EEG band power."""

from __future__ import annotations

__version__ = "0.1.0"

from .archive import PosteriorArchive
from .basis import BasisSystem, build_basis
from .errors import (
    ConfigurationError,
    DegenerateSegmentError,
    InputError,
    MissingDrawsError,
    NumericalError,
    RRFDAError,
    StructuralError,
)
from .model import BandPowerDataset, BasisSettings, ModelSpec
from .sampler import SamplerConfig, gibbs_fit

__all__ = [
    "BandPowerDataset", "BasisSettings", "BasisSystem", "ConfigurationError", "DegenerateSegmentError",
    "InputError", "MissingDrawsError", "ModelSpec", "NumericalError", "PosteriorArchive", "RRFDAError",
    "SamplerConfig", "StructuralError", "build_basis", "gibbs_fit", "__version__",
]
