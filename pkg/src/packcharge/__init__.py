"""packcharge: battery pack simulation and optimal charging toolkit."""

from .params import CellParams, DerivedGeometry, ParameterError, derive_geometry, kokam_reference

__version__ = "0.1.0"

__all__ = [
    "CellParams",
    "DerivedGeometry",
    "ParameterError",
    "derive_geometry",
    "kokam_reference",
    "__version__",
]
