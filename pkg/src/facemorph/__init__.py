"""GAN-based face morphing and morph-attack evaluation for face recognition."""

from facemorph.errors import (
    ConfigError,
    DataError,
    DomainError,
    FaceMorphError,
    NumericAbort,
    ProtocolError,
    ShapeError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DomainError",
    "FaceMorphError",
    "NumericAbort",
    "ProtocolError",
    "ShapeError",
    "ValidationError",
    "__version__",
]
