"""Nephrographic-phase CT synthesis: volume containers, synthetic phantoms,
affine registration, adversarial synthesis models, image metrics, reader-study
statistics, and a blinded scoring service."""

from .errors import (
    ConfigError,
    CorruptionError,
    FormatError,
    IoError,
    ManifestError,
    NumericalError,
    ResnctError,
    ShapeError,
)
from .volume_io import CtVolume, Phase, WindowSpec, read_volume, write_volume

__version__ = "1.0.0"

__all__ = [
    "ConfigError",
    "CorruptionError",
    "CtVolume",
    "FormatError",
    "IoError",
    "ManifestError",
    "NumericalError",
    "Phase",
    "ResnctError",
    "ShapeError",
    "WindowSpec",
    "read_volume",
    "write_volume",
    "__version__",
]
