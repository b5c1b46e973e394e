"""Correlation hashing networks: paired image/text encoders trained to map
both modalities into a shared Hamming space."""
from .errors import (CHNError, ConfigError, DivergenceError, InputError, ParseError, ShapeError,
                     UndefinedMetricError, VerificationError)

__version__ = "0.1.0"

__all__ = ["CHNError", "ConfigError", "DivergenceError", "InputError", "ParseError", "ShapeError",
           "UndefinedMetricError", "VerificationError", "__version__"]
