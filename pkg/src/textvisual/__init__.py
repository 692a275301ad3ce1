"""Text-to-visual embedding: train a recurrent text encoder into a fixed,
precomputed image-feature space and run cross-modal retrieval in it."""

from .errors import (
    ConfigError,
    DataFormatError,
    EmptyTextError,
    MiningError,
    NumericError,
    TextVisualError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataFormatError",
    "EmptyTextError",
    "MiningError",
    "NumericError",
    "TextVisualError",
    "__version__",
]
