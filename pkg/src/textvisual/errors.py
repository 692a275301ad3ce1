"""Exception types shared across the package."""


class TextVisualError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(TextVisualError):
    """Invalid configuration: bad hyperparameter, shape mismatch, unknown key."""


class DataFormatError(TextVisualError):
    """Malformed input file. Carries path and, where known, line/offset."""

    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc = str(path)
            if line is not None:
                loc += f":{line}"
            loc = f" [{loc}]"
        super().__init__(message + loc)
        self.path = path
        self.line = line


class EmptyTextError(TextVisualError):
    """Text produced zero tokens after normalization."""


class MiningError(TextVisualError):
    """Negative mining could not produce a valid candidate."""


class NumericError(TextVisualError):
    """Non-finite value encountered during training or optimization."""
