"""Exception types shared across the package."""


class CaplabError(Exception):
    """Base class for all errors raised by caplab."""


class ConfigurationError(CaplabError, ValueError):
    """Incompatible shapes, flags or settings."""


class InputError(CaplabError, ValueError):
    """Invalid data handed to an operation (labels out of range, short signals)."""


class TrainingError(CaplabError, RuntimeError):
    """Numerical failure during optimization (NaN gradients or losses)."""


class FormatError(CaplabError, ValueError):
    """Malformed dataset, checkpoint or WAV file.

    ``offset`` is the byte offset where parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
