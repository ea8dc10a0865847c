"""Exception taxonomy shared by all modules.

Exit-code mapping in the CLI: ConfigurationError -> 2, everything else -> 3.
"""


class Dp2uError(Exception):
    """Base class for all package errors."""


class ConfigurationError(Dp2uError):
    """Invalid sizes, ratios, hyperparameters or config files."""


class DataError(Dp2uError):
    """Bad references into the corpus: unknown ids, empty responses, ..."""


class NumericError(Dp2uError):
    """Non-finite values or divergence during optimization."""

    def __init__(self, message, step=None, last_params=None):
        super().__init__(message)
        self.step = step
        # Divergence guards keep the last finite parameter state so the
        # caller can still checkpoint it.
        self.last_params = last_params


class CheckpointFormatError(Dp2uError):
    """Corrupt or incompatible checkpoint file."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class StateError(Dp2uError):
    """Pipeline invoked in the wrong stage order or with a held lock."""
