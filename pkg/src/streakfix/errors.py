"""Exception hierarchy shared by all streakfix modules.

The CLI maps these onto process exit codes: configuration problems exit
with 2, I/O problems with 1, numerical failures with 3.
"""


class StreakfixError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(StreakfixError):
    """Invalid configuration: bad field values, unknown keys, impossible setups."""


class InputError(StreakfixError):
    """Invalid runtime input: wrong shapes, non-finite values, out-of-range data."""


class StartupError(StreakfixError):
    """A required resource (e.g. an extractor weights file) is missing or corrupt."""


class NumericsError(StreakfixError):
    """Training produced a non-finite loss; carries the diagnostics path if written."""

    def __init__(self, message, diagnostics_path=None):
        super().__init__(message)
        self.diagnostics_path = diagnostics_path
