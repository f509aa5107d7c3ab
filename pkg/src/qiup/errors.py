"""Exception hierarchy shared by all qiup modules.

The CLI maps these onto process exit codes, so every failure a user can
trigger should surface as one of the classes below.
"""

from __future__ import annotations


class QiupError(Exception):
    """Base class for all package errors."""


class SetupError(QiupError, ValueError):
    """Physically inconsistent or out-of-range configuration."""


class ConfigError(QiupError, ValueError):
    """Malformed, unknown or unit-less entries in a run configuration."""


class FormatError(QiupError, ValueError):
    """On-disk file that cannot be parsed.

    Parameters
    ----------
    message : str
        Human readable description.
    path : str, optional
        File that triggered the error.
    missing_bytes : int, optional
        For truncated binary payloads, how many bytes were expected but absent.
    """

    def __init__(self, message: str, path: str | None = None, missing_bytes: int | None = None):
        super().__init__(message)
        self.path = path
        self.missing_bytes = missing_bytes


class ManifestError(FormatError):
    """Stack or reconstruction manifest that is inconsistent with its directory."""


class UndersampledPSFError(QiupError, ValueError):
    """The point spread function is narrower than two pixels."""


class ReconstructionError(QiupError, ValueError):
    """The phase set cannot support a per-pixel cosine fit."""

    def __init__(self, message: str, phases=None):
        super().__init__(message)
        self.phases = None if phases is None else list(phases)


class ConvergenceError(QiupError, RuntimeError):
    """An iterative numerical procedure did not converge."""


class FitError(ConvergenceError):
    """A curve fit failed to converge or its input is unusable."""


class NoFWHMError(QiupError, ValueError):
    """A profile has no identifiable half-maximum crossings."""
