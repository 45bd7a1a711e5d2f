"""Error taxonomy shared by every component; the CLI maps these to exit codes."""

from typing import Any, Dict, Optional


class WinNormError(Exception):
    """Base class for all laboratory errors."""

    exit_code = 1


class ShapeError(WinNormError, ValueError):
    """Operand shapes are incompatible."""


class DegenerateInputError(WinNormError, ValueError):
    """Input outside an operation's domain (empty region, log of zero, ...)."""


class NonFiniteError(WinNormError, FloatingPointError):
    """An operation produced NaN or Inf."""


class ConfigError(WinNormError, ValueError):
    """Configuration rejected by schema or by a guarded combination."""

    exit_code = 1


class NumericalAbortError(WinNormError, RuntimeError):
    """Training stopped on a non-finite loss."""

    exit_code = 2

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class IntegrityError(WinNormError, ValueError):
    """On-disk artifact is missing, malformed or fails its checksum."""

    exit_code = 3
