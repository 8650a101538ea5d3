"""Exception types shared across the package."""


class Hyper3DGError(Exception):
    """Base class for all package errors."""


class ConfigError(Hyper3DGError, ValueError):
    """Invalid configuration or argument values."""


class NumericalError(Hyper3DGError, ArithmeticError):
    """Non-finite values or degenerate numerical state."""


class PlyParseError(Hyper3DGError, OSError):
    """Malformed PLY content.

    ``offset`` is the byte offset in the file where the problem was found.
    """

    def __init__(self, message, offset=0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ExtractorError(Hyper3DGError, RuntimeError):
    """External feature extractor failed or replied with malformed data."""

    def __init__(self, message, diagnostics=""):
        full = message if not diagnostics else f"{message}\n--- diagnostics ---\n{diagnostics}"
        super().__init__(full)
        self.diagnostics = diagnostics
