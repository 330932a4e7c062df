"""Error taxonomy shared across the package.

Everything user-facing derives from FoleyflowError so the CLI can map
failures onto a single machine-readable stderr line.
"""


class FoleyflowError(Exception):
    """Base class for all errors raised deliberately by this package."""


class ShapeError(FoleyflowError, ValueError):
    """Operand shapes are incompatible; the message names both shapes."""


class ContractError(FoleyflowError, ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(FoleyflowError, ValueError):
    """A configuration value is out of its documented range."""


class FormatError(FoleyflowError, ValueError):
    """A serialized file does not match its documented layout."""


class DivergenceError(FoleyflowError, RuntimeError):
    """A numerical process produced non-finite values.

    step: index of the integrator or optimizer step that diverged.
    """

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step
