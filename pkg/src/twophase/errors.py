"""Exception hierarchy shared across the package.

CLI exit codes map onto these classes: InputError -> 2,
InfeasibleDesignError -> 3, ConvergenceError -> 4.
"""


class TwophaseError(Exception):
    """Base class for all package-specific errors."""


class InputError(TwophaseError):
    """Invalid user input: bad schema, bad config, violated precondition."""


class SchemaError(InputError):
    """A CSV file does not conform to its declared schema.

    Carries the offending row numbers (1-based, header excluded) when known.
    """

    def __init__(self, message, rows=None):
        super().__init__(message)
        self.rows = tuple(rows) if rows else ()


class ConvergenceError(TwophaseError):
    """An iterative fit failed to converge and the caller required success."""


class SeparationError(ConvergenceError):
    """Logistic fit diverged: complete or quasi-complete separation."""


class InfeasibleDesignError(TwophaseError):
    """No valid sampling rule exists for the requested budget and sizes."""

    def __init__(self, message, ne_range=None, offending_points=None):
        super().__init__(message)
        self.ne_range = ne_range
        self.offending_points = tuple(offending_points) if offending_points else ()
