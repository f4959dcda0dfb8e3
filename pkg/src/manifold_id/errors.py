"""Exception types shared across the package.

The CLI maps these onto exit codes (3 for data problems, 4 for numerical
failures); library callers can catch the usual ``ValueError`` /
``FloatingPointError`` bases.
"""


class DataError(ValueError):
    """Input data is malformed or violates a precondition."""


class FeatureFormatError(DataError):
    """A feature file could not be decoded.

    ``row`` is the 1-based row (CSV line or matrix row) where decoding failed,
    or ``None`` when the problem is in the header.
    """

    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class DisconnectedGraphError(DataError):
    """The neighborhood graph has more than one connected component."""

    def __init__(self, component_sizes, message=None):
        self.component_sizes = list(component_sizes)
        if message is None:
            message = (
                f"neighborhood graph is disconnected: {len(self.component_sizes)} "
                f"components with sizes {self.component_sizes[:10]}"
                + (" ..." if len(self.component_sizes) > 10 else "")
            )
        super().__init__(message)


class NumericalError(FloatingPointError):
    """A computation produced non-finite values or a degenerate fit."""
