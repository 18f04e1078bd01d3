"""Exception hierarchy shared by all modules.

The CLI maps :class:`DataError` (and plain ``ValueError``) to exit code 1 and
:class:`NumericalError` to exit code 2.
"""


class GntkError(Exception):
    """Base class for errors raised by this package."""


class DataError(GntkError, ValueError):
    """Malformed input files or inconsistent data."""


class DisconnectedGraphError(GntkError, ValueError):
    """Raised when an operation requires an irreducible (connected) chain."""

    def __init__(self, n_components: int):
        super().__init__(
            f"graph is disconnected ({n_components} components); "
            "analyze each component separately"
        )
        self.n_components = n_components


class NumericalError(GntkError, ArithmeticError):
    """Numerical failure: non-convergence, corruption, ill-conditioning."""
