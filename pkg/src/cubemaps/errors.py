"""Error taxonomy.

Construction-time geometric infeasibility, numerical non-convergence, and
resource/budget refusals are distinct failure modes and callers are expected
to handle them differently, so they get distinct exception types.
"""


class CubemapsError(Exception):
    """Base class for all package errors."""


class SpecificationError(CubemapsError, ValueError):
    """Invalid or inconsistent input data (bad digits, mismatched counts...)."""


class ConstructionError(CubemapsError):
    """A geometric construction cannot be realized.

    Raised with a diagnostic message naming the violated clearance or
    obstruction; the construction never silently degrades.
    """


class CertificationError(ConstructionError):
    """An exact-arithmetic clearance certificate failed."""


class NumericalError(CubemapsError):
    """An iterative solve failed to reach its tolerance.

    Carries the achieved residual when available.
    """

    def __init__(self, msg, residual=None):
        super().__init__(msg)
        self.residual = residual


class ResourceError(CubemapsError):
    """A request exceeds the configured build budget (depth, grid, memory)."""
