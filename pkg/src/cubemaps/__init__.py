"""Measure-preserving cube homeomorphisms with smooth approximations.

Builds an orientation- and volume-preserving homeomorphism of the unit
n-cube that reflects a fat Cantor set in its last coordinate, together with
the smooth volume-preserving diffeomorphisms that approximate it uniformly,
and the verification tooling that checks all of it numerically.
"""

__version__ = "0.1.0"

from .errors import (
    CubemapsError,
    SpecificationError,
    ConstructionError,
    CertificationError,
    NumericalError,
    ResourceError,
)
