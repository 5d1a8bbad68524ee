"""afemlab: a desk-scale laboratory for adaptive Taylor-Hood Stokes solvers.

Newest-vertex-bisection meshes, residual error estimation with Dörfler
marking, measured contraction/stability constants for the adaptive loop,
hierarchical Riesz bases of the velocity/pressure pair, and a small toolkit
for block-LU factorization of boundedly invertible infinite matrices.
"""

from .errors import AfemError, ConfigError, SolverError, ToleranceError

__version__ = "0.1.0"

__all__ = [
    "AfemError",
    "ConfigError",
    "SolverError",
    "ToleranceError",
    "__version__",
]
