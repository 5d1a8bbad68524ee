"""Built-in domains, source fields and manufactured Stokes solutions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .mesh import TriMesh, make_mesh

__all__ = [
    "ExactStokes",
    "StokesProblem",
    "unit_square",
    "unit_square_two",
    "lshape",
    "zero_field",
    "constant_field",
    "colliding_flow",
    "lshape_singular",
    "make_problem",
    "SINGULAR_EXPONENT",
]


@dataclass(frozen=True)
class ExactStokes:
    """Closed-form reference solution; gradients use the convention
    ``velocity_grad(x)[n, i, j] = d u_i / d x_j``."""

    velocity: Callable[[np.ndarray], np.ndarray]
    velocity_grad: Callable[[np.ndarray], np.ndarray]
    pressure: Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class StokesProblem:
    name: str
    mesh: TriMesh
    body_force: Callable[[np.ndarray], np.ndarray]
    dirichlet: Optional[Callable[[np.ndarray], np.ndarray]]  # None = homogeneous
    exact: Optional[ExactStokes] = None


def unit_square() -> TriMesh:
    """[0,1]^2 split criss-cross into 4 triangles around the midpoint."""
    vertices = [(0, 0), (1, 0), (1, 1), (0, 1), (0.5, 0.5)]
    tris = [(0, 1, 4), (1, 2, 4), (2, 3, 4), (3, 0, 4)]
    return make_mesh(vertices, tris)


def unit_square_two() -> TriMesh:
    """[0,1]^2 as two triangles along the main diagonal."""
    return make_mesh([(0, 0), (1, 0), (1, 1), (0, 1)], [(0, 1, 2), (0, 2, 3)])


def lshape() -> TriMesh:
    """(-1,1)^2 minus the closed fourth quadrant, six triangles whose
    diagonals all meet at the re-entrant corner (0, 0)."""
    vertices = [(0, 0), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1)]
    tris = [(0, 1, 2), (0, 2, 3), (0, 3, 4), (0, 4, 5), (0, 5, 6), (0, 6, 7)]
    return make_mesh(vertices, tris)


def zero_field(x: np.ndarray) -> np.ndarray:
    return np.zeros((len(x), 2))


def constant_field(cx: float, cy: float):
    def f(x: np.ndarray) -> np.ndarray:
        out = np.empty((len(x), 2))
        out[:, 0] = cx
        out[:, 1] = cy
        return out

    return f


# ---------------------------------------------------------------------------
# colliding flow on the unit square
#
#   u = (20 x y^3, 5 x^4 - 5 y^4),   p = 60 x^2 y - 20 y^3 - 5
#
# div u = 20 y^3 - 20 y^3 = 0 and -Δu + ∇p = 0, so the body force vanishes
# and the data enters through the boundary values alone.  The constant -5
# makes p integrate to zero over [0,1]^2.
# ---------------------------------------------------------------------------


def _colliding_velocity(x):
    u = np.empty((len(x), 2))
    u[:, 0] = 20.0 * x[:, 0] * x[:, 1] ** 3
    u[:, 1] = 5.0 * x[:, 0] ** 4 - 5.0 * x[:, 1] ** 4
    return u


def _colliding_velocity_grad(x):
    g = np.empty((len(x), 2, 2))
    g[:, 0, 0] = 20.0 * x[:, 1] ** 3
    g[:, 0, 1] = 60.0 * x[:, 0] * x[:, 1] ** 2
    g[:, 1, 0] = 20.0 * x[:, 0] ** 3
    g[:, 1, 1] = -20.0 * x[:, 1] ** 3
    return g


def _colliding_pressure(x):
    return 60.0 * x[:, 0] ** 2 * x[:, 1] - 20.0 * x[:, 1] ** 3 - 5.0


def colliding_flow() -> StokesProblem:
    exact = ExactStokes(_colliding_velocity, _colliding_velocity_grad,
                        _colliding_pressure)
    return StokesProblem(
        name="colliding-flow",
        mesh=unit_square(),
        body_force=zero_field,
        dirichlet=exact.velocity,
        exact=exact,
    )


# ---------------------------------------------------------------------------
# singular corner flow on the L-shape
#
# The classical zero-force Stokes pair in polar coordinates (r, phi) around
# the re-entrant corner of interior angle w = 3*pi/2:
#
#   u(r, phi) = r^lam * ( (1+lam) sin(phi) psi(phi) + cos(phi) psi'(phi),
#                         sin(phi) psi'(phi) - (1+lam) cos(phi) psi(phi) )
#   p(r, phi) = -r^(lam-1) * ( (1+lam)^2 psi'(phi) + psi'''(phi) ) / (1-lam)
#
#   psi(phi) = sin((1+lam) phi) cos(lam w)/(1+lam) - cos((1+lam) phi)
#            - sin((1-lam) phi) cos(lam w)/(1-lam) + cos((1-lam) phi)
#
# where lam is the smallest positive root of  sin(lam w) + lam sin(w) = 0.
# The velocity vanishes on the two legs phi=0 and phi=w; on the remaining
# boundary it supplies Dirichlet data.  The gradient of u behaves like
# r^(lam-1), so u is in H^(1+lam-eps) only -- uniform refinement stalls at
# rate lam/2 in element count while adaptivity restores the full rate.
# ---------------------------------------------------------------------------

SINGULAR_EXPONENT = 0.54448373678246

_OMEGA = 1.5 * np.pi
_COS_LW = np.cos(SINGULAR_EXPONENT * _OMEGA)


def _psi_derivs(phi, order_max=3):
    lam = SINGULAR_EXPONENT
    ap, am = 1.0 + lam, 1.0 - lam
    s1, c1 = np.sin(ap * phi), np.cos(ap * phi)
    s2, c2 = np.sin(am * phi), np.cos(am * phi)
    psi = s1 * _COS_LW / ap - c1 - s2 * _COS_LW / am + c2
    d1 = c1 * _COS_LW + ap * s1 - c2 * _COS_LW - am * s2
    d2 = -ap * s1 * _COS_LW + ap * ap * c1 + am * s2 * _COS_LW - am * am * c2
    d3 = -ap * ap * c1 * _COS_LW - ap ** 3 * s1 + am * am * c2 * _COS_LW + am ** 3 * s2
    return (psi, d1, d2, d3)[: order_max + 1]


def _polar(x):
    r = np.hypot(x[:, 0], x[:, 1])
    phi = np.arctan2(x[:, 1], x[:, 0])
    phi = np.where(phi < 0.0, phi + 2.0 * np.pi, phi)
    return r, phi


def _singular_velocity(x):
    lam = SINGULAR_EXPONENT
    r, phi = _polar(x)
    psi, dpsi = _psi_derivs(phi, 1)
    rl = r ** lam
    u = np.empty((len(x), 2))
    u[:, 0] = rl * ((1 + lam) * np.sin(phi) * psi + np.cos(phi) * dpsi)
    u[:, 1] = rl * (np.sin(phi) * dpsi - (1 + lam) * np.cos(phi) * psi)
    return u


def _singular_velocity_grad(x):
    lam = SINGULAR_EXPONENT
    r, phi = _polar(x)
    psi, d1, d2, _ = _psi_derivs(phi, 2)
    sin, cos = np.sin(phi), np.cos(phi)
    g1 = (1 + lam) * sin * psi + cos * d1
    g2 = sin * d1 - (1 + lam) * cos * psi
    g1p = (1 + lam) * cos * psi + lam * sin * d1 + cos * d2
    g2p = (1 + lam) * sin * psi - lam * cos * d1 + sin * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        rl1 = np.where(r > 0.0, r ** (lam - 1.0), 0.0)
    g = np.empty((len(x), 2, 2))
    g[:, 0, 0] = rl1 * (lam * cos * g1 - sin * g1p)
    g[:, 0, 1] = rl1 * (lam * sin * g1 + cos * g1p)
    g[:, 1, 0] = rl1 * (lam * cos * g2 - sin * g2p)
    g[:, 1, 1] = rl1 * (lam * sin * g2 + cos * g2p)
    return g


def _singular_pressure(x):
    lam = SINGULAR_EXPONENT
    r, phi = _polar(x)
    _, d1, _, d3 = _psi_derivs(phi, 3)
    with np.errstate(divide="ignore", invalid="ignore"):
        rl1 = np.where(r > 0.0, r ** (lam - 1.0), 0.0)
    return -rl1 * ((1 + lam) ** 2 * d1 + d3) / (1 - lam)


def lshape_singular() -> StokesProblem:
    exact = ExactStokes(_singular_velocity, _singular_velocity_grad,
                        _singular_pressure)
    return StokesProblem(
        name="lshape-singular",
        mesh=lshape(),
        body_force=zero_field,
        dirichlet=exact.velocity,
        exact=exact,
    )


_PRESETS = {
    "unit-square": unit_square,
    "l-shape": lshape,
    "lshape": lshape,
}


def make_problem(preset: str, field_spec: str = "zero",
                 mesh: TriMesh | None = None) -> StokesProblem:
    """Assemble a problem from a domain preset name and a source-field spec.

    ``field_spec`` is one of ``zero``, ``constant <cx> <cy>``,
    ``colliding-flow``, ``lshape-singular``; the last two fix the domain and
    carry their exact solutions.
    """
    from .errors import ConfigError

    if field_spec == "colliding-flow":
        return colliding_flow()
    if field_spec == "lshape-singular":
        return lshape_singular()

    if mesh is None:
        try:
            mesh = _PRESETS[preset]()
        except KeyError:
            raise ConfigError(f"unknown domain preset {preset!r}") from None
    parts = field_spec.split()
    if parts[0] == "zero":
        force = zero_field
    elif parts[0] == "constant":
        if len(parts) != 3:
            raise ConfigError("constant field needs two components: 'constant cx cy'")
        force = constant_field(float(parts[1]), float(parts[2]))
    else:
        raise ConfigError(f"unknown source field {field_spec!r}")
    return StokesProblem(name=f"{preset}:{parts[0]}", mesh=mesh,
                         body_force=force, dirichlet=None, exact=None)
