"""Deterministic direct solution of the Stokes saddle-point system.

The discrete problem couples the vector Laplacian A with the divergence
constraint B and the zero-mean condition on the pressure.  We solve the
augmented symmetric indefinite system

    [ A_ff  B_fᵀ  0 ] [u]   [F_f - A_fb g]
    [ B_f   0     m ] [p] = [-B_b g      ]
    [ 0     mᵀ    0 ] [λ]   [0           ]

by sparse LU with a fixed fill-reducing ordering; the Lagrange multiplier
λ soaks up the (roundoff/interpolation scale) compatibility defect of the
boundary data and is discarded.  The module also provides power-iteration
spectral utilities: operator norms and the discrete inf-sup constant.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigError, SolverError
from .femspace import CoeffVec, THSystem

_PERMC = "COLAMD"


@dataclass
class SolveReport:
    """Solution of one saddle-point solve plus solver diagnostics."""

    solution: CoeffVec
    residual: float
    stats: dict


def _augmented(system: THSystem):
    """Augmented matrix on free velocity DOFs, all pressures, and the
    zero-mean multiplier.  Returns (K, free mask, nf, np)."""
    space = system.space
    free = space.velocity_free
    Af = system.A[free][:, free].tocsc()
    Bf = system.B[:, free].tocsc()
    mcol = sp.csc_matrix(system.m.reshape(-1, 1))
    K = sp.bmat([[Af, Bf.T, None],
                 [Bf, None, mcol],
                 [None, mcol.T, None]], format="csc")
    return K, free, Af.shape[0], system.B.shape[0]


def _pressure_mode_note(K: sp.csc_matrix, nf: int, n_p: int) -> str:
    """Diagnose a (near-)singular saddle matrix: where does the most
    nearly-null eigenvector live?  Dense analysis, small systems only."""
    if K.shape[0] > 3000:
        return "system too large for dense null-mode analysis"
    w, V = np.linalg.eigh(K.toarray())
    k = int(np.argmin(np.abs(w)))
    mode = V[:, k]
    frac = np.linalg.norm(mode[nf:nf + n_p]) / np.linalg.norm(mode)
    return (f"near-null mode (|eigenvalue| = {abs(w[k]):.2e}) carries "
            f"{100.0 * frac:.0f}% of its mass in the pressure block")


def _factorize(K: sp.csc_matrix, nf: int, n_p: int, what: str):
    """LU-factor the augmented matrix, rejecting (near-)singular systems.

    A singular-but-compatible system would otherwise solve quietly with an
    arbitrary null-mode contamination in the pressure, so we insist on a
    healthy pivot ratio rather than trusting the residual alone."""
    try:
        lu = spla.splu(K, permc_spec=_PERMC)
    except RuntimeError as exc:
        raise SolverError(f"{what}: factorization failed ({exc}); "
                          + _pressure_mode_note(K, nf, n_p)) from None
    piv = np.abs(lu.U.diagonal())
    if piv.min() < 1e-12 * piv.max():
        raise SolverError(
            f"{what}: saddle matrix is numerically singular (pivot ratio "
            f"{piv.min() / piv.max():.2e}); " + _pressure_mode_note(K, nf, n_p))
    return lu


def solve(system: THSystem, tol: float = 1e-8, boundary_values=None) -> SolveReport:
    """Solve the constrained Stokes system to relative residual <= tol.

    boundary_values: optional full velocity vector whose entries at
    constrained (boundary) DOFs prescribe the Dirichlet data; free entries
    are ignored.  Defaults to homogeneous data.
    """
    if not 0.0 < tol <= 1e-6:
        raise ConfigError(f"solver tolerance {tol} outside (0, 1e-6]")
    t0 = time.perf_counter()
    K, free, nf, n_p = _augmented(system)

    space = system.space
    vel = np.zeros(2 * space.n_scalar)
    if boundary_values is not None:
        vel[~free] = np.asarray(boundary_values)[~free]
    rhs = np.concatenate([
        (system.F - system.A @ vel)[free],
        -(system.B @ vel),
        [0.0],
    ])

    lu = _factorize(K, nf, n_p, "solve")
    z = lu.solve(rhs)

    scale = np.linalg.norm(rhs)
    residual = float(np.linalg.norm(K @ z - rhs) / (scale if scale > 0 else 1.0))
    if not np.isfinite(residual) or residual > tol:
        raise SolverError(
            f"saddle solve residual {residual:.3e} exceeds {tol:.1e}; "
            + _pressure_mode_note(K, nf, n_p))

    vel[free] = z[:nf]
    pre = z[nf:nf + n_p]
    pre -= (system.m @ pre) / system.m.sum()

    stats = {
        "n_unknowns": int(K.shape[0]),
        "factor_nnz": int(lu.L.nnz + lu.U.nnz),
        "multiplier": float(z[-1]),
        "seconds": time.perf_counter() - t0,
        "method": f"splu/{_PERMC}",
    }
    return SolveReport(CoeffVec(space, vel, pre), residual, stats)


def infsup_constant(system: THSystem, tol: float = 1e-6,
                    maxit: int = 500) -> float:
    """Smallest generalized singular value of the saddle operator in the
    product-norm geometry (velocity H1-seminorm x pressure L2).

    With Gram G and saddle matrix K on the constrained space, the constant
    is 1/sqrt(lambda_max(K⁻¹GK⁻¹G)); the largest eigenvalue is found
    by power iteration (G-inner-product Rayleigh quotients, deterministic
    all-ones start), each application being two sparse triangular solves.
    """
    K, free, nf, n_p = _augmented(system)
    space = system.space
    Gu = system.A[free][:, free]
    Mp = space.mass_p1
    m = system.m

    lu = _factorize(K, nf, n_p, "inf-sup (constant is numerically zero)")

    def gram(y):
        return np.concatenate([Gu @ y[:nf], Mp @ y[nf:]])

    def kinv_g(y):
        z = lu.solve(np.concatenate([gram(y), [0.0]]))
        return z[:-1]

    yu = np.ones(nf)
    yp = np.ones(n_p) - m * (m.sum() / (m @ m))
    y = np.concatenate([yu, yp])
    y /= np.sqrt(y @ gram(y))

    lam_prev = None
    for it in range(maxit):
        ny = kinv_g(kinv_g(y))
        lam = float(ny @ gram(y))
        nrm = np.sqrt(ny @ gram(ny))
        if not np.isfinite(nrm) or nrm == 0.0 or lam <= 0.0:
            raise SolverError(
                "inf-sup constant is numerically zero (power iteration "
                "collapsed); " + _pressure_mode_note(K, nf, n_p))
        y = ny / nrm
        if lam_prev is not None and abs(lam - lam_prev) <= tol * lam:
            return 1.0 / np.sqrt(lam)
        lam_prev = lam
    raise SolverError(
        f"inf-sup power iteration did not converge in {maxit} steps "
        f"(last Rayleigh quotients {lam_prev:.12e}, {lam:.12e})")


def opnorm(M, tol: float = 1e-4, maxit: int = 5000) -> float:
    """Spectral norm of a (sparse or dense) matrix by power iteration on
    MᵀM, deterministic ramp start, relative tolerance tol."""
    n = M.shape[1]
    if n == 0 or M.shape[0] == 0:
        return 0.0
    x = np.linspace(1.0, 2.0, n)
    x /= np.linalg.norm(x)
    MT = M.T
    lam_prev = None
    for it in range(maxit):
        y = M @ x
        lam = float(y @ y)
        if lam == 0.0:
            return 0.0
        z = MT @ y
        x = z / np.linalg.norm(z)
        if lam_prev is not None and abs(lam - lam_prev) <= tol * lam:
            return float(np.sqrt(lam))
        lam_prev = lam
    return float(np.sqrt(lam_prev))
