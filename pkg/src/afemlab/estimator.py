"""Residual a posteriori error estimation and Dörfler marking.

Per element T the squared indicator has three addends,

    eta_T^2 = diam(T)^2 ||f + lap(u) - grad(p)||_{L2(T)}^2
            + diam(T)   ||[dn u]||_{L2(dT cap Omega)}^2
            + diam(T)   ||div(u)|_T||_{L2(dT)}^2 ,

where lap(u) and grad(p) are elementwise constant (P2 velocity / P1
pressure on affine elements), the normal-derivative jump lives on interior
edges (each full edge integral is attributed to both neighbours), and the
divergence trace of the element's own polynomial is integrated over all of
its boundary, outer edges included.  Data oscillation is the diam-weighted
elementwise best-constant defect of f.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .femspace import CoeffVec, THSpace, _p2_dlam, grad_bary
from .quadrature import triangle_rule

# second derivatives of the P2 shape functions w.r.t. barycentric
# coordinates: constant, (6, 3, 3)
_D2N = np.zeros((6, 3, 3))
for _i in range(3):
    _D2N[_i, _i, _i] = 4.0
for _e, (_i, _j) in enumerate(((0, 1), (1, 2), (2, 0))):
    _D2N[3 + _e, _i, _j] = _D2N[3 + _e, _j, _i] = 4.0

# 2-point Gauss on [0,1]: exact for the squared linear traces below
_EDGE_T = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])
# local edges (vertex index pairs) in tri_edges order
_LOC_EDGES = ((0, 1), (1, 2), (2, 0))


@dataclass
class EstimatorReport:
    """Per-element split of the estimator plus data oscillation."""

    eta2_vol: np.ndarray
    eta2_jump: np.ndarray
    eta2_div: np.ndarray
    osc2: np.ndarray

    @property
    def eta2(self) -> np.ndarray:
        return self.eta2_vol + self.eta2_jump + self.eta2_div

    @property
    def total_eta2(self) -> float:
        return float(self.eta2.sum())

    @property
    def total_osc2(self) -> float:
        return float(self.osc2.sum())

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("elem,eta2_vol,eta2_jump,eta2_div,osc2\n")
            for t in range(len(self.eta2_vol)):
                fh.write(f"{t},{float(self.eta2_vol[t])!r},"
                         f"{float(self.eta2_jump[t])!r},"
                         f"{float(self.eta2_div[t])!r},"
                         f"{float(self.osc2[t])!r}\n")

    @classmethod
    def from_csv(cls, path) -> "EstimatorReport":
        data = np.genfromtxt(path, delimiter=",", skip_header=1, ndmin=2)
        return cls(data[:, 1].copy(), data[:, 2].copy(),
                   data[:, 3].copy(), data[:, 4].copy())


def _edge_gradients(space: THSpace, u: CoeffVec):
    """Velocity gradients and divergence at the 2 Gauss points of each
    local edge, ordered from the smaller to the larger global endpoint.

    Returns grad (nt, 3, 2, 2, 2) [elem, local edge, gp, component, deriv]
    and div (nt, 3, 2)."""
    mesh = space.mesh
    gl = grad_bary(mesh)
    n = space.n_scalar
    cx = u.vel[:n][space.elem_dofs]
    cy = u.vel[n:][space.elem_dofs]

    bary = np.zeros((3, 2, 3))
    for le, (i, j) in enumerate(_LOC_EDGES):
        bary[le, :, i] = 1.0 - _EDGE_T
        bary[le, :, j] = _EDGE_T
    dN = _p2_dlam(bary.reshape(6, 3)).reshape(3, 2, 6, 3)
    GN = np.einsum("egij,tjk->tegik", dN, gl)     # (nt, 3, 2, 6, 2)
    gx = np.einsum("tegik,ti->tegk", GN, cx)
    gy = np.einsum("tegik,ti->tegk", GN, cy)
    grad = np.stack([gx, gy], axis=3)             # (nt, 3, 2, comp, deriv)

    # orient both Gauss points along the global min->max direction
    flip = mesh.tris[:, [e[0] for e in _LOC_EDGES]] > \
        mesh.tris[:, [e[1] for e in _LOC_EDGES]]
    grad = np.where(flip[:, :, None, None, None], grad[:, :, ::-1], grad)
    div = grad[..., 0, 0] + grad[..., 1, 1]
    return grad, div


def estimate(space: THSpace, u: CoeffVec, f, quad_degree: int = 6) -> EstimatorReport:
    """Evaluate the residual estimator and data oscillation for ``u``."""
    mesh = space.mesh
    nt = mesh.n_tris
    areas, diams = mesh.areas, mesh.diams
    gl = grad_bary(mesh)
    n = space.n_scalar
    cx = u.vel[:n][space.elem_dofs]
    cy = u.vel[n:][space.elem_dofs]
    cp = u.pre[mesh.tris]

    # constant per element: lap(u) and grad(p)
    hess = np.einsum("ikl,tka,tlb->tiab", _D2N, gl, gl)   # (nt, 6, 2, 2)
    lap_basis = hess[:, :, 0, 0] + hess[:, :, 1, 1]       # (nt, 6)
    lap = np.stack([np.einsum("ti,ti->t", lap_basis, cx),
                    np.einsum("ti,ti->t", lap_basis, cy)], axis=1)
    gradp = np.einsum("tik,ti->tk", gl, cp)

    bary, w = triangle_rule(quad_degree)
    pts = np.einsum("qk,tkd->tqd", bary, mesh.corners)
    fv = np.asarray(f(pts.reshape(-1, 2))).reshape(nt, len(w), 2)
    resid = fv + (lap - gradp)[:, None, :]
    eta2_vol = diams ** 2 * areas * np.einsum(
        "q,tqc,tqc->t", w, resid, resid)

    fmean = np.einsum("q,tqc->tc", w, fv)
    fdev = fv - fmean[:, None, :]
    osc2 = diams ** 2 * areas * np.einsum("q,tqc,tqc->t", w, fdev, fdev)

    grad, div = _edge_gradients(space, u)
    V = mesh.vertices
    i_loc = np.array([e[0] for e in _LOC_EDGES])
    j_loc = np.array([e[1] for e in _LOC_EDGES])
    evec = V[mesh.tris[:, j_loc]] - V[mesh.tris[:, i_loc]]  # (nt, 3, 2)
    elen = np.linalg.norm(evec, axis=2)
    normal = np.stack([evec[..., 1], -evec[..., 0]], axis=2) / elen[..., None]

    # divergence trace of the element's own polynomial over all of dT
    eta2_div = diams * np.sum(elen * 0.5 * (div ** 2).sum(axis=2), axis=1)

    # normal-jump term per interior edge, attributed to both neighbours
    eta2_jump = np.zeros(nt)
    ge = mesh.tri_edges                       # (nt, 3) global edge ids
    order = np.argsort(ge.ravel(), kind="stable")
    tt, le = np.divmod(order, 3)
    interior = ~mesh.is_boundary_edge
    both = np.nonzero(interior)[0]
    # stable sort groups each interior edge id into consecutive pairs
    first = np.searchsorted(ge.ravel()[order], both, side="left")
    tA, leA = tt[first], le[first]
    tB, leB = tt[first + 1], le[first + 1]
    dg = grad[tA, leA] - grad[tB, leB]        # (ne_i, 2, comp, deriv)
    jam = np.einsum("egcd,ed->egc", dg, normal[tA, leA])
    jump_int = elen[tA, leA] * 0.5 * (jam ** 2).sum(axis=(1, 2))
    np.add.at(eta2_jump, tA, diams[tA] * jump_int)
    np.add.at(eta2_jump, tB, diams[tB] * jump_int)

    return EstimatorReport(eta2_vol, eta2_jump, eta2_div, osc2)


@dataclass
class MarkSet:
    """Result of Dörfler marking."""

    elements: np.ndarray
    converged: bool


def dorfler_mark(report: EstimatorReport, theta: float, power: int = 1) -> MarkSet:
    """Minimal-cardinality element set with sum of eta_T^power at least a
    theta-fraction of the total (first powers by default); ties broken by
    ascending element id."""
    if not 0.0 < theta <= 1.0:
        raise ValueError(f"theta {theta} outside (0, 1]")
    if power not in (1, 2):
        raise ValueError(f"marking power must be 1 or 2, got {power}")
    eta = np.sqrt(report.eta2) if power == 1 else report.eta2
    total = eta.sum()
    if total <= 0.0:
        return MarkSet(np.empty(0, dtype=np.int64), True)
    ids = np.arange(len(eta))
    order = np.lexsort((ids, -eta))
    csum = np.cumsum(eta[order])
    k = int(np.searchsorted(csum, theta * total - 1e-14 * total)) + 1
    k = min(k, int((eta > 0).sum()))
    return MarkSet(np.sort(order[:k]), False)


def releff_ratios(error_x: float, eta2_total: float, osc2_total: float):
    """(reliability, efficiency) = (||u-u_T||/eta, eta/sqrt(err^2+osc^2))."""
    eta = np.sqrt(eta2_total)
    rel = error_x / eta if eta > 0 else 0.0
    den = np.sqrt(error_x ** 2 + osc2_total)
    eff = eta / den if den > 0 else 0.0
    return float(rel), float(eff)
