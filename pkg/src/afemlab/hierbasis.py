"""Hierarchical Riesz bases for the Taylor-Hood pair.

Velocity basis functions are continuous piecewise quadratics vanishing on
the boundary; pressure basis functions are continuous piecewise linears.
Both families are organized along a uniform six-child refinement chain
``T_0, T_1, ..., T_top``: the level of a function is the first chain mesh
whose refinement pattern resolves its support.  Raw candidates are the
nodal functions newly created by an adaptive refinement sequence; each is
normalized and then stabilized by subtracting an interpolant one chain
level down (a Scott-Zhang projection for velocities, a moment-corrected
variant for pressures).  The module also measures the evidence that the
result is a Riesz basis: conditioning of Gram sections, support scaling,
stiffness-entry decay in level gap and in support distance, and banded
truncation errors.

All functions are stored as coefficient vectors on the finest chain member
(the "carrier"), so inner products are exact sparse Gram products there.
"""

from __future__ import annotations

import json
import struct
import weakref
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import AfemError, ToleranceError
from .femspace import (
    THSpace,
    _bary_in,
    _p1_vals,
    ancestor_map,
    assemble,
    grad_bary,
    p2_values,
    slobodeckij,
)
from .infmat import BlockMatrix, BlockStructure
from .mesh import (
    TriMesh,
    bisec5,
    mesh_scaling_constants,
    scale_cells,
    uniform_hierarchy,
)
from .quadrature import gauss01

__all__ = [
    "Hierarchy",
    "ModifiedSZ",
    "Candidate",
    "BasisFunction",
    "RieszBasis",
    "DecayFit",
    "modified_sz_basis",
    "apply_J1",
    "apply_J2",
    "apply_S",
    "hier_candidates",
    "build_riesz",
    "riesz_constants",
    "scaling_profile",
    "stiffness_in_basis",
    "metric",
    "decay_scan",
    "truncation_curve",
    "save_basis",
    "load_basis",
]

_EDGE_SHIFT = 32
_EDGE_MASK = (1 << _EDGE_SHIFT) - 1

# trace Gram of the three quadratic shape functions (endpoint, endpoint,
# midpoint) on a unit-parameterized edge; scaling by the edge length cancels
# against the dual normalization, so only this parameter-space matrix enters
_EDGE_GRAM = np.array(
    [
        [2 / 15, -1 / 30, 1 / 15],
        [-1 / 30, 2 / 15, 1 / 15],
        [1 / 15, 1 / 15, 8 / 15],
    ]
)


def _ekey(a, b):
    lo, hi = (a, b) if a < b else (b, a)
    return (int(lo) << _EDGE_SHIFT) | int(hi)


def _decode(keys):
    keys = np.asarray(keys, dtype=np.int64)
    return keys >> _EDGE_SHIFT, keys & _EDGE_MASK


def _find_keys(sorted_keys: np.ndarray, wanted) -> np.ndarray:
    """Indices of ``wanted`` in a sorted key array; -1 where absent."""
    wanted = np.asarray(wanted, dtype=np.int64)
    pos = np.searchsorted(sorted_keys, wanted)
    pos = np.minimum(pos, sorted_keys.size - 1)
    hit = sorted_keys[pos] == wanted
    return np.where(hit, pos, -1)


def _shape1d(t):
    """Quadratic shape values (endpoint 0, endpoint 1, midpoint) at t."""
    t = np.asarray(t, dtype=np.float64)
    return np.stack([(1 - t) * (1 - 2 * t), t * (2 * t - 1), 4 * t * (1 - t)], axis=-1)


# ---------------------------------------------------------------------------
# hierarchy of uniform six-child refinements
# ---------------------------------------------------------------------------


class Hierarchy:
    """Uniform six-child refinement chain with per-level spaces and carriers.

    ``chain[l]`` is the l-fold six-child refinement of ``mesh0``; the last
    entry is the carrier on which every basis function is stored.  The pair
    (``c_mesh``, ``c_base``) is measured so that element diameters on level
    l lie within ``[c_base**-1, c_base] * c_mesh**-l``.
    """

    def __init__(self, mesh0: TriMesh, top_level: int):
        if top_level < 1:
            raise AfemError("hierarchy needs top_level >= 1")
        self.chain = uniform_hierarchy(mesh0, 1, top_level)
        self.top_level = int(top_level)
        self.c_mesh, self.c_base = mesh_scaling_constants(self.chain)
        self._spaces: dict[int, THSpace] = {}
        self._p2_cache: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()
        self._p1_cache: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()
        self._j1: dict[int, tuple] = {}
        self._j2: dict[int, tuple] = {}
        self._msz: dict[int, "ModifiedSZ"] = {}
        self._key_sets = [set(m.element_keys()) for m in self.chain]
        self._max_level = [int(m.level.max()) for m in self.chain]
        self._resolve_cache = [dict() for _ in self.chain]
        self._level_cache: dict[tuple, int | None] = {}
        self._vidx_cache: dict[int, dict] = {}
        self._adjacency: dict[int, tuple] = {}
        self._cell_index: dict[int, dict] = {}
        self._cover_cache: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()
        self._div_blocks = None
        self._dof_elems = None
        self._j0 = None

    # --- spaces and transfer -------------------------------------------

    def space(self, level: int) -> THSpace:
        if not 0 <= level <= self.top_level:
            raise AfemError(f"level {level} outside hierarchy 0..{self.top_level}")
        if level not in self._spaces:
            self._spaces[level] = THSpace(self.chain[level])
        return self._spaces[level]

    @property
    def carrier(self) -> TriMesh:
        return self.chain[-1]

    @property
    def carrier_space(self) -> THSpace:
        return self.space(self.top_level)

    def p2_prolong(self, coarse: THSpace) -> sp.csr_matrix:
        """Nodal re-interpolation matrix from ``coarse`` onto the carrier."""
        key = coarse.mesh
        if key not in self._p2_cache:
            self._p2_cache[key] = _prolong_p2(coarse, self.carrier_space)
        return self._p2_cache[key]

    def p1_prolong(self, coarse: THSpace) -> sp.csr_matrix:
        key = coarse.mesh
        if key not in self._p1_cache:
            self._p1_cache[key] = _prolong_p1(coarse, self.carrier_space)
        return self._p1_cache[key]

    def vertex_index(self, level: int) -> dict:
        """Coordinate -> vertex id lookup for ``chain[level]`` (coordinates
        are exact dyadic floats, so the mapping is reliable)."""
        if level not in self._vidx_cache:
            v = self.chain[level].vertices
            self._vidx_cache[level] = {
                (float(x), float(y)): i for i, (x, y) in enumerate(v)
            }
        return self._vidx_cache[level]

    def cell_index(self, level: int) -> dict:
        """Forest-key -> element-id lookup for ``chain[level]``."""
        if level not in self._cell_index:
            self._cell_index[level] = {
                key: i for i, key in enumerate(self.chain[level].element_keys())
            }
        return self._cell_index[level]

    def cell_cover(self, mesh: TriMesh, level: int):
        """Containing ``chain[level]`` cell of each element of ``mesh``.

        Returns ``(ids, full)``: ``ids[t]`` is the cell containing element
        t (-1 when t is coarser than the cells), and ``full[c]`` flags the
        cells that are exactly a union of mesh elements (checked by area)."""
        per = self._cover_cache.setdefault(mesh, {})
        if level not in per:
            ok, root, lv, path = scale_cells(mesh, level)
            kidx = self.cell_index(level)
            ids = np.full(mesh.n_tris, -1, dtype=np.int64)
            for t in np.nonzero(ok)[0]:
                ids[t] = kidx[(int(root[t]), int(lv[t]), int(path[t]))]
            cm = self.chain[level]
            cover = np.zeros(cm.n_tris)
            sel = ids >= 0
            np.add.at(cover, ids[sel], mesh.areas[sel])
            full = np.abs(cover - cm.areas) <= 1e-9 * cm.areas
            per[level] = (ids, full)
        return per[level]

    # --- forest-resolution tests ---------------------------------------

    def _resolved(self, level: int, key: tuple) -> bool:
        """Whether the element with forest identity ``key`` is a union of
        ``chain[level]`` elements."""
        memo = self._resolve_cache[level]
        keys = self._key_sets[level]
        maxlev = self._max_level[level]

        def rec(k):
            hit = memo.get(k)
            if hit is not None:
                return hit
            if k in keys:
                memo[k] = True
                return True
            r, lv, p = k
            if lv >= maxlev:
                memo[k] = False
                return False
            ok = rec((r, lv + 1, p)) and rec((r, lv + 1, p | (1 << lv)))
            memo[k] = ok
            return ok

        return rec(key)

    def min_resolving_level(self, key: tuple):
        """Smallest chain level whose mesh resolves the element ``key``;
        None when even the carrier does not."""
        if key in self._level_cache:
            return self._level_cache[key]
        lv = int(key[1])
        out = None
        for ell in range(max(0, -(-lv // 3)), self.top_level + 1):
            if self._resolved(ell, key):
                out = ell
                break
        self._level_cache[key] = out
        return out

    def covers(self, mesh: TriMesh) -> bool:
        """Whether the carrier resolves every element of ``mesh``."""
        return all(
            self._resolved(self.top_level, k) for k in mesh.element_keys()
        )

    # --- interpolation operators ----------------------------------------

    def modified_sz(self, level: int) -> "ModifiedSZ":
        """Moment-corrected piecewise-linear basis tables for the chain pair
        (``chain[level]``, ``chain[level-1]``)."""
        if not 1 <= level <= self.top_level:
            raise AfemError(
                f"two-scale pair needs 1 <= level <= {self.top_level}, got {level}"
            )
        if level not in self._msz:
            self._msz[level] = ModifiedSZ._build(
                self.chain[level - 1], self.chain[level]
            )
        return self._msz[level]

    def j1_factors(self, level: int):
        """Sparse factor pair (B, Yt) of the moment-corrected interpolation
        onto piecewise linears of ``chain[level]``; applied as B @ (Yt @ w)
        to carrier vertex-coefficient vectors."""
        if level not in self._j1:
            self._j1[level] = _build_j1(self, level)
        return self._j1[level]

    def j2_factors(self, level: int):
        """Sparse factor pair (P, Ft) of the Scott-Zhang projection onto
        piecewise quadratics of ``chain[level]``; applied as P @ (Ft @ w) to
        carrier scalar-coefficient vectors."""
        if not 0 <= level <= self.top_level:
            raise AfemError(
                f"projection level must lie in 0..{self.top_level}, got {level}"
            )
        if level not in self._j2:
            self._j2[level] = _build_j2(self, level)
        return self._j2[level]

    def j0_factors(self):
        """Sparse factor pair (P, Ft) of the plain edge-dual interpolation
        onto piecewise linears of ``chain[0]``; applied as P @ (Ft @ w) to
        carrier vertex-coefficient vectors.  Used to stabilize first-level
        pressure functions, one scale below the first two-scale pair."""
        if self._j0 is None:
            self._j0 = _build_j0(self)
        return self._j0

    # --- carrier bookkeeping --------------------------------------------

    def dof_elements(self) -> sp.csr_matrix:
        """Boolean incidence (carrier elements x carrier scalar dofs)."""
        if self._dof_elems is None:
            cs = self.carrier_space
            nt = cs.mesh.n_tris
            rows = np.repeat(np.arange(nt, dtype=np.int64), 6)
            cols = cs.elem_dofs.ravel()
            self._dof_elems = sp.csr_matrix(
                (np.ones(rows.size), (rows, cols)), shape=(nt, cs.n_scalar)
            )
        return self._dof_elems

    def div_blocks(self):
        """Carrier divergence-coupling blocks (Bx, By) with
        (Bx @ u)_q = -integral of hat_q * d(u)/dx for scalar fields u."""
        if self._div_blocks is None:
            cs = self.carrier_space
            system = assemble(cs, lambda p: np.zeros((len(p), 2)))
            B = system.B.tocsc()
            n_s = cs.n_scalar
            self._div_blocks = (B[:, :n_s].tocsr(), B[:, n_s:].tocsr())
        return self._div_blocks

    def adjacency(self, level: int):
        """Vertex-sharing element adjacency of ``chain[level]`` as CSR
        (indptr, indices)."""
        if level not in self._adjacency:
            mesh = self.chain[level]
            tris = mesh.tris
            indptr, vtris = mesh.vertex_tris
            neigh = [[] for _ in range(mesh.n_tris)]
            for t in range(mesh.n_tris):
                acc = []
                for v in tris[t]:
                    acc.append(vtris[indptr[v]: indptr[v + 1]])
                nb = np.unique(np.concatenate(acc))
                neigh[t] = nb
            counts = np.array([len(x) for x in neigh], dtype=np.int64)
            ip = np.concatenate([[0], np.cumsum(counts)])
            idx = np.concatenate(neigh) if neigh else np.empty(0, np.int64)
            self._adjacency[level] = (ip, idx)
        return self._adjacency[level]


def _prolong_p2(coarse: THSpace, fine: THSpace) -> sp.csr_matrix:
    """Sparse nodal interpolation matrix between nested quadratic spaces."""
    anc = ancestor_map(coarse.mesh, fine.mesh)
    owner = np.empty(fine.n_scalar, dtype=np.int64)
    owner[fine.elem_dofs.ravel()] = np.repeat(
        np.arange(fine.mesh.n_tris, dtype=np.int64), 6
    )
    anc_n = anc[owner]
    lam = _bary_in(coarse.mesh, anc_n, fine.node_coords)
    if lam.min() < -1e-9 or lam.max() > 1.0 + 1e-9:
        raise AfemError("fine mesh is not nested in the coarse mesh")
    vals = p2_values(lam)
    cols = coarse.elem_dofs[anc_n]
    rows = np.repeat(np.arange(fine.n_scalar, dtype=np.int64), 6)
    P = sp.coo_matrix(
        (vals.ravel(), (rows, cols.ravel())),
        shape=(fine.n_scalar, coarse.n_scalar),
    ).tocsr()
    P.eliminate_zeros()
    return P


def _prolong_p1(coarse: THSpace, fine: THSpace) -> sp.csr_matrix:
    anc = ancestor_map(coarse.mesh, fine.mesh)
    nvf = fine.n_vertices
    owner = np.empty(nvf, dtype=np.int64)
    owner[fine.mesh.tris.ravel()] = np.repeat(
        np.arange(fine.mesh.n_tris, dtype=np.int64), 3
    )
    anc_v = anc[owner]
    lam = _bary_in(coarse.mesh, anc_v, fine.mesh.vertices)
    if lam.min() < -1e-9 or lam.max() > 1.0 + 1e-9:
        raise AfemError("fine mesh is not nested in the coarse mesh")
    vals = _p1_vals(lam)
    cols = coarse.mesh.tris[anc_v]
    rows = np.repeat(np.arange(nvf, dtype=np.int64), 3)
    P = sp.coo_matrix(
        (vals.ravel(), (rows, cols.ravel())),
        shape=(nvf, coarse.n_vertices),
    ).tocsr()
    P.eliminate_zeros()
    return P


# ---------------------------------------------------------------------------
# moment-corrected piecewise-linear basis (two-scale)
# ---------------------------------------------------------------------------


@dataclass
class ModifiedSZ:
    """Piecewise-linear basis on the six-child refinement of ``coarse``
    whose hat functions at coarse nodes and edge midpoints are corrected by
    interior-node bubbles so that their integral over every coarse element
    vanishes, together with the local dual functions used to project onto
    the span.

    ``columns[:, z]`` holds the fine nodal coefficients of the basis
    function attached to fine vertex z; ``duals[:, z]`` the coefficients of
    its dual, supported on the seven fine nodes of the coarse element
    ``tv[z]``.
    """

    coarse: TriMesh
    fine: TriMesh
    columns: sp.csr_matrix = field(repr=False)
    duals: sp.csr_matrix = field(repr=False)
    tv: np.ndarray = field(repr=False)
    local_index: np.ndarray = field(repr=False)
    local_nodes: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    integrals: np.ndarray = field(repr=False)

    @staticmethod
    def _build(coarse: TriMesh, fine: TriMesh) -> "ModifiedSZ":
        nvc = coarse.n_vertices
        nec = coarse.edge_keys.shape[0]
        ntc = coarse.n_tris
        nvf = fine.n_vertices
        if fine.n_tris != 6 * ntc or nvf != nvc + nec + ntc or not np.array_equal(
            fine.parent, np.repeat(np.arange(ntc, dtype=np.int64), 6)
        ):
            raise AfemError("fine mesh is not the six-child refinement of coarse")

        # seven fine nodes per coarse element: corners, edge midpoints,
        # interior node (fine vertex ordering appends midpoints in edge-key
        # order, then one interior node per element)
        ln = np.empty((ntc, 7), dtype=np.int64)
        ln[:, :3] = coarse.tris
        ln[:, 3:6] = nvc + coarse.tri_edges
        ln[:, 6] = nvc + nec + np.arange(ntc)

        childverts = fine.tris.reshape(ntc, 6, 3)
        childareas = fine.areas.reshape(ntc, 6)

        # map child vertices to local indices 0..6 via row-wise search
        order = np.argsort(ln, axis=1)
        ln_sorted = np.take_along_axis(ln, order, axis=1)
        big = np.int64(nvf)
        offs = (np.arange(ntc, dtype=np.int64) * big)[:, None]
        flat_sorted = (ln_sorted + offs).ravel()
        cv = childverts.reshape(ntc, 18)
        pos = np.searchsorted(flat_sorted, (cv + offs).ravel())
        if not np.array_equal(flat_sorted[pos], (cv + offs).ravel()):
            raise AfemError("child vertex outside its coarse element's node set")
        loc = np.take_along_axis(
            order, (pos - np.repeat(np.arange(ntc), 18) * 7).reshape(ntc, 18), axis=1
        ).reshape(ntc, 6, 3)

        # integrals of the seven local hats over the coarse element
        I = np.zeros((ntc, 7))
        np.add.at(
            I,
            (np.repeat(np.arange(ntc), 18), loc.reshape(ntc, 18).ravel()),
            np.repeat(childareas.ravel() / 3.0, 3),
        )
        alpha = -I[:, :6] / I[:, 6:7]

        # local mass matrices from the six children
        M = np.zeros((ntc, 7, 7))
        base = (np.ones((3, 3)) + np.eye(3)) / 12.0
        tt = np.repeat(np.arange(ntc), 6 * 9)
        ii = np.repeat(loc.reshape(-1, 3), 3, axis=1).ravel()
        jj = np.tile(loc.reshape(-1, 3), (1, 3)).ravel()
        vv = (childareas.ravel()[:, None, None] * base[None]).ravel()
        np.add.at(M, (tt, ii, jj), vv)

        # columns of the local basis (identity plus bubble corrections) and
        # the dual coefficients solving  V^T M W = Id  per element
        V = np.broadcast_to(np.eye(7), (ntc, 7, 7)).copy()
        V[:, 6, :6] = alpha
        W = np.linalg.inv(np.einsum("tij,tik->tjk", V, M))

        # anchor element per fine vertex: largest area, ties by lowest id
        tv = np.empty(nvf, dtype=np.int64)
        li = np.empty(nvf, dtype=np.int64)
        areas = coarse.areas
        indptr, vtris = coarse.vertex_tris
        for z in range(nvc):
            cand = vtris[indptr[z]: indptr[z + 1]]
            best = areas[cand].max()
            pick = int(cand[areas[cand] == best].min())
            tv[z] = pick
            li[z] = int(np.nonzero(coarse.tris[pick] == z)[0][0])
        et = coarse.edge_tris
        for e in range(nec):
            cand = et[e][et[e] >= 0]
            best = areas[cand].max()
            pick = int(cand[areas[cand] == best].min())
            tv[nvc + e] = pick
            li[nvc + e] = 3 + int(np.nonzero(coarse.tri_edges[pick] == e)[0][0])
        tv[nvc + nec:] = np.arange(ntc)
        li[nvc + nec:] = 6

        # global sparse basis columns: unit at the own node plus bubble
        # corrections on every coarse element containing it
        rows = [np.arange(nvf, dtype=np.int64)]
        cols = [np.arange(nvf, dtype=np.int64)]
        vals = [np.ones(nvf)]
        for j in range(6):
            rows.append(ln[:, 6])
            cols.append(ln[:, j])
            vals.append(alpha[:, j])
        columns = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(nvf, nvf),
        ).tocsr()
        columns.eliminate_zeros()

        dr = ln[tv]                      # (nvf, 7) rows per dual column
        dv = W[tv, :, :][np.arange(nvf), :, li]  # (nvf, 7) values
        duals = sp.coo_matrix(
            (
                dv.ravel(),
                (dr.ravel(), np.repeat(np.arange(nvf, dtype=np.int64), 7)),
            ),
            shape=(nvf, nvf),
        ).tocsr()
        duals.eliminate_zeros()

        return ModifiedSZ(
            coarse=coarse,
            fine=fine,
            columns=columns,
            duals=duals,
            tv=tv,
            local_index=li,
            local_nodes=ln,
            alpha=alpha,
            integrals=I,
        )


def modified_sz_basis(fine: TriMesh, coarse: TriMesh) -> ModifiedSZ:
    """Moment-corrected piecewise-linear basis with local duals.

    ``fine`` must be the six-child refinement of ``coarse``; the relation is
    verified structurally (child table, vertex ordering).
    """
    probe = bisec5(coarse)
    if (
        fine.n_tris != probe.n_tris
        or not np.array_equal(fine.tris, probe.tris)
        or not np.array_equal(fine.vertices, probe.vertices)
    ):
        raise AfemError("fine mesh is not the six-child refinement of coarse")
    return ModifiedSZ._build(coarse, fine)


def _build_j1(hier: Hierarchy, level: int):
    """Factor pair of the moment-corrected interpolation onto piecewise
    linears of chain[level], acting on carrier vertex coefficients."""
    msz = hier.modified_sz(level)
    coarse = msz.coarse
    fine_space = hier.space(level)
    carrier = hier.carrier
    P = hier.p1_prolong(fine_space)

    Bfac = (P @ msz.columns).tocsr()
    C = (P @ msz.duals).tocsr()

    anc = ancestor_map(coarse, carrier)
    order = np.argsort(anc, kind="stable")
    bounds = np.searchsorted(anc[order], np.arange(coarse.n_tris + 1))
    zorder = np.argsort(msz.tv, kind="stable")
    zbounds = np.searchsorted(msz.tv[zorder], np.arange(coarse.n_tris + 1))

    tris = carrier.tris
    areas = carrier.areas
    out_rows, out_cols, out_vals = [], [], []
    for T in range(coarse.n_tris):
        elems = order[bounds[T]: bounds[T + 1]]
        zs = zorder[zbounds[T]: zbounds[T + 1]]
        if elems.size == 0 or zs.size == 0:
            continue
        verts = tris[elems]
        vu, iv = np.unique(verts, return_inverse=True)
        iv = iv.reshape(verts.shape)
        Cl = C[vu][:, zs].toarray()
        B3 = Cl[iv]                                   # (m, 3, nz)
        contrib = areas[elems][:, None, None] / 12.0 * (
            B3 + B3.sum(axis=1, keepdims=True)
        )
        Yloc = np.zeros((vu.size, zs.size))
        np.add.at(Yloc, iv.ravel(), contrib.reshape(-1, zs.size))
        out_rows.append(np.repeat(vu, zs.size))
        out_cols.append(np.tile(zs, vu.size))
        out_vals.append(Yloc.ravel())

    Y = sp.coo_matrix(
        (
            np.concatenate(out_vals),
            (np.concatenate(out_rows), np.concatenate(out_cols)),
        ),
        shape=(carrier.n_vertices, fine_space.n_vertices),
    ).tocsr()
    Y.eliminate_zeros()
    return Bfac, Y.T.tocsr()


def _build_j2(hier: Hierarchy, level: int):
    """Factor pair of the Scott-Zhang projection onto piecewise quadratics
    of chain[level], acting on carrier scalar coefficients.

    Dual functionals live on edges: the midpoint dof integrates against the
    dual trace on its own edge; a vertex dof uses its lowest-indexed
    adjacent edge, restricted to boundary edges for boundary vertices so
    that zero traces are preserved.
    """
    fine = hier.chain[level]
    fs = hier.space(level)
    cs = hier.carrier_space
    carrier = cs.mesh
    P = hier.p2_prolong(fs)

    ne = fine.edge_keys.shape[0]
    nvf = fine.n_vertices
    a_arr, b_arr = _decode(fine.edge_keys)

    # lowest-indexed adjacent edge per vertex (boundary-restricted on the
    # boundary); edge indices follow the sorted key order
    eidx = np.arange(ne, dtype=np.int64)
    assign = np.full(nvf, ne, dtype=np.int64)
    inner_v = ~fine.is_boundary_vertex
    for ends in (a_arr, b_arr):
        sel = inner_v[ends]
        np.minimum.at(assign, ends[sel], eidx[sel])
    bnd = fine.is_boundary_edge
    for ends in (a_arr, b_arr):
        sel = ~inner_v[ends] & bnd
        np.minimum.at(assign, ends[sel], eidx[sel])
    if np.any(assign == ne):
        raise AfemError("vertex without an assigned edge")

    # group dofs (vertex slots 0/1, midpoint slot 2) by their edge
    slot_of = np.full((ne, 3), -1, dtype=np.int64)  # dof id per (edge, slot)
    slot_of[:, 2] = nvf + np.arange(ne)
    for v in range(nvf):
        e = assign[v]
        slot_of[e, 0 if a_arr[e] == v else 1] = v

    ginv = np.linalg.inv(_EDGE_GRAM)
    gap = hier.top_level - level
    nseg = 1 << gap
    gp, gw = gauss01(3)

    vidx = hier.vertex_index(hier.top_level)
    ckeys = carrier.edge_keys
    nvc = carrier.n_vertices

    # dyadic points along every fine edge via repeated exact midpoints
    # (reproduces the refinement's own vertex coordinates bit for bit)
    pts = np.empty((ne, nseg + 1, 2))
    pts[:, 0] = fine.vertices[a_arr]
    pts[:, nseg] = fine.vertices[b_arr]
    stepw = nseg
    while stepw > 1:
        half = stepw // 2
        for s in range(0, nseg, stepw):
            pts[:, s + half] = 0.5 * (pts[:, s] + pts[:, s + stepw])
        stepw = half
    pid = np.empty((ne, nseg + 1), dtype=np.int64)
    for j in range(nseg + 1):
        col = pts[:, j]
        pid[:, j] = [vidx[(float(x), float(y))] for x, y in col]
    midkey = np.minimum(pid[:, :-1], pid[:, 1:]).astype(np.int64)
    midkey = (midkey << _EDGE_SHIFT) | np.maximum(pid[:, :-1], pid[:, 1:])
    mpos = np.searchsorted(ckeys, midkey.ravel())
    if not np.array_equal(ckeys[mpos], midkey.ravel()):
        raise AfemError("edge subdivision does not match the carrier mesh")
    middof = (nvc + mpos).reshape(ne, nseg)

    # quadrature: for subsegment s and gauss point q the global parameter is
    # t = (s + gp[q]) / nseg; trace weights couple the three carrier dofs of
    # the subsegment to the three dual slots of the edge
    tglob = (np.arange(nseg)[:, None] + gp[None, :]) / nseg  # (nseg, nq)
    psi = _shape1d(tglob.ravel()).reshape(nseg, len(gp), 3) @ ginv  # value rows
    wloc = _shape1d(gp)                                      # (nq, 3)
    # weight tensor: (nseg, nq, carrier-slot, dual-slot)
    wt = (gw[None, :, None, None] / nseg) * wloc[None, :, :, None] * psi[:, :, None, :]
    wt = wt.sum(axis=1)                                      # (nseg, 3, 3)

    rows, cols, vals = [], [], []
    cdofs = np.stack([pid[:, :-1], pid[:, 1:], middof], axis=2)  # (ne, nseg, 3)
    for slot in range(3):
        dof = slot_of[:, slot]
        live = np.nonzero(dof >= 0)[0]
        if live.size == 0:
            continue
        w_live = wt[None, :, :, slot]                        # (1, nseg, 3)
        rows.append(cdofs[live].reshape(live.size, -1).ravel())
        cols.append(
            np.repeat(dof[live], nseg * 3)
        )
        vals.append(np.broadcast_to(w_live, (live.size, nseg, 3)).ravel())

    F = sp.coo_matrix(
        (
            np.concatenate(vals),
            (np.concatenate(rows), np.concatenate(cols)),
        ),
        shape=(cs.n_scalar, fs.n_scalar),
    ).tocsr()
    F.eliminate_zeros()
    return P, F.T.tocsr()


def _build_j0(hier: Hierarchy):
    """Factor pair of the plain edge-dual interpolation onto piecewise
    linears of chain[0], acting on carrier vertex coefficients.

    Same dual layout as the quadratic projection (lowest adjacent edge per
    vertex, boundary-restricted on the boundary) but with linear traces and
    no midpoint dofs.
    """
    fine = hier.chain[0]
    carrier = hier.carrier
    nvf = fine.n_vertices
    ne = fine.edge_keys.shape[0]
    a_arr, b_arr = _decode(fine.edge_keys)

    eidx = np.arange(ne, dtype=np.int64)
    assign = np.full(nvf, ne, dtype=np.int64)
    inner_v = ~fine.is_boundary_vertex
    for ends in (a_arr, b_arr):
        sel = inner_v[ends]
        np.minimum.at(assign, ends[sel], eidx[sel])
    bnd = fine.is_boundary_edge
    for ends in (a_arr, b_arr):
        sel = ~inner_v[ends] & bnd
        np.minimum.at(assign, ends[sel], eidx[sel])
    if np.any(assign == ne):
        raise AfemError("vertex without an assigned edge")

    slot_of = np.full((ne, 2), -1, dtype=np.int64)
    for v in range(nvf):
        e = assign[v]
        slot_of[e, 0 if a_arr[e] == v else 1] = v

    # dual of the linear trace pair on the unit interval
    ginv = np.linalg.inv(np.array([[1.0 / 3.0, 1.0 / 6.0], [1.0 / 6.0, 1.0 / 3.0]]))
    nseg = 1 << hier.top_level
    gp, gw = gauss01(2)

    vidx = hier.vertex_index(hier.top_level)
    pts = np.empty((ne, nseg + 1, 2))
    pts[:, 0] = fine.vertices[a_arr]
    pts[:, nseg] = fine.vertices[b_arr]
    stepw = nseg
    while stepw > 1:
        half = stepw // 2
        for s in range(0, nseg, stepw):
            pts[:, s + half] = 0.5 * (pts[:, s] + pts[:, s + stepw])
        stepw = half
    pid = np.empty((ne, nseg + 1), dtype=np.int64)
    for j in range(nseg + 1):
        col = pts[:, j]
        pid[:, j] = [vidx[(float(x), float(y))] for x, y in col]

    tglob = (np.arange(nseg)[:, None] + gp[None, :]) / nseg
    shp = np.stack([1.0 - tglob, tglob], axis=2)             # (nseg, nq, 2)
    psi = shp @ ginv
    wloc = np.stack([1.0 - gp, gp], axis=1)                  # (nq, 2)
    wt = (gw[None, :, None, None] / nseg) * wloc[None, :, :, None] * psi[:, :, None, :]
    wt = wt.sum(axis=1)                                      # (nseg, 2, 2)

    cdofs = np.stack([pid[:, :-1], pid[:, 1:]], axis=2)      # (ne, nseg, 2)
    rows, cols, vals = [], [], []
    for slot in range(2):
        dof = slot_of[:, slot]
        live = np.nonzero(dof >= 0)[0]
        if live.size == 0:
            continue
        rows.append(cdofs[live].reshape(live.size, -1).ravel())
        cols.append(np.repeat(dof[live], nseg * 2))
        vals.append(
            np.broadcast_to(wt[None, :, :, slot], (live.size, nseg, 2)).ravel()
        )

    F = sp.coo_matrix(
        (
            np.concatenate(vals),
            (np.concatenate(rows), np.concatenate(cols)),
        ),
        shape=(carrier.n_vertices, nvf),
    ).tocsr()
    F.eliminate_zeros()
    P = hier.p1_prolong(hier.space(0))
    return P, F.T.tocsr()


def apply_J1(hier: Hierarchy, level: int, w):
    """Moment-corrected interpolation of a carrier vertex-coefficient vector
    (or matrix of columns) onto piecewise linears of chain[level]."""
    B, Yt = hier.j1_factors(level)
    return B @ (Yt @ w)


def apply_J2(hier: Hierarchy, level: int, w):
    """Scott-Zhang projection of a carrier scalar-coefficient vector (or
    matrix of columns) onto piecewise quadratics of chain[level]."""
    P, Ft = hier.j2_factors(level)
    return P @ (Ft @ w)


def apply_S(hier: Hierarchy, family: int, level: int, depth: int, w):
    """Truncated projection product J_level J_{level+1} ... J_{level+depth}.

    ``family`` 1 composes the moment-corrected piecewise-linear operators,
    family 2 the quadratic Scott-Zhang projections.  For inputs represented
    on chain[level+k] with k <= depth the truncation is exact.
    """
    if family not in (1, 2):
        raise AfemError(f"operator family must be 1 or 2, got {family}")
    if depth < 0:
        raise AfemError("depth must be nonnegative")
    lo = 1 if family == 1 else 0
    if level < lo:
        raise AfemError(f"family {family} needs level >= {lo}")
    if level + depth > hier.top_level:
        raise AfemError(
            f"depth {depth} from level {level} exceeds the hierarchy top "
            f"{hier.top_level}"
        )
    out = w
    for k in range(level + depth, level - 1, -1):
        out = apply_J1(hier, k, out) if family == 1 else apply_J2(hier, k, out)
    return out


# ---------------------------------------------------------------------------
# candidate functions from an adaptive refinement sequence
# ---------------------------------------------------------------------------


@dataclass
class Candidate:
    """One raw hierarchical candidate: a nodal function frozen on the mesh
    of its creation step, stored as a sparse carrier coefficient column."""

    kind: int                    # 1 velocity (scalar profile), 0 pressure
    step: int
    node: tuple                  # ("vertex", id) or ("edge", (a, b))
    level: int | None            # None -> not representable in the chain
    column: sp.csc_matrix = field(repr=False)
    corr_level: int | None = None   # chain level of the stabilizing interpolant


def _cell_ring(hier: Hierarchy, level: int, cells: np.ndarray, k: int) -> np.ndarray:
    """k-fold vertex-touch expansion of a cell set within ``chain[level]``."""
    ip, idx = hier.adjacency(level)
    mask = np.zeros(hier.chain[level].n_tris, dtype=bool)
    mask[cells] = True
    for _ in range(k):
        for c in np.nonzero(mask)[0]:
            mask[idx[ip[c]: ip[c + 1]]] = True
    return np.nonzero(mask)[0]


def _correction_level(hier: Hierarchy, prev: TriMesh, cur: TriMesh,
                      elems: np.ndarray, cap: int, kind: int) -> int:
    """Largest chain level m <= cap whose cells the *previous* mesh fully
    resolves throughout the two-ring cell neighborhood of the given support
    elements (taken on the creation mesh).  An interpolant from ``chain[m]``
    is supported within that neighborhood, so it lands in the space of the
    previous step; subtracting it then provably keeps the prefix spans of
    the basis intact.  The velocity interpolant spreads over ``chain[m]``
    cell rings; the pressure one carries moment corrections across whole
    ``chain[m-1]`` cells, so its rings are taken one level coarser.  Level
    0 always qualifies because every mesh refines the chain root."""
    for m in range(min(cap, hier.top_level), 0, -1):
        ids_cur, _ = hier.cell_cover(cur, m)
        cells = ids_cur[elems]
        if (cells < 0).any():
            continue
        if kind == 0:
            par = hier.chain[m].parent
            coarse = _cell_ring(hier, m - 1, np.unique(par[np.unique(cells)]), 2)
            inset = np.zeros(hier.chain[m - 1].n_tris, dtype=bool)
            inset[coarse] = True
            region = np.nonzero(inset[par])[0]
        else:
            region = _cell_ring(hier, m, np.unique(cells), 2)
        _, full_prev = hier.cell_cover(prev, m)
        if full_prev[region].all():
            return m
    return 0


def _subedges_on(cur: TriMesh, vidx: dict, key: int) -> list[int]:
    """Edge keys of ``cur`` covering the segment of a disappeared edge,
    found by exact midpoint recursion."""
    keys = cur.edge_keys
    out = []
    a0, b0 = key >> _EDGE_SHIFT, key & _EDGE_MASK
    stack = [(int(a0), int(b0))]
    verts = cur.vertices
    while stack:
        p, q = stack.pop()
        k = _ekey(p, q)
        pos = np.searchsorted(keys, k)
        if pos < keys.size and keys[pos] == k:
            out.append(k)
            continue
        mx = 0.5 * (verts[p] + verts[q])
        m = vidx.get((float(mx[0]), float(mx[1])))
        if m is None:
            raise AfemError(
                "disappeared edge's midpoint is not a vertex of the refined mesh"
            )
        stack.append((p, m))
        stack.append((m, q))
    return out


def hier_candidates(hier: Hierarchy, meshes: list[TriMesh], kind: int):
    """Leveled candidate sets of an adaptive refinement sequence.

    For each step k >= 1, the velocity path (kind 1) collects hat functions
    at new interior vertices and edge bubbles at new interior edges, minus
    one bubble per interior edge of the previous mesh that disappeared (the
    remaining functions stay linearly independent and keep the prefix-span
    property; the dropped bubble is recoverable from the disappeared edge's
    bubble).  The pressure path (kind 0) collects hats at all new vertices.
    Each candidate is frozen as a nodal function of its creation mesh,
    prolonged to the carrier, and tagged with the first chain level that
    resolves its support (None and excluded when even the carrier does
    not), plus the stabilization level: the largest chain level below its
    own whose cells the mesh of the *previous* step fully resolves on a
    two-ring cell neighborhood of the support.

    Returns (candidates, info) with pruning and exclusion diagnostics.
    """
    if kind not in (0, 1):
        raise AfemError(f"candidate kind must be 0 or 1, got {kind}")
    if not meshes:
        raise AfemError("need at least the initial mesh")
    m0 = meshes[0]
    c0 = hier.chain[0]
    if not (
        np.array_equal(m0.vertices, c0.vertices) and np.array_equal(m0.tris, c0.tris)
    ):
        raise AfemError("adaptive sequence does not start from the chain root")
    for k, m in enumerate(meshes):
        if not hier.covers(m):
            raise AfemError(
                f"carrier (top level {hier.top_level}) does not resolve mesh "
                f"{k} (n_tris={m.n_tris}); raise top_level"
            )

    out: list[Candidate] = []
    pruned: list[tuple[int, int]] = []
    excluded = 0

    for k in range(1, len(meshes)):
        prev, cur = meshes[k - 1], meshes[k]
        if not np.array_equal(cur.vertices[: prev.n_vertices], prev.vertices):
            raise AfemError(f"step {k} does not extend the previous vertex set")
        space_k = THSpace(cur)
        vidx = {
            (float(x), float(y)): i for i, (x, y) in enumerate(cur.vertices)
        }
        new_v = np.arange(prev.n_vertices, cur.n_vertices, dtype=np.int64)
        new_e = np.setdiff1d(cur.edge_keys, prev.edge_keys)

        nodes: list[tuple] = []
        dofs: list[int] = []
        if kind == 1:
            keep_v = new_v[~cur.is_boundary_vertex[new_v]]
            eidx = _find_keys(cur.edge_keys, new_e)
            keep_e = new_e[~cur.is_boundary_edge[eidx]]

            gone = np.setdiff1d(
                prev.edge_keys[~prev.is_boundary_edge], cur.edge_keys
            )
            drop = set()
            new_set = set(int(x) for x in keep_e)
            for g in gone:
                cover = _subedges_on(cur, vidx, int(g))
                cover = [c for c in cover if c in new_set]
                if not cover:
                    raise AfemError(
                        f"step {k}: no fresh interior edge covers a "
                        "disappeared interior edge"
                    )
                pick = min(cover)
                if pick in drop:
                    raise AfemError(
                        f"step {k}: two disappeared edges share a sub-edge"
                    )
                drop.add(pick)
                pruned.append((k, pick))
            nodes.extend(("vertex", int(v)) for v in keep_v)
            dofs.extend(int(v) for v in keep_v)
            for e in keep_e:
                if int(e) in drop:
                    continue
                nodes.append(
                    ("edge", (int(e) >> _EDGE_SHIFT, int(e) & _EDGE_MASK))
                )
                dofs.append(
                    cur.n_vertices
                    + int(np.searchsorted(cur.edge_keys, e))
                )
        else:
            nodes.extend(("vertex", int(v)) for v in new_v)
            dofs.extend(int(v) for v in new_v)

        if not dofs:
            continue
        if kind == 1:
            Pk = hier.p2_prolong(space_k).tocsc()
        else:
            Pk = hier.p1_prolong(space_k).tocsc()
        cols = Pk[:, np.asarray(dofs, dtype=np.int64)]

        # support on the creation mesh -> level assignment
        indptr, vtris = cur.vertex_tris
        et = cur.edge_tris
        keys = cur.element_keys()
        for j, node in enumerate(nodes):
            if node[0] == "vertex":
                elems = vtris[indptr[node[1]]: indptr[node[1] + 1]]
            else:
                e = int(np.searchsorted(cur.edge_keys, _ekey(*node[1])))
                elems = et[e][et[e] >= 0]
            levels = [hier.min_resolving_level(keys[t]) for t in elems]
            level = None if any(l is None for l in levels) else max(levels)
            corr = None
            if level is None:
                excluded += 1
            elif level < 1:
                raise AfemError("new function resolved by the chain root")
            else:
                corr = _correction_level(
                    hier, prev, cur, np.asarray(elems, dtype=np.int64),
                    level - 1, kind,
                )
            out.append(
                Candidate(
                    kind=kind,
                    step=k,
                    node=node,
                    level=level,
                    column=cols[:, j],
                    corr_level=corr,
                )
            )

    info = {
        "pruned": pruned,
        "excluded": excluded,
        "per_level": {
            int(l): sum(1 for c in out if c.level == l)
            for l in sorted({c.level for c in out if c.level is not None})
        },
    }
    return out, info


# ---------------------------------------------------------------------------
# the stabilized basis
# ---------------------------------------------------------------------------


@dataclass
class BasisFunction:
    """One basis function; the coefficient column lives in the owning
    basis's profile matrix (velocity x/y components alias one profile)."""

    kind: str                    # "velocity-x" | "velocity-y" | "pressure"
    level: int
    step: int
    profile: int
    support: np.ndarray = field(repr=False)
    barycenter: np.ndarray = field(repr=False)
    norm_record: dict = field(repr=False)
    uid: tuple = ()
    basis: "RieszBasis" = field(default=None, repr=False)

    def column(self) -> sp.csc_matrix:
        return self.basis.profiles[:, self.profile]

    def dense(self) -> np.ndarray:
        return np.asarray(self.basis.profiles[:, self.profile].todense()).ravel()


@dataclass
class RieszBasis:
    """Stabilized hierarchical basis with its two orderings.

    ``profiles`` holds one scalar carrier coefficient column per profile in
    adaptive (creation) order; ``functions`` lists the basis functions (two
    per profile for the velocity family).  ``adaptive_bounds[k]`` counts the
    functions created up to step k; ``uniform_perm`` stably reorders
    ``functions`` by level with block starts ``uniform_bounds``.
    """

    kind: int
    hier: Hierarchy = field(repr=False)
    profiles: sp.csc_matrix = field(repr=False)
    functions: list[BasisFunction] = field(repr=False)
    levels: np.ndarray = field(repr=False)      # per profile
    steps: np.ndarray = field(repr=False)       # per profile
    adaptive_bounds: np.ndarray = field(repr=False)
    uniform_perm: np.ndarray = field(repr=False)
    uniform_bounds: np.ndarray = field(repr=False)
    block_levels: np.ndarray = field(repr=False)
    excluded: list = field(repr=False)
    meta: dict = field(default_factory=dict, repr=False)

    @property
    def n_functions(self) -> int:
        return len(self.functions)

    @property
    def n_profiles(self) -> int:
        return self.profiles.shape[1]

    def function_levels(self) -> np.ndarray:
        return np.array([f.level for f in self.functions], dtype=np.int64)


def _supports_and_barycenters(hier: Hierarchy, W: sp.csc_matrix, p1: bool):
    """Structural support element sets and area-weighted barycenters."""
    carrier = hier.carrier
    if p1:
        nt = carrier.n_tris
        rows = np.repeat(np.arange(nt, dtype=np.int64), 3)
        inc = sp.csr_matrix(
            (np.ones(rows.size), (rows, carrier.tris.ravel())),
            shape=(nt, carrier.n_vertices),
        )
    else:
        inc = hier.dof_elements()
    hits = (inc @ abs(W)).tocsc()
    areas = carrier.areas
    cents = carrier.corners.mean(axis=1)
    supports, barycenters = [], []
    for j in range(W.shape[1]):
        sup = hits.indices[hits.indptr[j]: hits.indptr[j + 1]]
        sup = np.sort(sup)
        a = areas[sup]
        barycenters.append((cents[sup] * a[:, None]).sum(axis=0) / a.sum())
        supports.append(sup)
    return supports, barycenters


def build_riesz(kind: int, hier: Hierarchy, meshes: list[TriMesh], *,
                d_grad: int | None = None) -> RieszBasis:
    """Assemble the stabilized hierarchical basis from an adaptive sequence.

    Level 0 is a basis of the root space (nodal for velocities; mean-free,
    orthonormalized hats dropping the last vertex for pressures).  Higher
    levels take the normalized candidates of :func:`hier_candidates` and
    subtract a coarse interpolant (quadratic Scott-Zhang for kind 1;
    moment-corrected interpolation for kind 0).  The interpolation level of
    a level-l candidate is the largest m <= l-1 whose chain cells the mesh
    of the previous step fully resolves around the candidate's support, so
    the subtracted term stays inside the previous space and the prefix
    spans of the basis remain exact; on sufficiently graded sequences this
    is l-1, matching the two-scale construction.
    Pressures whose interpolation level lands at 0 (all first-level ones)
    sit below the first two-scale pair and instead subtract the plain
    root-space interpolant plus the global mean of the remainder; that
    keeps them mean-free with a kernel no candidate combination can reach.
    When ``d_grad`` >= 3 is passed, the prefix-count identity (functions
    created up to step k == dimension of the step-k space) is enforced and a
    violation names the offending mesh.
    """
    if kind not in (0, 1):
        raise AfemError(f"basis kind must be 0 or 1, got {kind}")
    cands, info = hier_candidates(hier, meshes, kind)
    excluded = [c for c in cands if c.level is None]
    cands = [c for c in cands if c.level is not None]

    cs = hier.carrier_space
    carrier = hier.carrier
    space0 = hier.space(0)
    if kind == 1:
        P0 = hier.p2_prolong(space0)
        free = np.nonzero(space0.scalar_free)[0]
        W0 = P0[:, free].tocsc()
        K = cs.stiffness_scalar
        M = cs.mass_p2
        G = K + M
        nrm0 = np.sqrt(np.asarray((G @ W0).multiply(W0).sum(axis=0)).ravel())
        W0 = W0 @ sp.diags(1.0 / nrm0)
        records0 = [
            {"raw_norm": float(n), "normalization": "H1", "correction": None,
             "correction_level": None}
            for n in nrm0
        ]
    else:
        P0 = hier.p1_prolong(space0)
        nv0 = space0.n_vertices
        M1 = cs.mass_p1
        area = float(carrier.areas.sum())
        H = P0.toarray()
        means = space0.mean_vector
        V = H - np.outer(np.ones(carrier.n_vertices), means / area)
        V = V[:, : nv0 - 1]
        Gm = V.T @ (M1 @ V)
        L = np.linalg.cholesky(Gm)
        W0 = sp.csc_matrix(np.linalg.solve(L, V.T).T)
        records0 = [
            {
                "raw_norm": float(np.sqrt(Gm[j, j])),
                "normalization": "L2-orthonormalized",
                "correction": "mean-free",
                "correction_level": None,
            }
            for j in range(nv0 - 1)
        ]

    # adaptive order: creation order of the candidate list (already by step)
    cols = [W0]
    levels = [np.zeros(W0.shape[1], dtype=np.int64)]
    steps = [np.zeros(W0.shape[1], dtype=np.int64)]
    records = list(records0)
    nodes: list[tuple] = [("root", j) for j in range(W0.shape[1])]

    if cands:
        Wc = sp.hstack([c.column for c in cands], format="csc")
        clev = np.array([c.level for c in cands], dtype=np.int64)
        cstep = np.array([c.step for c in cands], dtype=np.int64)
        if kind == 1:
            K = cs.stiffness_scalar
            M = cs.mass_p2
            G = K + M
        else:
            G = cs.mass_p1
        nrm = np.sqrt(np.asarray((G @ Wc).multiply(Wc).sum(axis=0)).ravel())
        Wc = Wc @ sp.diags(1.0 / nrm)

        ccorr = np.array([c.corr_level for c in cands], dtype=np.int64)
        parts, part_sel = [], []
        for mlev in sorted(set(int(x) for x in ccorr)):
            sel = np.nonzero(ccorr == mlev)[0]
            block = Wc[:, sel]
            if kind == 1:
                corr = apply_J2(hier, mlev, block)
            elif mlev >= 1:
                corr = apply_J1(hier, mlev, block)
            else:
                # below the first two-scale pair there is no moment
                # operator: interpolate onto the root space and shift by the
                # global mean of the remainder, which keeps the result
                # mean-free and inside every refined space
                P0j, F0t = hier.j0_factors()
                sz = np.asarray((P0j @ (F0t @ block)).todense())
                resid = np.asarray(block.todense()) - sz
                shift = (cs.mean_vector @ resid) / area
                corr = sp.csc_matrix(sz + shift[None, :] * np.ones((carrier.n_vertices, 1)))
            parts.append(sp.csc_matrix(block - corr))
            part_sel.append(sel)
        back = np.argsort(np.concatenate(part_sel), kind="stable")
        corrected = sp.hstack(parts, format="csc")[:, back]
        corrected.eliminate_zeros()
        for j, c in enumerate(cands):
            if kind == 1:
                tag = f"scott-zhang level {c.corr_level}"
            elif c.corr_level >= 1:
                tag = f"moment interpolation level {c.corr_level}"
            else:
                tag = "root interpolation + mean shift"
            records.append(
                {
                    "raw_norm": float(nrm[j]),
                    "normalization": "H1" if kind == 1 else "L2",
                    "correction": tag,
                    "correction_level": int(c.corr_level),
                }
            )
            nodes.append(c.node)
        cols.append(corrected)
        levels.append(clev)
        steps.append(cstep)

    profiles = sp.hstack(cols, format="csc")
    profiles.eliminate_zeros()
    profiles.sort_indices()
    levels = np.concatenate(levels)
    steps = np.concatenate(steps)

    supports, barycenters = _supports_and_barycenters(hier, profiles, kind == 0)

    functions: list[BasisFunction] = []
    comps = ("velocity-x", "velocity-y") if kind == 1 else ("pressure",)
    for j in range(profiles.shape[1]):
        for comp in comps:
            functions.append(
                BasisFunction(
                    kind=comp,
                    level=int(levels[j]),
                    step=int(steps[j]),
                    profile=j,
                    support=supports[j],
                    barycenter=np.asarray(barycenters[j]),
                    norm_record=records[j],
                    uid=(kind, comp, j),
                )
            )

    fsteps = np.array([f.step for f in functions], dtype=np.int64)
    flevels = np.array([f.level for f in functions], dtype=np.int64)
    n_steps = len(meshes)
    adaptive_bounds = np.array(
        [int((fsteps <= k).sum()) for k in range(n_steps)], dtype=np.int64
    )
    uniform_perm = np.argsort(flevels, kind="stable")
    sorted_lev = flevels[uniform_perm]
    present = np.unique(sorted_lev)
    starts = np.searchsorted(sorted_lev, present) + 1   # 1-based block starts
    basis = RieszBasis(
        kind=kind,
        hier=hier,
        profiles=profiles,
        functions=functions,
        levels=levels,
        steps=steps,
        adaptive_bounds=adaptive_bounds,
        uniform_perm=uniform_perm,
        uniform_bounds=starts.astype(np.int64),
        block_levels=present.astype(np.int64),
        excluded=excluded,
        meta={"pruned": info["pruned"], "per_level": info["per_level"],
              "nodes": nodes},
    )
    for f in functions:
        f.basis = basis

    # prefix-count identity: functions created up to step k must match the
    # dimension of the adaptive space on mesh k
    first_excluded = min((c.step for c in excluded), default=None)
    span_counts = []
    for k, m in enumerate(meshes):
        if kind == 1:
            dim = 2 * int(THSpace(m).scalar_free.sum())
        else:
            dim = m.n_vertices - 1
        have = int(adaptive_bounds[k])
        span_counts.append((have, dim))
        if first_excluded is not None and k >= first_excluded:
            continue
        if d_grad is not None and d_grad >= 3 and have != dim:
            raise AfemError(
                f"prefix-span mismatch on mesh {k} (n_tris={m.n_tris}): "
                f"{have} basis functions but the space has dimension {dim}; "
                "the refinement sequence is graded too weakly"
            )
    basis.meta["span_counts"] = span_counts
    return basis


# ---------------------------------------------------------------------------
# Riesz conditioning, scaling, stiffness matrix
# ---------------------------------------------------------------------------

_DENSE_EIG_LIMIT = 1200


def _gram(basis: RieszBasis, sel: np.ndarray) -> sp.csc_matrix:
    cs = basis.hier.carrier_space
    W = basis.profiles[:, sel]
    if basis.kind == 1:
        G = cs.stiffness_scalar + cs.mass_p2
    else:
        G = cs.mass_p1
    return (W.T @ (G @ W)).tocsc()


def riesz_constants(basis: RieszBasis, up_to_level: int):
    """Extreme eigenvalues and condition number of the Gram section over
    all functions up to the given level.

    The Gram uses the native inner product of the family (full first-order
    for velocities, plain mean-square for pressures).  The two velocity
    components contribute identical mutually orthogonal blocks, so the
    extremes are computed once from the scalar profiles.
    """
    sel = np.nonzero(basis.levels <= up_to_level)[0]
    if sel.size == 0:
        raise AfemError(f"no basis functions up to level {up_to_level}")
    G = _gram(basis, sel)
    n = G.shape[0]
    if n <= _DENSE_EIG_LIMIT:
        ev = np.linalg.eigvalsh(G.toarray())
        lmin, lmax = float(ev[0]), float(ev[-1])
    else:
        v0 = np.full(n, 1.0 / np.sqrt(n))
        try:
            lmax = float(spla.eigsh(G, k=1, which="LA", v0=v0,
                                    return_eigenvectors=False)[0])
            lmin = float(spla.eigsh(G, k=1, sigma=0.0, which="LM", v0=v0,
                                    return_eigenvectors=False)[0])
        except Exception as exc:  # pragma: no cover - diagnostic path
            raise ToleranceError(f"eigenvalue iteration failed: {exc}")
    if lmin <= 0:
        raise AfemError(
            f"Gram section up to level {up_to_level} is numerically singular "
            f"(lambda_min={lmin:.3e})"
        )
    return lmin, lmax, lmax / lmin


def _restrict_to_level(basis: RieszBasis, f: BasisFunction):
    """Coefficients of a basis function on its own chain level's mesh."""
    hier = basis.hier
    ell = f.level
    cc = f.dense()
    mesh = hier.chain[ell]
    if basis.kind == 0:
        return mesh, cc[: mesh.n_vertices]
    if ell == hier.top_level:
        return mesh, cc
    nxt = hier.chain[ell + 1]
    nv, ne = mesh.n_vertices, mesh.edge_keys.shape[0]
    mid_ids = nv + np.arange(ne)
    vals = np.concatenate([cc[:nv], cc[mid_ids]])
    return mesh, vals


def scaling_profile(basis: RieszBasis, s_values=(0.0, 0.5, 1.0), *,
                    max_per_level: int = 12, seed: int = 0) -> dict:
    """Measured norm-ratio profile ||v||_{H^s} / ||v||_{L2} per level.

    s = 1 uses the first-order Gram, s = 1/2 the double-integral fractional
    seminorm over the function's support on its own chain level, s = -1 a
    discrete dual-norm proxy sup_w <v, w> / ||w||_{H^1} (pressures only).
    Returns per-level ratio samples, medians, and consecutive-level median
    factors.
    """
    hier = basis.hier
    rng = np.random.default_rng(seed)
    lev_list = sorted(set(int(l) for l in basis.levels))
    out = {"levels": lev_list, "ratios": {}, "medians": {}, "factors": {}}
    neg = any(s < 0 for s in s_values)
    if neg:
        if basis.kind != 0:
            raise AfemError("negative-order scaling is defined for pressures only")
        K1, M1 = _p1_matrices(hier)
        lu = spla.splu((K1 + M1).tocsc())
    for s in s_values:
        per_level = {}
        for ell in lev_list:
            idx = np.nonzero(basis.levels == ell)[0]
            if idx.size > max_per_level:
                idx = np.sort(rng.choice(idx, size=max_per_level, replace=False))
            ratios = []
            for j in idx:
                f = basis.functions[j * (2 if basis.kind == 1 else 1)]
                ratios.append(_hs_ratio(basis, f, s, lu if neg and s < 0 else None))
            per_level[ell] = np.asarray(ratios)
        out["ratios"][s] = per_level
        med = np.array([np.median(per_level[ell]) for ell in lev_list])
        out["medians"][s] = med
        out["factors"][s] = med[1:] / med[:-1]
    return out


def _p1_matrices(hier: Hierarchy):
    mesh = hier.carrier
    g = grad_bary(mesh)
    loc = np.einsum("tik,tjk->tij", g, g) * mesh.areas[:, None, None]
    rows = np.repeat(mesh.tris, 3, axis=1).ravel()
    colsK = np.tile(mesh.tris, (1, 3)).ravel()
    K1 = sp.coo_matrix(
        (loc.ravel(), (rows, colsK)),
        shape=(mesh.n_vertices, mesh.n_vertices),
    ).tocsr()
    return K1, hier.carrier_space.mass_p1


def _hs_ratio(basis: RieszBasis, f: BasisFunction, s: float, lu=None) -> float:
    hier = basis.hier
    cs = hier.carrier_space
    v = f.dense()
    if basis.kind == 1:
        M = cs.mass_p2
        l2sq = float(v @ (M @ v))
    else:
        M = cs.mass_p1
        l2sq = float(v @ (M @ v))
    if s == 0.0:
        return 1.0
    if s == 1.0:
        if basis.kind == 1:
            h1sq = float(v @ ((cs.stiffness_scalar + M) @ v))
        else:
            K1, M1 = _p1_matrices(hier)
            h1sq = float(v @ ((K1 + M1) @ v))
        return float(np.sqrt(h1sq / l2sq))
    if s == 0.5:
        mesh, coeffs = _restrict_to_level(basis, f)
        if basis.kind == 0:
            a, b = _decode(mesh.edge_keys)
            coeffs = np.concatenate([coeffs, 0.5 * (coeffs[a] + coeffs[b])])
        sp_space = THSpace(mesh)
        dofs = sp_space.elem_dofs if basis.kind == 1 else np.hstack(
            [mesh.tris, mesh.n_vertices + mesh.tri_edges]
        )
        live = np.nonzero(np.abs(coeffs) > 0)[0]
        mask = np.isin(dofs, live).any(axis=1)
        domain = np.nonzero(mask)[0]
        semi = slobodeckij(mesh, coeffs, 0.5, domain=domain)
        return float(np.sqrt((l2sq + semi) / l2sq))
    if s == -1.0:
        if lu is None:
            K1, M1 = _p1_matrices(hier)
            lu = spla.splu((K1 + M1).tocsc())
        Mv = cs.mass_p1 @ v
        dual = float(Mv @ lu.solve(Mv))
        return float(np.sqrt(dual / l2sq))
    raise AfemError(f"unsupported scaling order s={s}")


def stiffness_in_basis(vel: RieszBasis, pre: RieszBasis,
                       ordering: str = "adaptive") -> BlockMatrix:
    """Exact Galerkin matrix of the saddle form over the combined basis.

    Combined functions are the velocity x/y components and the pressures;
    within a block the velocity pairs come first.  ``ordering`` "adaptive"
    blocks by creation step, "uniform" by level; the permutation between
    the two is attached to the result.
    """
    if vel.kind != 1 or pre.kind != 0:
        raise AfemError("expected a velocity basis (kind 1) and a pressure "
                        "basis (kind 0)")
    if vel.hier is not pre.hier:
        raise AfemError("bases live on different hierarchies")
    if ordering not in ("adaptive", "uniform"):
        raise AfemError(f"unknown ordering {ordering!r}")
    hier = vel.hier
    cs = hier.carrier_space
    K = cs.stiffness_scalar
    Bx, By = hier.div_blocks()
    Wv = vel.profiles
    Wp = pre.profiles

    Kvv = (Wv.T @ (K @ Wv)).tocoo()
    Cx = (Wp.T @ (Bx @ Wv)).tocoo()
    Cy = (Wp.T @ (By @ Wv)).tocoo()

    # combined adaptive enumeration: per step, velocity x/y pairs first,
    # then that step's pressures
    entries = []   # (step, level, kindcode, profile, function)
    for f in vel.functions:
        comp = 0 if f.kind == "velocity-x" else 1
        entries.append((f.step, f.level, comp, f.profile, f))
    for f in pre.functions:
        entries.append((f.step, f.level, 2, f.profile, f))
    entries.sort(key=lambda t: (t[0], t[2] == 2, t[3], t[2]))
    functions = [t[4] for t in entries]
    steps = np.array([t[0] for t in entries], dtype=np.int64)
    levels = np.array([t[1] for t in entries], dtype=np.int64)
    codes = np.array([t[2] for t in entries], dtype=np.int64)
    n = len(entries)

    pos = {}
    for i, t in enumerate(entries):
        pos[(t[2], t[3])] = i
    pos_vx = np.array(
        [pos[(0, j)] for j in range(Wv.shape[1])], dtype=np.int64
    )
    pos_vy = np.array(
        [pos[(1, j)] for j in range(Wv.shape[1])], dtype=np.int64
    )
    pos_p = np.array(
        [pos[(2, j)] for j in range(Wp.shape[1])], dtype=np.int64
    )

    rows = [pos_vx[Kvv.row], pos_vy[Kvv.row],
            pos_p[Cx.row], pos_vx[Cx.col],
            pos_p[Cy.row], pos_vy[Cy.col]]
    cols = [pos_vx[Kvv.col], pos_vy[Kvv.col],
            pos_vx[Cx.col], pos_p[Cx.row],
            pos_vy[Cy.col], pos_p[Cy.row]]
    vals = [Kvv.data, Kvv.data, Cx.data, Cx.data, Cy.data, Cy.data]
    A = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    ).tocsr()

    perm = np.argsort(levels, kind="stable")
    if ordering == "uniform":
        A = A[perm][:, perm].tocsr()
        levels_o = levels[perm]
        steps_o = steps[perm]
        codes_o = codes[perm]
        functions_o = [functions[i] for i in perm]
        key = levels_o
    else:
        levels_o, steps_o, codes_o, functions_o = levels, steps, codes, functions
        key = steps_o
    present = np.unique(key)
    starts = np.searchsorted(key, present) + 1
    structure = BlockStructure(starts, n)
    kinds = np.array(["v", "v", "p"], dtype=object)[codes_o]
    return BlockMatrix(
        matrix=A,
        structure=structure,
        levels=levels_o,
        kinds=kinds,
        meta={
            "ordering": ordering,
            "functions": functions_o,
            "perm_to_uniform": perm,
            "block_key": present,
            "c_mesh": hier.c_mesh,
            "hier": hier,
        },
    )


# ---------------------------------------------------------------------------
# support metrics and decay scans
# ---------------------------------------------------------------------------


def _containing(mesh: TriMesh, p: np.ndarray) -> np.ndarray:
    """All elements whose closure contains the point (relative tolerance)."""
    c = mesh.corners
    d0 = (c[:, 1, 0] - c[:, 0, 0]) * (p[1] - c[:, 0, 1]) - (
        c[:, 1, 1] - c[:, 0, 1]
    ) * (p[0] - c[:, 0, 0])
    d1 = (c[:, 2, 0] - c[:, 1, 0]) * (p[1] - c[:, 1, 1]) - (
        c[:, 2, 1] - c[:, 1, 1]
    ) * (p[0] - c[:, 1, 0])
    d2 = (c[:, 0, 0] - c[:, 2, 0]) * (p[1] - c[:, 2, 1]) - (
        c[:, 0, 1] - c[:, 2, 1]
    ) * (p[0] - c[:, 2, 0])
    tol = 1e-12 * mesh.areas
    inside = (d0 >= -tol) & (d1 >= -tol) & (d2 >= -tol)
    hits = np.nonzero(inside)[0]
    if hits.size == 0:
        raise AfemError(f"point {p} lies outside the mesh")
    return hits


def _chain_distance(hier: Hierarchy, level: int, pa, pb) -> int:
    """Minimal number of elements in a vertex-connected chain of
    chain[level] joining the two points."""
    mesh = hier.chain[level]
    src = _containing(mesh, np.asarray(pa, dtype=np.float64))
    dst = _containing(mesh, np.asarray(pb, dtype=np.float64))
    dst_mask = np.zeros(mesh.n_tris, dtype=bool)
    dst_mask[dst] = True
    if dst_mask[src].any():
        return 1
    indptr, idx = hier.adjacency(level)
    visited = np.zeros(mesh.n_tris, dtype=bool)
    visited[src] = True
    frontier = src
    dist = 1
    while frontier.size:
        nxt = []
        for t in frontier:
            nb = idx[indptr[t]: indptr[t + 1]]
            nb = nb[~visited[nb]]
            visited[nb] = True
            nxt.append(nb)
        frontier = np.concatenate(nxt) if nxt else np.empty(0, np.int64)
        dist += 1
        if frontier.size and dst_mask[frontier].any():
            return dist
    raise AfemError("support barycenters are not connected on this level")


def metric(kind: str, v: BasisFunction, w: BasisFunction, hier: Hierarchy, *,
           beta: float = 1.0, gamma: float | None = None) -> float:
    """Support/level distance between two basis functions.

    d1 counts elements in a connecting chain on the coarser function's
    level; d2 adds the weighted level gap and a logarithmic correction;
    d3 is level-local, with a large placeholder across levels (gamma
    defaults to the measured mesh-scaling constant).
    """
    if kind not in ("d1", "d2", "d3"):
        raise AfemError(f"unknown metric {kind!r}")
    delta = 0.0 if v.uid == w.uid else 1.0
    if kind == "d1":
        return float(
            _chain_distance(hier, min(v.level, w.level), v.barycenter,
                            w.barycenter)
        )
    if kind == "d2":
        d1 = _chain_distance(hier, min(v.level, w.level), v.barycenter,
                             w.barycenter)
        return float(delta + beta * abs(v.level - w.level)
                     + np.log(delta + d1))
    if gamma is None:
        gamma = hier.c_mesh
    if v.level != w.level:
        return float(gamma ** max(v.level, w.level))
    d1 = _chain_distance(hier, v.level, v.barycenter, w.barycenter)
    return float(delta + d1 - 1.0)


@dataclass
class DecayFit:
    """Per-interaction-kind decay of stiffness entries.

    ``bins[kind]`` maps level gap -> max |entry|; ``factors[kind]`` is the
    fitted per-level multiplier (exp of the log-linear slope), and
    ``exponents[kind]`` the corresponding exponent base c_mesh.  ``d2``
    holds the sampled distance-decay slope per kind.
    """

    bins: dict
    factors: dict
    exponents: dict
    d2: dict
    c_mesh: float


def decay_scan(A: BlockMatrix, *, metric_kind: str = "d2",
               max_metric_pairs: int = 4000, seed: int = 0) -> DecayFit:
    """Bin stiffness entries by level gap (and sampled support distance)
    and fit log-linear decay rates per interaction kind."""
    if A.levels is None or A.kinds is None or "functions" not in A.meta:
        raise AfemError("decay_scan needs a level/kind-annotated matrix")
    hier = A.meta.get("hier")
    c_mesh = A.meta.get("c_mesh", getattr(hier, "c_mesh", np.e))
    coo = A.matrix.tocoo()
    levels = np.asarray(A.levels)
    kinds = np.asarray(A.kinds)
    funcs = A.meta["functions"]
    gap = np.abs(levels[coo.row] - levels[coo.col])
    kr, kc = kinds[coo.row], kinds[coo.col]
    pair_kind = np.where(
        (kr == "v") & (kc == "v"), "vv",
        np.where((kr == "p") & (kc == "p"), "pp", "vp"),
    )
    vals = np.abs(coo.data)

    bins, factors, exponents, d2fit = {}, {}, {}, {}
    rng = np.random.default_rng(seed)
    for kind in ("vv", "vp"):
        mask = (pair_kind == kind) & (vals > 0)
        if not mask.any():
            continue
        g = gap[mask]
        v = vals[mask]
        bm = {}
        for gg in np.unique(g):
            bm[int(gg)] = float(v[g == gg].max())
        bins[kind] = bm
        ks = sorted(bm)
        if len(ks) >= 2:
            slope = np.polyfit(ks, np.log([bm[k] for k in ks]), 1)[0]
            factors[kind] = float(np.exp(slope))
            exponents[kind] = float(-slope / np.log(c_mesh))
        # sampled distance decay
        if hier is not None:
            idx = np.nonzero(mask)[0]
            if idx.size > max_metric_pairs:
                idx = rng.choice(idx, size=max_metric_pairs, replace=False)
            ds, lv = [], []
            for i in idx:
                fv, fw = funcs[coo.row[i]], funcs[coo.col[i]]
                ds.append(metric(metric_kind, fv, fw, hier))
                lv.append(np.log(vals[i]))
            ds = np.asarray(ds)
            lv = np.asarray(lv)
            if np.unique(np.round(ds, 6)).size >= 2:
                d2fit[kind] = float(np.polyfit(ds, lv, 1)[0])
    return DecayFit(bins=bins, factors=factors, exponents=exponents,
                    d2=d2fit, c_mesh=float(c_mesh))


def truncation_curve(A: BlockMatrix, radii) -> np.ndarray:
    """Spectral norms of the part of A outside each level-gap band."""
    if A.levels is None:
        raise AfemError("truncation needs level annotations")
    levels = np.asarray(A.levels)
    coo = A.matrix.tocoo()
    gap = np.abs(levels[coo.row] - levels[coo.col])
    out = []
    for r in radii:
        mask = gap > r
        if not mask.any():
            out.append(0.0)
            continue
        X = sp.coo_matrix(
            (coo.data[mask], (coo.row[mask], coo.col[mask])), shape=A.matrix.shape
        ).tocsr()
        n = X.shape[0]
        if n <= 2000:
            out.append(float(np.linalg.norm(X.toarray(), 2)))
        else:
            v0 = np.full(n, 1.0 / np.sqrt(n))
            s = spla.svds(X, k=1, v0=v0, return_singular_vectors=False)
            out.append(float(s[0]))
    return np.asarray(out)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

_BASIS_MAGIC = b"AFB1"


def save_basis(basis: RieszBasis, directory) -> None:
    """Write ``basis.json`` plus a sparse-coefficient binary sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    W = basis.profiles.tocsc()
    with open(directory / "basis_coeffs.bin", "wb") as fh:
        fh.write(_BASIS_MAGIC)
        fh.write(struct.pack("<QQ", W.shape[1], W.shape[0]))
        for j in range(W.shape[1]):
            lo, hi = W.indptr[j], W.indptr[j + 1]
            fh.write(struct.pack("<Q", hi - lo))
            fh.write(W.indices[lo:hi].astype("<i8").tobytes())
            fh.write(W.data[lo:hi].astype("<f8").tobytes())
    doc = {
        "kind": basis.kind,
        "c_mesh": basis.hier.c_mesh,
        "c_base": basis.hier.c_base,
        "top_level": basis.hier.top_level,
        "coeff_file": "basis_coeffs.bin",
        "adaptive_bounds": basis.adaptive_bounds.tolist(),
        "uniform_perm": basis.uniform_perm.tolist(),
        "uniform_bounds": basis.uniform_bounds.tolist(),
        "block_levels": basis.block_levels.tolist(),
        "excluded": len(basis.excluded),
        "functions": [
            {
                "kind": f.kind,
                "level": f.level,
                "step": f.step,
                "profile": f.profile,
                "barycenter": [float(f.barycenter[0]), float(f.barycenter[1])],
                "support": f.support.tolist(),
                "norm": f.norm_record,
            }
            for f in basis.functions
        ],
    }
    with open(directory / "basis.json", "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_basis(directory, hier: Hierarchy) -> RieszBasis:
    """Rebuild a basis saved by :func:`save_basis` on a matching hierarchy."""
    directory = Path(directory)
    with open(directory / "basis.json") as fh:
        doc = json.load(fh)
    if doc["top_level"] != hier.top_level:
        raise AfemError(
            f"saved basis used top level {doc['top_level']}, hierarchy has "
            f"{hier.top_level}"
        )
    with open(directory / doc["coeff_file"], "rb") as fh:
        if fh.read(4) != _BASIS_MAGIC:
            raise AfemError("coefficient sidecar has a wrong magic header")
        n_cols, n_rows = struct.unpack("<QQ", fh.read(16))
        indptr = [0]
        indices, data = [], []
        for _ in range(n_cols):
            (nnz,) = struct.unpack("<Q", fh.read(8))
            indices.append(np.frombuffer(fh.read(8 * nnz), dtype="<i8"))
            data.append(np.frombuffer(fh.read(8 * nnz), dtype="<f8"))
            indptr.append(indptr[-1] + nnz)
    W = sp.csc_matrix(
        (
            np.concatenate(data) if data else np.empty(0),
            np.concatenate(indices) if indices else np.empty(0, np.int64),
            np.asarray(indptr, dtype=np.int64),
        ),
        shape=(n_rows, n_cols),
    )
    functions = []
    for rec in doc["functions"]:
        functions.append(
            BasisFunction(
                kind=rec["kind"],
                level=rec["level"],
                step=rec["step"],
                profile=rec["profile"],
                support=np.asarray(rec["support"], dtype=np.int64),
                barycenter=np.asarray(rec["barycenter"]),
                norm_record=rec["norm"],
                uid=(doc["kind"], rec["kind"], rec["profile"]),
            )
        )
    prof_ids = sorted({f.profile for f in functions})
    levels = np.empty(len(prof_ids), dtype=np.int64)
    steps = np.empty(len(prof_ids), dtype=np.int64)
    for f in functions:
        levels[f.profile] = f.level
        steps[f.profile] = f.step
    basis = RieszBasis(
        kind=doc["kind"],
        hier=hier,
        profiles=W,
        functions=functions,
        levels=levels,
        steps=steps,
        adaptive_bounds=np.asarray(doc["adaptive_bounds"], dtype=np.int64),
        uniform_perm=np.asarray(doc["uniform_perm"], dtype=np.int64),
        uniform_bounds=np.asarray(doc["uniform_bounds"], dtype=np.int64),
        block_levels=np.asarray(doc["block_levels"], dtype=np.int64),
        excluded=[None] * int(doc["excluded"]),
        meta={"loaded_from": str(directory)},
    )
    for f in functions:
        f.basis = basis
    return basis
