"""Conforming triangle meshes under newest-vertex bisection (NVB).

Storage convention: every triangle is a row ``(v0, v1, v2)`` whose reference
edge is ``(v0, v1)``.  Bisecting at the midpoint ``m`` of the reference edge
produces the children ``(v2, v0, m)`` and ``(v1, v2, m)``; both inherit the
orientation of the parent and their reference edge is the one opposite the
new vertex, which is the classical NVB rule.

Besides coordinates, every element carries its bisection-forest identity:
``root`` (index of its ancestor in the initial mesh), ``level`` (number of
bisections from that root) and ``path`` (one bit per bisection, bit ``k`` set
iff the step at depth ``k`` took the second child).  Refinement relations
between meshes with a common initial mesh are thereby exact integer
bookkeeping.  All vertex coordinates are dyadic (midpoints of midpoints of
the initial coordinates), so coordinate comparisons are exact as well.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import AfemError

__all__ = [
    "TriMesh",
    "make_mesh",
    "refine",
    "bisec5",
    "uniform_hierarchy",
    "mesh_scaling_constants",
    "closure_bound_stats",
    "scale_levels",
    "scale_cells",
    "enforce_grading",
    "check_grading",
    "patch",
    "locate_points",
    "read_tri",
    "write_tri",
    "validate",
]

_EDGE_SHIFT = 32
_EDGE_MASK = (1 << _EDGE_SHIFT) - 1


def _edge_keys(a, b):
    """Encode undirected edges (a, b) as sortable int64 keys."""
    lo = np.minimum(a, b).astype(np.int64)
    hi = np.maximum(a, b).astype(np.int64)
    return (lo << _EDGE_SHIFT) | hi


def _decode_edge_keys(keys):
    keys = np.asarray(keys, dtype=np.int64)
    return keys >> _EDGE_SHIFT, keys & _EDGE_MASK


@dataclass(eq=False)
class TriMesh:
    """A conforming triangulation with bisection bookkeeping.

    Attributes
    ----------
    vertices : (nv, 2) float array; refinement only ever appends rows.
    tris : (nt, 3) int array, reference edge = (row[0], row[1]).
    level : (nt,) bisection count from the root element.
    parent : (nt,) index into the predecessor mesh (-1 for initial meshes).
    root, path : bisection-forest identity (see module docstring).
    boundary_edges : sorted int64 edge keys of the edges on the domain boundary.
    """

    vertices: np.ndarray
    tris: np.ndarray
    level: np.ndarray
    parent: np.ndarray
    root: np.ndarray
    path: np.ndarray
    boundary_edges: np.ndarray
    refine_stats: dict = field(default_factory=dict)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_tris(self) -> int:
        return self.tris.shape[0]

    @cached_property
    def tri_edge_keys(self) -> np.ndarray:
        """(nt, 3) edge keys; local edge i runs from vertex i to vertex i+1."""
        t = self.tris
        return np.stack(
            [
                _edge_keys(t[:, 0], t[:, 1]),
                _edge_keys(t[:, 1], t[:, 2]),
                _edge_keys(t[:, 2], t[:, 0]),
            ],
            axis=1,
        )

    @cached_property
    def edge_keys(self) -> np.ndarray:
        """Sorted unique edge keys."""
        return np.unique(self.tri_edge_keys)

    @cached_property
    def tri_edges(self) -> np.ndarray:
        """(nt, 3) indices into ``edge_keys``."""
        return np.searchsorted(self.edge_keys, self.tri_edge_keys)

    @cached_property
    def edge_tris(self) -> np.ndarray:
        """(ne, 2) adjacent triangle ids per edge, -1 where there is no second one."""
        ne = self.edge_keys.shape[0]
        out = np.full((ne, 2), -1, dtype=np.int64)
        eids = self.tri_edges.ravel()
        tids = np.repeat(np.arange(self.n_tris, dtype=np.int64), 3)
        order = np.argsort(eids, kind="stable")
        eids, tids = eids[order], tids[order]
        first = np.ones(len(eids), dtype=bool)
        first[1:] = eids[1:] != eids[:-1]
        out[eids[first], 0] = tids[first]
        second = ~first
        out[eids[second], 1] = tids[second]
        return out

    @cached_property
    def is_boundary_edge(self) -> np.ndarray:
        return np.isin(self.edge_keys, self.boundary_edges)

    @cached_property
    def is_boundary_vertex(self) -> np.ndarray:
        out = np.zeros(self.n_vertices, dtype=bool)
        a, b = _decode_edge_keys(self.boundary_edges)
        out[a] = True
        out[b] = True
        return out

    @cached_property
    def corners(self) -> np.ndarray:
        """(nt, 3, 2) vertex coordinates per triangle."""
        return self.vertices[self.tris]

    @cached_property
    def areas(self) -> np.ndarray:
        c = self.corners
        d1 = c[:, 1] - c[:, 0]
        d2 = c[:, 2] - c[:, 0]
        return 0.5 * np.abs(d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @cached_property
    def diams(self) -> np.ndarray:
        c = self.corners
        l0 = np.sum((c[:, 1] - c[:, 0]) ** 2, axis=1)
        l1 = np.sum((c[:, 2] - c[:, 1]) ** 2, axis=1)
        l2 = np.sum((c[:, 0] - c[:, 2]) ** 2, axis=1)
        return np.sqrt(np.maximum(np.maximum(l0, l1), l2))

    @cached_property
    def vertex_tris(self) -> tuple[np.ndarray, np.ndarray]:
        """CSR-style incidence: (indptr, tri ids) of triangles per vertex."""
        verts = self.tris.ravel()
        tids = np.repeat(np.arange(self.n_tris, dtype=np.int64), 3)
        order = np.argsort(verts, kind="stable")
        counts = np.bincount(verts, minlength=self.n_vertices)
        indptr = np.concatenate([[0], np.cumsum(counts)])
        return indptr.astype(np.int64), tids[order]

    def element_keys(self):
        """Hashable forest identities (root, level, path), one per element."""
        return list(zip(self.root.tolist(), self.level.tolist(), self.path.tolist()))


def make_mesh(vertices, tris, boundary_edges=None) -> TriMesh:
    """Build an initial mesh; chooses reference edges and orientation.

    The reference edge of each root triangle is its longest edge (exact
    squared-length comparison); ties are broken by the smallest id of the
    opposite vertex.  Triangles are stored counterclockwise.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    tris = np.asarray(tris, dtype=np.int64).copy()
    if tris.ndim != 2 or tris.shape[1] != 3:
        raise ValueError("tris must be (nt, 3)")

    corners = vertices[tris]
    d1 = corners[:, 1] - corners[:, 0]
    d2 = corners[:, 2] - corners[:, 0]
    orient = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    if np.any(orient == 0.0):
        raise ValueError("degenerate triangle in input")
    flip = orient < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]

    # rotate so the longest edge (ties: smallest opposite-vertex id) is (v0, v1)
    corners = vertices[tris]
    sq = np.stack(
        [
            np.sum((corners[:, 1] - corners[:, 0]) ** 2, axis=1),  # edge opposite v2
            np.sum((corners[:, 2] - corners[:, 1]) ** 2, axis=1),  # opposite v0
            np.sum((corners[:, 0] - corners[:, 2]) ** 2, axis=1),  # opposite v1
        ],
        axis=1,
    )
    opp = np.stack([tris[:, 2], tris[:, 0], tris[:, 1]], axis=1)
    best = np.where(sq == sq.max(axis=1, keepdims=True), opp, np.iinfo(np.int64).max)
    pick_opp = best.argmin(axis=1)  # local edge index (v_i, v_{i+1}) to promote
    rot = np.empty_like(tris)
    for k in range(3):
        sel = pick_opp == k
        rot[sel] = tris[sel][:, [k, (k + 1) % 3, (k + 2) % 3]]
    tris = rot

    nt = tris.shape[0]
    mesh = TriMesh(
        vertices=vertices,
        tris=tris,
        level=np.zeros(nt, dtype=np.int64),
        parent=np.full(nt, -1, dtype=np.int64),
        root=np.arange(nt, dtype=np.int64),
        path=np.zeros(nt, dtype=np.int64),
        boundary_edges=np.zeros(0, dtype=np.int64),
    )
    if boundary_edges is None:
        derived = mesh.edge_keys[np.sum(mesh.edge_tris >= 0, axis=1) == 1]
        mesh.boundary_edges = derived
    else:
        be = np.asarray(boundary_edges, dtype=np.int64)
        if be.ndim == 2:
            be = _edge_keys(be[:, 0], be[:, 1])
        mesh.boundary_edges = np.unique(be)
    return mesh


def _split_boundary(boundary_keys, marked_keys, midpoint_ids):
    """Replace split boundary edges by their two halves."""
    pos = np.searchsorted(marked_keys, boundary_keys)
    pos = np.clip(pos, 0, len(marked_keys) - 1) if len(marked_keys) else pos
    hit = len(marked_keys) > 0
    if hit:
        hit = marked_keys[pos] == boundary_keys
    else:
        hit = np.zeros(len(boundary_keys), dtype=bool)
    keep = boundary_keys[~hit]
    a, b = _decode_edge_keys(boundary_keys[hit])
    m = midpoint_ids[pos[hit]]
    halves = np.concatenate([_edge_keys(a, m), _edge_keys(m, b)])
    return np.unique(np.concatenate([keep, halves]))


def refine(mesh: TriMesh, marked) -> TriMesh:
    """Conforming NVB refinement: bisect every marked element at least once.

    Closure marks the reference edge of any element with a marked edge until
    a fixpoint; elements are then split into 2, 3 or 4 children depending on
    how many of their edges are marked.  The output mesh is conforming and
    ``refine_stats`` records how many bisections the closure added.
    """
    marked = np.unique(np.asarray(marked, dtype=np.int64))
    if marked.size and (marked.min() < 0 or marked.max() >= mesh.n_tris):
        raise IndexError("marked element id out of range")
    tris = mesh.tris
    nt, nv = mesh.n_tris, mesh.n_vertices
    ekeys = mesh.edge_keys
    te = mesh.tri_edges
    ne = ekeys.shape[0]

    edge_marked = np.zeros(ne, dtype=bool)
    if marked.size:
        edge_marked[te[marked, 0]] = True
    rounds = 0
    while True:
        has = edge_marked[te].any(axis=1)
        need = has & ~edge_marked[te[:, 0]]
        if not need.any():
            break
        edge_marked[te[need, 0]] = True
        rounds += 1

    split = np.nonzero(edge_marked)[0]
    mid = np.full(ne, -1, dtype=np.int64)
    mid[split] = nv + np.arange(split.size, dtype=np.int64)
    ea, eb = _decode_edge_keys(ekeys[split])
    new_vertices = 0.5 * (mesh.vertices[ea] + mesh.vertices[eb])
    vertices = np.vstack([mesh.vertices, new_vertices])

    m0 = edge_marked[te[:, 0]]
    m1 = edge_marked[te[:, 1]]
    m2 = edge_marked[te[:, 2]]
    if np.any((m1 | m2) & ~m0):
        raise AssertionError("closure fixpoint violated")
    n_children = np.ones(nt, dtype=np.int64)
    n_children[m0] = 2
    n_children[m0 & m1] += 1
    n_children[m0 & m2] += 1
    offs = np.concatenate([[0], np.cumsum(n_children)])
    total = offs[-1]

    out_tris = np.empty((total, 3), dtype=np.int64)
    out_level = np.empty(total, dtype=np.int64)
    out_parent = np.empty(total, dtype=np.int64)
    out_root = np.empty(total, dtype=np.int64)
    out_path = np.empty(total, dtype=np.int64)

    def emit(sel, slot, cols, dlevel, extra_bits):
        """Place one child per selected parent at child index ``slot``."""
        idx = offs[:-1][sel] + slot
        out_tris[idx] = np.stack(cols, axis=1)
        out_level[idx] = mesh.level[sel] + dlevel
        out_parent[idx] = np.nonzero(sel)[0]
        out_root[idx] = mesh.root[sel]
        p = mesh.path[sel].copy()
        L = mesh.level[sel]
        for depth_off, bit in extra_bits:
            p = p | (np.int64(bit) << (L + depth_off))
        out_path[idx] = p

    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    M01 = mid[te[:, 0]]
    M12 = mid[te[:, 1]]
    M20 = mid[te[:, 2]]

    sel = ~m0
    emit(sel, 0, (a[sel], b[sel], c[sel]), 0, [])

    sel = m0 & ~m1 & ~m2
    emit(sel, 0, (c[sel], a[sel], M01[sel]), 1, [])
    emit(sel, 1, (b[sel], c[sel], M01[sel]), 1, [(0, 1)])

    sel = m0 & m1 & ~m2
    emit(sel, 0, (c[sel], a[sel], M01[sel]), 1, [])
    emit(sel, 1, (M01[sel], b[sel], M12[sel]), 2, [(0, 1)])
    emit(sel, 2, (c[sel], M01[sel], M12[sel]), 2, [(0, 1), (1, 1)])

    sel = m0 & ~m1 & m2
    emit(sel, 0, (M01[sel], c[sel], M20[sel]), 2, [])
    emit(sel, 1, (a[sel], M01[sel], M20[sel]), 2, [(1, 1)])
    emit(sel, 2, (b[sel], c[sel], M01[sel]), 1, [(0, 1)])

    sel = m0 & m1 & m2
    emit(sel, 0, (M01[sel], c[sel], M20[sel]), 2, [])
    emit(sel, 1, (a[sel], M01[sel], M20[sel]), 2, [(1, 1)])
    emit(sel, 2, (M01[sel], b[sel], M12[sel]), 2, [(0, 1)])
    emit(sel, 3, (c[sel], M01[sel], M12[sel]), 2, [(0, 1), (1, 1)])

    boundary = _split_boundary(mesh.boundary_edges, ekeys[split], mid[split])
    n_bis = total - nt
    return TriMesh(
        vertices=vertices,
        tris=out_tris,
        level=out_level,
        parent=out_parent,
        root=out_root,
        path=out_path,
        boundary_edges=boundary,
        refine_stats={
            "marked": int(marked.size),
            "bisections": int(n_bis),
            "closure_bisections": int(n_bis - marked.size),
            "closure_rounds": rounds,
        },
    )


def bisec5(mesh: TriMesh) -> TriMesh:
    """Refine every element with five bisections into six children.

    Pattern: bisect the reference edge, bisect both children, then bisect the
    two grandchildren sharing the interior edge that emanates from the first
    midpoint.  Each element gains exactly one interior vertex; the element's
    own edges gain exactly their midpoints, so the global result conforms.
    """
    tris = mesh.tris
    nt, nv = mesh.n_tris, mesh.n_vertices
    ekeys = mesh.edge_keys
    te = mesh.tri_edges
    ne = ekeys.shape[0]

    mid = nv + np.arange(ne, dtype=np.int64)
    ea, eb = _decode_edge_keys(ekeys)
    edge_mids = 0.5 * (mesh.vertices[ea] + mesh.vertices[eb])
    z = nv + ne + np.arange(nt, dtype=np.int64)
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    M01 = mid[te[:, 0]]
    M12 = mid[te[:, 1]]
    M20 = mid[te[:, 2]]
    interior = 0.5 * (edge_mids[te[:, 0]] + mesh.vertices[c])
    vertices = np.vstack([mesh.vertices, edge_mids, interior])

    children = [
        ((a, M01, M20), 2, [(1, 1)]),          # (a, m01, m20)
        ((M01, b, M12), 2, [(0, 1)]),          # (m01, b, m12)
        ((M20, M01, z), 3, []),                # around the interior node
        ((c, M20, z), 3, [(2, 1)]),
        ((M12, c, z), 3, [(0, 1), (1, 1)]),
        ((M01, M12, z), 3, [(0, 1), (1, 1), (2, 1)]),
    ]
    out_tris = np.empty((6 * nt, 3), dtype=np.int64)
    out_level = np.empty(6 * nt, dtype=np.int64)
    out_path = np.empty(6 * nt, dtype=np.int64)
    L, P = mesh.level, mesh.path
    for slot, (cols, dlevel, bits) in enumerate(children):
        idx = slice(slot, None, 6)
        out_tris[idx] = np.stack(cols, axis=1)
        out_level[idx] = L + dlevel
        p = P.copy()
        for depth_off, bit in bits:
            p = p | (np.int64(bit) << (L + depth_off))
        out_path[idx] = p
    out_parent = np.repeat(np.arange(nt, dtype=np.int64), 6)
    out_root = np.repeat(mesh.root, 6)

    boundary = _split_boundary(mesh.boundary_edges, ekeys, mid)
    return TriMesh(
        vertices=vertices,
        tris=out_tris,
        level=out_level,
        parent=out_parent,
        root=out_root,
        path=out_path,
        boundary_edges=boundary,
        refine_stats={"marked": nt, "bisections": 5 * nt, "closure_bisections": 0,
                      "closure_rounds": 0},
    )


_HIERARCHY_ELEMENT_LIMIT = 6_000_000


def uniform_hierarchy(mesh0: TriMesh, k: int, L: int) -> list[TriMesh]:
    """Uniform hierarchy ``[mesh0, bisec5^k(mesh0), bisec5^2k(mesh0), ...]``
    with ``L + 1`` entries."""
    if L < 0 or k < 1:
        raise ValueError("need L >= 0 and k >= 1")
    if mesh0.n_tris * 6 ** (k * L) > _HIERARCHY_ELEMENT_LIMIT:
        raise AfemError(
            f"hierarchy would exceed {_HIERARCHY_ELEMENT_LIMIT} elements "
            f"({mesh0.n_tris} * 6^{k * L}); lower L or k"
        )
    out = [mesh0]
    for _ in range(L):
        m = out[-1]
        for _ in range(k):
            m = bisec5(m)
        out.append(m)
    return out


def mesh_scaling_constants(hierarchy: list[TriMesh]) -> tuple[float, float]:
    """Measure (C_mesh, C_base) with
    ``C_base**-1 * C_mesh**-l <= diam(T) <= C_base * C_mesh**-l`` on level l.

    C_mesh is the geometric-mean shrink factor of the largest diameter per
    hierarchy level; C_base is then the smallest constant closing both
    inequalities over every element.
    """
    if len(hierarchy) < 2:
        raise ValueError("need at least two hierarchy levels")
    dmax = [float(m.diams.max()) for m in hierarchy]
    Lmax = len(hierarchy) - 1
    c_mesh = (dmax[0] / dmax[-1]) ** (1.0 / Lmax)
    c_base = 1.0
    for ell, m in enumerate(hierarchy):
        scale = c_mesh ** ell
        c_base = max(c_base, float((m.diams * scale).max()))
        c_base = max(c_base, float((1.0 / (m.diams * scale)).max()))
    return c_mesh, c_base


def closure_bound_stats(run) -> float:
    """Cumulative closure ratio ``(#T_L - #T_0) / sum_j #M_j`` of a marked
    refinement sequence ``[(mesh_0, marked_0), ..., (mesh_L, None)]``; the
    final entry may omit its mark set."""
    pairs = list(run)
    if len(pairs) < 2:
        raise ValueError("need at least one refinement step")
    total_marked = 0
    for mesh, marked in pairs[:-1]:
        if marked is None:
            raise ValueError("every step except the last needs its mark set")
        total_marked += len(np.unique(np.asarray(marked)))
    if total_marked == 0:
        raise ValueError("no elements were marked")
    first = pairs[0][0]
    last = pairs[-1][0]
    return (last.n_tris - first.n_tris) / total_marked


def scale_levels(mesh: TriMesh):
    """Per-element levels on the uniform six-child refinement scale.

    One round of uniform refinement splits every triangle into six by three
    sweeps of bisection; the in-cell bisection paths of the six children
    (two of depth two, four of depth three) form a prefix-free code, so the
    scale position of any element follows from its (level, path) key alone.
    Returns ``(inner, outer)``: ``inner[t]`` is the largest u such that
    element t is contained in a single cell of the u-fold uniform
    refinement of its root, ``outer[t]`` the smallest u such that t is a
    union of such cells.  The two agree exactly on the cells themselves and
    otherwise differ by one.
    """
    lv = mesh.level.astype(np.int64)
    p = mesh.path.astype(np.int64)
    d = np.zeros(lv.size, dtype=np.int64)
    s = np.zeros(lv.size, dtype=np.int64)
    active = np.ones(lv.size, dtype=bool)
    while active.any():
        b0 = (p >> d) & 1
        b1 = (p >> np.minimum(d + 1, 62)) & 1
        need = np.where(b0 != b1, 2, 3)
        step = active & (lv - d >= need)
        d[step] += need[step]
        s[step] += 1
        active = step
    return s, s + (lv > d).astype(np.int64)


def scale_cells(mesh: TriMesh, m: int):
    """Containing cell of each element in the m-fold uniform refinement.

    Walks ``m`` complete rounds of the six-child path code and truncates.
    Returns ``(ok, root, level, path)`` arrays; ``ok[t]`` is False when
    element t is not contained in a single round-m cell (it is then coarser
    than the round-m mesh somewhere), and the remaining entries form the
    forest key of the containing cell where ``ok`` holds.
    """
    lv = mesh.level.astype(np.int64)
    p = mesh.path.astype(np.int64)
    d = np.zeros(lv.size, dtype=np.int64)
    s = np.zeros(lv.size, dtype=np.int64)
    for _ in range(int(m)):
        b0 = (p >> d) & 1
        b1 = (p >> np.minimum(d + 1, 62)) & 1
        need = np.where(b0 != b1, 2, 3)
        step = (s < m) & (lv - d >= need)
        d[step] += need[step]
        s[step] += 1
    ok = s == m
    trunc = p & ((np.int64(1) << d) - 1)
    return ok, mesh.root.astype(np.int64), d, trunc


def _ring_max(mesh: TriMesh, val: np.ndarray, k: int) -> np.ndarray:
    """Max of per-element values over the k-fold vertex-touch patch."""
    val = val.astype(np.int64).copy()
    tris = mesh.tris
    for _ in range(k):
        vmax = np.full(mesh.n_vertices, np.iinfo(np.int64).min, dtype=np.int64)
        np.maximum.at(vmax, tris.ravel(), np.repeat(val, 3))
        val = vmax[tris].max(axis=1)
    return val


def check_grading(mesh: TriMesh, d_grad: int, max_pairs: int = 32):
    """Verify the patch-grading condition: refinement-scale levels (the
    ``outer`` value of :func:`scale_levels`, constant on uniformly refined
    meshes) differ by at most one within every ``d_grad``-fold patch.
    Returns (ok, violating pairs)."""
    _, slev = scale_levels(mesh)
    ring = _ring_max(mesh, slev, d_grad)
    bad = np.nonzero(ring - slev >= 2)[0]
    if bad.size == 0:
        return True, []
    pairs = []
    for t in bad[:max_pairs]:
        members = patch(mesh, np.array([t]), d_grad)
        worst = members[np.argmax(slev[members])]
        pairs.append((int(t), int(worst)))
    return False, pairs


def enforce_grading(mesh: TriMesh, d_grad: int, max_rounds: int = 10000) -> TriMesh:
    """Refine until the patch-grading condition holds.

    Each round marks every element whose refinement-scale level is at least
    two below that of some element of its ``d_grad``-fold patch.  The
    returned mesh's ``parent`` refers to the *input* mesh (compositions are
    resolved here); no claim of minimality is made.
    """
    current = mesh
    chain_parent = None
    rounds = 0
    added = 0
    while True:
        _, slev = scale_levels(current)
        ring = _ring_max(current, slev, d_grad)
        marked = np.nonzero(ring - slev >= 2)[0]
        if marked.size == 0:
            break
        rounds += 1
        if rounds > max_rounds:
            raise RuntimeError("grading enforcement did not terminate")
        nxt = refine(current, marked)
        added += nxt.refine_stats["bisections"]
        chain_parent = (nxt.parent if chain_parent is None
                        else chain_parent[nxt.parent])
        current = nxt
    if chain_parent is not None:
        current.parent = chain_parent
    else:
        current = TriMesh(
            vertices=mesh.vertices, tris=mesh.tris, level=mesh.level,
            parent=np.arange(mesh.n_tris, dtype=np.int64), root=mesh.root,
            path=mesh.path, boundary_edges=mesh.boundary_edges,
        )
    current.refine_stats = {"grading_rounds": rounds, "grading_bisections": added}
    return current


def patch(mesh: TriMesh, region, k: int = 1) -> np.ndarray:
    """Iterated element patch of a region.

    ``region`` is either an array of element ids or an (m, 2) array of
    points.  One iteration adds every element that intersects (shares at
    least a vertex with) an element of the current set; ``k`` iterations are
    applied.  Returns sorted element ids.
    """
    region = np.asarray(region)
    if region.ndim == 2:
        region = locate_points(mesh, region)
    in_set = np.zeros(mesh.n_tris, dtype=bool)
    in_set[region.astype(np.int64)] = True
    for _ in range(k):
        vtouch = np.zeros(mesh.n_vertices, dtype=bool)
        vtouch[mesh.tris[in_set].ravel()] = True
        in_set = in_set | vtouch[mesh.tris].any(axis=1)
    return np.nonzero(in_set)[0]


def locate_points(mesh: TriMesh, points) -> np.ndarray:
    """Ids of elements containing the given points (boundary-inclusive).

    Brute-force sign tests; with dyadic coordinates the predicates are exact
    until products leave the 53-bit range, which does not happen at the mesh
    depths this laboratory runs at.  Points on shared edges resolve to the
    lowest adjacent element id; a point outside the mesh raises.
    """
    points = np.asarray(points, dtype=np.float64)
    c = mesh.corners
    out = np.empty(points.shape[0], dtype=np.int64)

    def cross(u, v):
        return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]

    for i, p in enumerate(points):
        d0 = cross(c[:, 1] - c[:, 0], p - c[:, 0])
        d1 = cross(c[:, 2] - c[:, 1], p - c[:, 1])
        d2 = cross(c[:, 0] - c[:, 2], p - c[:, 2])
        inside = (d0 >= 0) & (d1 >= 0) & (d2 >= 0)
        hits = np.nonzero(inside)[0]
        if hits.size == 0:
            raise ValueError(f"point {p} not inside the mesh")
        out[i] = hits[0]
    return out


def ancestor_in(mesh: TriMesh, coarse_keys: dict, tri_id: int):
    """Walk up the forest from one element until a key of ``coarse_keys`` is
    hit; returns its value (or None).  ``coarse_keys`` maps (root, level,
    path) triples to arbitrary payloads."""
    r = int(mesh.root[tri_id])
    lv = int(mesh.level[tri_id])
    p = int(mesh.path[tri_id])
    while lv >= 0:
        hit = coarse_keys.get((r, lv, p))
        if hit is not None:
            return hit
        if lv == 0:
            return None
        lv -= 1
        p &= (1 << lv) - 1
    return None


def validate(mesh: TriMesh) -> None:
    """Raise AssertionError on structural defects (conformity, orientation,
    boundary bookkeeping, forest-path consistency)."""
    c = mesh.corners
    d1 = c[:, 1] - c[:, 0]
    d2 = c[:, 2] - c[:, 0]
    orient = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    assert np.all(orient > 0), "negative or zero orientation"

    counts = np.bincount(mesh.tri_edges.ravel(), minlength=mesh.edge_keys.size)
    assert counts.max() <= 2, "edge shared by more than two triangles"
    derived_boundary = mesh.edge_keys[counts == 1]
    assert np.array_equal(derived_boundary, mesh.boundary_edges), \
        "boundary_edges out of sync with incidence"

    used = np.unique(mesh.tris)
    assert used.size == mesh.n_vertices and used[0] == 0, "unused or missing vertex"

    keys = set()
    for r, lv, p in zip(mesh.root, mesh.level, mesh.path):
        assert p < (1 << max(int(lv), 1)), "path bits exceed level"
        key = (int(r), int(lv), int(p))
        assert key not in keys, "duplicate forest key"
        keys.add(key)

    # conformity: vertices may not lie in the open interior of another
    # element's edge -- guaranteed when every shared edge key matches, which
    # the edge-count check above establishes for meshes built through refine.


def write_tri(mesh: TriMesh, path) -> None:
    """Write the mesh in the ``tri v2`` text format."""
    lines = ["tri v2", f"V {mesh.n_vertices}"]
    for x, y in mesh.vertices:
        lines.append(f"{float(x)!r} {float(y)!r}")
    lines.append(f"T {mesh.n_tris}")
    for row, lv, par in zip(mesh.tris, mesh.level, mesh.parent):
        lines.append(f"{row[0]} {row[1]} {row[2]} 0 {lv} {par}")
    a, b = _decode_edge_keys(mesh.boundary_edges)
    lines.append(f"B {len(a)}")
    for x, y in zip(a, b):
        lines.append(f"{x} {y}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_tri(path) -> TriMesh:
    """Read a ``tri v2`` file.

    Reference-edge indices other than 0 are honoured by rotating the vertex
    row.  Forest identities cannot be stored in the format; initial meshes
    (all levels zero) get fresh root identities, anything else is loaded with
    ``root = -1`` until :func:`rebuild_keys` reattaches it to a predecessor.
    """
    with open(path) as fh:
        text = fh.read()
    tokens = text.split("\n")
    if not tokens or tokens[0].strip() != "tri v2":
        raise ValueError("not a 'tri v2' file")
    i = 1

    def expect(tag):
        nonlocal i
        m = re.fullmatch(rf"{tag} (\d+)", tokens[i].strip())
        if not m:
            raise ValueError(f"expected '{tag} <count>' at line {i + 1}")
        i += 1
        return int(m.group(1))

    nv = expect("V")
    vertices = np.array(
        [[float(w) for w in tokens[i + j].split()] for j in range(nv)]
    ).reshape(nv, 2)
    i += nv
    nt = expect("T")
    rows = np.array(
        [[int(w) for w in tokens[i + j].split()] for j in range(nt)], dtype=np.int64
    ).reshape(nt, 6)
    i += nt
    nb = expect("B")
    bnd = np.array(
        [[int(w) for w in tokens[i + j].split()] for j in range(nb)], dtype=np.int64
    ).reshape(nb, 2)

    tris = rows[:, :3]
    ref = rows[:, 3]
    for k in (1, 2):
        sel = ref == k
        tris[sel] = tris[sel][:, [k, (k + 1) % 3, (k + 2) % 3]]
    level = rows[:, 4]
    parent = rows[:, 5]
    initial = bool(np.all(level == 0))
    mesh = TriMesh(
        vertices=vertices,
        tris=tris,
        level=level,
        parent=parent,
        root=np.arange(nt, dtype=np.int64) if initial else np.full(nt, -1, np.int64),
        path=np.zeros(nt, dtype=np.int64),
        boundary_edges=_edge_keys(bnd[:, 0], bnd[:, 1]) if nb else np.zeros(0, np.int64),
    )
    mesh.boundary_edges = np.unique(mesh.boundary_edges)
    return mesh


def rebuild_keys(prev: TriMesh, mesh: TriMesh) -> None:
    """Recompute forest identities of ``mesh`` from a keyed predecessor.

    ``mesh.parent`` must point into ``prev``.  Each element is matched inside
    the simulated bisection subtree of its parent; vertex ids are shared
    between the two meshes (refinement appends), so matching is exact.
    """
    if np.any(prev.root < 0):
        raise ValueError("predecessor mesh has no forest keys")
    coord_id = {(float(x), float(y)): i for i, (x, y) in enumerate(mesh.vertices)}

    def midpoint_id(a, b):
        # a missing midpoint means that branch was never subdivided, so the
        # sought element cannot lie below it
        pa, pb = mesh.vertices[a], mesh.vertices[b]
        return coord_id.get(((pa[0] + pb[0]) / 2.0, (pa[1] + pb[1]) / 2.0))

    for t in range(mesh.n_tris):
        par = int(mesh.parent[t])
        target = frozenset(mesh.tris[t].tolist())
        stack = [(tuple(prev.tris[par].tolist()), int(prev.level[par]),
                  int(prev.path[par]))]
        found = None
        while stack:
            (a, b, c), lv, p = stack.pop()
            if frozenset((a, b, c)) == target:
                found = (lv, p)
                break
            if lv >= int(mesh.level[t]):
                continue
            m = midpoint_id(a, b)
            if m is None:
                continue
            stack.append(((c, a, m), lv + 1, p))
            stack.append(((b, c, m), lv + 1, p | (1 << lv)))
        if found is None:
            raise ValueError(f"element {t} is not a descendant of its parent")
        mesh.root[t] = prev.root[par]
        mesh.level[t], mesh.path[t] = np.int64(found[0]), np.int64(found[1])
