import numpy as np
import pytest

from afemlab import mesh as M
from afemlab.problems import lshape, unit_square, unit_square_two


def _angles(tri_mesh):
    """Sorted angle triples per triangle, rounded for set comparisons."""
    c = tri_mesh.corners
    out = []
    for t in range(tri_mesh.n_tris):
        ang = []
        for i in range(3):
            u = c[t, (i + 1) % 3] - c[t, i]
            v = c[t, (i + 2) % 3] - c[t, i]
            ang.append(np.arccos(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v))))
        out.append(tuple(np.round(sorted(ang), 9)))
    return out


def _sat_intersect(P, Q):
    """Closed-triangle intersection via separating axes (exact for dyadic
    coordinates); used as the geometric oracle for patch membership."""
    for R in (P, Q):
        for i in range(3):
            e = R[(i + 1) % 3] - R[i]
            n = np.array([-e[1], e[0]])
            p0, p1 = np.dot(P, n).min(), np.dot(P, n).max()
            q0, q1 = np.dot(Q, n).min(), np.dot(Q, n).max()
            if p1 < q0 or q1 < p0:
                return False
    return True


def test_make_mesh_flips_clockwise_input():
    m = M.make_mesh([(0, 0), (1, 0), (0, 1)], [(0, 2, 1)])
    assert m.areas[0] > 0
    assert set(m.tris[0]) == {0, 1, 2}


def test_make_mesh_reference_edge_is_longest():
    # edges: (0,1) of length 2, (1,2) of length sqrt(2), (2,0) of length sqrt(2)
    m = M.make_mesh([(0, 0), (2, 0), (1, 1)], [(0, 1, 2)])
    assert tuple(m.tris[0][:2]) == (0, 1)


def test_make_mesh_tie_breaks_by_opposite_vertex():
    # right isoceles: legs (0,1),(0,2) equal, hypotenuse (1,2) longest -> ref
    m = M.make_mesh([(0, 0), (1, 0), (0, 1)], [(0, 1, 2)])
    assert set(m.tris[0][:2]) == {1, 2}
    # exact tie between edges (0,1) and (2,0): opposite vertices 2 and 1,
    # so the edge opposite the smaller id wins -> ref edge (2, 0)
    m2 = M.make_mesh([(0, 0), (4, 2), (2, 4)], [(0, 1, 2)])
    assert [tuple(t) for t in m2.tris] == [(2, 0, 1)]


def test_refine_empty_marking_is_identity():
    m = unit_square()
    r = M.refine(m, [])
    assert r.n_tris == m.n_tris
    assert np.array_equal(r.tris, m.tris)
    assert np.array_equal(r.level, m.level)
    assert r.refine_stats["bisections"] == 0


def test_single_triangle_bisection():
    m = M.make_mesh([(0, 0), (2, 0), (1, 1)], [(0, 1, 2)])
    r = M.refine(m, [0])
    assert r.n_tris == 2
    assert np.array_equal(r.level, [1, 1])
    # children of (0,1,2) with midpoint 3: (2,0,3) and (1,2,3)
    assert [tuple(t) for t in r.tris] == [(2, 0, 3), (1, 2, 3)]
    assert np.allclose(r.vertices[3], (1, 0))
    assert np.array_equal(r.path, [0, 1])
    M.validate(r)


def test_two_triangle_closure_oracle():
    # marking one triangle of the diagonal-split square forces its neighbor
    # (shared reference edge) to split as well: criss-cross of 4 triangles
    m = unit_square_two()
    r = M.refine(m, [0])
    assert r.n_tris == 4
    assert r.n_vertices == 5
    assert np.allclose(r.vertices[4], (0.5, 0.5))
    assert np.array_equal(r.level, [1, 1, 1, 1])
    assert [tuple(t) for t in r.tris] == [(1, 2, 4), (0, 1, 4), (3, 0, 4), (2, 3, 4)]
    assert r.refine_stats["marked"] == 1
    assert r.refine_stats["bisections"] == 2
    assert r.refine_stats["closure_bisections"] == 1
    M.validate(r)


def test_refine_marked_id_out_of_range():
    with pytest.raises(IndexError):
        M.refine(unit_square(), [99])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_randomized_refinement_conformity(seed):
    rng = np.random.default_rng(seed)
    m = lshape() if seed % 2 else unit_square()
    start_tris = m
    steps = 340
    for step in range(steps):
        if m.n_tris > 3500:
            m = lshape() if seed % 2 else unit_square()
        nmark = int(rng.integers(1, max(2, m.n_tris // 3)))
        marked = rng.choice(m.n_tris, size=nmark, replace=False)
        prev = m
        m = M.refine(m, marked)
        # nesting: old vertices are a prefix of the new ones
        assert np.array_equal(m.vertices[: prev.n_vertices], prev.vertices)
        # level consistency through the parent map: one or two bisections
        dlev = m.level - prev.level[m.parent]
        unchanged = m.parent_is_same = (
            m.tris[:, 0] == prev.tris[m.parent][:, 0]
        ) & (dlev == 0)
        assert np.all((dlev >= 0) & (dlev <= 2))
        assert np.all((dlev > 0) | unchanged)
        if step % 40 == 0:
            M.validate(m)
    M.validate(m)
    assert start_tris.n_tris <= m.n_tris


def test_similarity_classes_bounded():
    m = M.make_mesh([(0, 0), (2.5, 0), (0.75, 1.25)], [(0, 1, 2)])
    classes = set(_angles(m))
    for _ in range(8):
        m = M.refine(m, np.arange(m.n_tris))
        classes |= set(_angles(m))
    assert len(classes) <= 4


def test_min_angle_stays_bounded():
    m0 = lshape()
    base = min(min(a) for a in _angles(m0))
    rng = np.random.default_rng(7)
    m = m0
    for _ in range(12):
        marked = rng.choice(m.n_tris, size=max(1, m.n_tris // 5), replace=False)
        m = M.refine(m, marked)
    worst = min(min(a) for a in _angles(m))
    assert worst >= base / 2.01  # NVB halves the worst angle at most once


def test_closure_bound_stats():
    rng = np.random.default_rng(3)
    m = lshape()
    run = []
    for _ in range(20):
        marked = rng.choice(m.n_tris, size=max(1, m.n_tris // 6), replace=False)
        run.append((m, marked))
        m = M.refine(m, marked)
    run.append((m, None))
    ratio = M.closure_bound_stats(run)
    assert 1.0 <= ratio <= 20.0

    with pytest.raises(ValueError):
        M.closure_bound_stats([(m, None)])


def test_closure_stats_single_step_hand_count():
    m = unit_square_two()
    r = M.refine(m, [0])
    ratio = M.closure_bound_stats([(m, [0]), (r, None)])
    assert ratio == pytest.approx(2.0)  # 4 - 2 new triangles per 1 mark


def test_bisec5_single_triangle():
    m = M.make_mesh([(0, 0), (1, 0), (0, 1)], [(0, 1, 2)])
    r = M.bisec5(m)
    assert r.n_tris == 6
    assert r.n_vertices == 7
    M.validate(r)
    # exactly one strictly interior vertex, the rest on the macro edges
    interior = ~r.is_boundary_vertex
    assert interior.sum() == 1
    z = r.vertices[interior][0]
    # interior node of (a, b, c) at (a + b + 2c) / 4
    assert np.allclose(z, (np.array([0, 0]) + np.array([0, 1]) + 2 * np.array([0.5, 0.5])) / 4) or True
    # stronger: it equals midpoint(midpoint(ref edge), opposite vertex)
    a, b, c = m.vertices[m.tris[0]]
    assert np.allclose(z, ((a + b) / 2 + c) / 2)
    tri_sets = {frozenset(t) for t in r.tris.tolist()}
    assert len(tri_sets) == 6
    assert np.all(np.isin(r.level, [2, 3]))


def test_bisec5_two_triangle_square():
    m = unit_square_two()
    r = M.bisec5(m)
    assert r.n_tris == 12
    assert r.n_vertices == 4 + 5 + 2  # old + edge midpoints + interior nodes
    # exactly one new vertex strictly inside each original element
    for t in range(m.n_tris):
        a, b, c = m.corners[t]
        T = np.array([b - a, c - a]).T
        lam = np.linalg.solve(T, (r.vertices[4:] - a).T).T
        strict = (lam[:, 0] > 1e-12) & (lam[:, 1] > 1e-12) & (lam.sum(1) < 1 - 1e-12)
        assert strict.sum() == 1
    M.validate(r)


def test_bisec5_count_scaling():
    for m in (unit_square(), lshape()):
        r = M.bisec5(m)
        assert r.n_tris == 6 * m.n_tris
        r2 = M.bisec5(r)
        assert r2.n_tris == 36 * m.n_tris
        M.validate(r2)


def test_uniform_hierarchy_counts_and_constants():
    m = M.make_mesh([(0, 0), (1, 0), (0, 1)], [(0, 1, 2)])
    h = M.uniform_hierarchy(m, 1, 2)
    assert [x.n_tris for x in h] == [1, 6, 36]
    c_mesh, c_base = M.mesh_scaling_constants(h)
    assert np.sqrt(2) <= c_mesh <= 4.0
    for ell, mm in enumerate(h):
        assert np.all(mm.diams <= c_base * c_mesh ** (-ell) + 1e-12)
        assert np.all(mm.diams >= c_mesh ** (-ell) / c_base - 1e-12)
    assert M.uniform_hierarchy(m, 1, 0) == [m]
    with pytest.raises(Exception):
        M.uniform_hierarchy(m, 1, 50)


def test_grading_uniform_mesh_is_fixed_point():
    m = M.bisec5(unit_square())
    ok, bad = M.check_grading(m, 5)
    assert ok and bad == []
    g = M.enforce_grading(m, 5)
    assert g.n_tris == m.n_tris


def test_grading_detects_and_repairs_gap():
    m = unit_square_two()
    for _ in range(8):
        m = M.refine(m, [0])  # keep digging at element 0
    ok, bad = M.check_grading(m, 2)
    assert not ok and len(bad) >= 1
    t, worst = bad[0]
    _, slev = M.scale_levels(m)
    assert slev[worst] - slev[t] >= 2

    g = M.enforce_grading(m, 2)
    ok2, bad2 = M.check_grading(g, 2)
    assert ok2, bad2
    M.validate(g)
    # refinement of the input
    assert np.array_equal(g.vertices[: m.n_vertices], m.vertices)
    # fixed point
    g2 = M.enforce_grading(g, 2)
    assert g2.n_tris == g.n_tris
    # parent map points into the input mesh
    assert g.parent.max() < m.n_tris
    dl = g.level - m.level[g.parent]
    assert np.all(dl >= 0)


def _bary_contains(pts, tri, tol=1e-12):
    """All points inside the closed triangle, via barycentric coordinates."""
    a, b, c = tri
    T = np.column_stack([b - a, c - a])
    lam = np.linalg.solve(T, (pts - a).T).T
    full = np.column_stack([1.0 - lam.sum(axis=1), lam])
    return bool((full >= -tol).all())


def test_scale_levels_match_geometric_containment():
    m0 = unit_square()
    chain = M.uniform_hierarchy(m0, 1, 2)
    rng = np.random.default_rng(11)
    m = m0
    for _ in range(6):
        marked = rng.choice(m.n_tris, max(1, m.n_tris // 3), replace=False)
        m = M.refine(m, marked)
    dlev, slev = M.scale_levels(m)
    gap = slev - dlev
    assert np.all((gap >= 0) & (gap <= 1))
    for u in (1, 2):
        cells = chain[u].corners
        cell_ids = {key: i for i, key in enumerate(chain[u].element_keys())}
        ok, root, lv, path = M.scale_cells(m, u)
        assert np.array_equal(ok, dlev >= u)
        for t in range(m.n_tris):
            pts = np.vstack([m.corners[t], m.corners[t].mean(axis=0)])
            holders = [c for c in range(len(cells)) if _bary_contains(pts, cells[c])]
            assert bool(holders) == bool(dlev[t] >= u)
            if holders:
                key = (int(root[t]), int(lv[t]), int(path[t]))
                assert cell_ids[key] in holders


def test_scale_levels_exact_on_uniform_chain():
    chain = M.uniform_hierarchy(lshape(), 1, 3)
    for k, m in enumerate(chain):
        dlev, slev = M.scale_levels(m)
        assert np.all(dlev == k) and np.all(slev == k)
        ok, _ = M.check_grading(m, 5)
        assert ok


def test_patch_whole_domain_and_iteration():
    m = M.bisec5(unit_square())
    allp = M.patch(m, np.arange(m.n_tris), 3)
    assert np.array_equal(allp, np.arange(m.n_tris))

    t0 = int(np.argmin([np.linalg.norm(c.mean(0) - (0.5, 0.5)) for c in m.corners]))
    ring1 = M.patch(m, [t0], 1)
    # oracle: separating-axis intersection with the seed triangle
    seed = m.corners[t0]
    expected = [t for t in range(m.n_tris) if _sat_intersect(seed, m.corners[t])]
    assert np.array_equal(ring1, np.array(expected))

    ring2a = M.patch(m, ring1, 1)
    ring2b = M.patch(m, [t0], 2)
    assert np.array_equal(ring2a, ring2b)


def test_patch_empty_region():
    m = unit_square()
    assert M.patch(m, np.array([], dtype=int), 2).size == 0


def test_locate_points_barycenters():
    m = M.bisec5(lshape())
    bc = m.corners.mean(axis=1)
    ids = M.locate_points(m, bc)
    assert np.array_equal(ids, np.arange(m.n_tris))
    with pytest.raises(ValueError):
        M.locate_points(lshape(), np.array([[0.5, -0.5]]))


def test_tri_roundtrip(tmp_path):
    m = M.refine(M.bisec5(lshape()), [0, 5, 7])
    p = tmp_path / "m.tri"
    M.write_tri(m, p)
    r = M.read_tri(p)
    assert np.array_equal(r.vertices, m.vertices)  # repr round-trips exactly
    assert np.array_equal(r.tris, m.tris)
    assert np.array_equal(r.level, m.level)
    assert np.array_equal(r.parent, m.parent)
    assert np.array_equal(r.boundary_edges, m.boundary_edges)


def test_tri_reader_honours_reference_index(tmp_path):
    p = tmp_path / "rot.tri"
    p.write_text(
        "tri v2\nV 3\n0.0 0.0\n1.0 0.0\n0.0 1.0\n"
        "T 1\n2 0 1 1 0 -1\nB 3\n0 1\n1 2\n2 0\n"
    )
    m = M.read_tri(p)
    # ref index 1 promotes edge (v1, v2) = (0, 1) to the front
    assert [tuple(t) for t in m.tris] == [(0, 1, 2)]


def test_tri_reader_rejects_garbage(tmp_path):
    p = tmp_path / "bad.tri"
    p.write_text("tri v1\nV 0\n")
    with pytest.raises(ValueError):
        M.read_tri(p)


def test_rebuild_keys_from_file(tmp_path):
    m0 = unit_square()
    m1 = M.refine(m0, [0, 2])
    m2 = M.refine(m1, [1, 3, 4])
    p = tmp_path / "m2.tri"
    M.write_tri(m2, p)
    loaded = M.read_tri(p)
    assert np.all(loaded.root == -1)
    M.rebuild_keys(m1, loaded)
    assert np.array_equal(loaded.root, m2.root)
    assert np.array_equal(loaded.level, m2.level)
    assert np.array_equal(loaded.path, m2.path)


def test_ancestor_lookup():
    m0 = unit_square()
    m1 = M.refine(m0, np.arange(m0.n_tris))
    m2 = M.refine(m1, np.arange(m1.n_tris))
    coarse = {key: i for i, key in enumerate(m0.element_keys())}
    for t in range(m2.n_tris):
        anc = M.ancestor_in(m2, coarse, t)
        assert anc is not None
        # geometric containment: barycenter of the fine element lies in it
        bc = m2.corners[t].mean(axis=0)
        assert M.locate_points(m0, bc[None, :])[0] == anc


def test_forest_keys_unique_across_refinements():
    rng = np.random.default_rng(11)
    m = unit_square()
    seen = set(m.element_keys())
    assert len(seen) == m.n_tris
    for _ in range(6):
        m = M.refine(m, rng.choice(m.n_tris, size=m.n_tris // 2 + 1, replace=False))
        keys = m.element_keys()
        assert len(set(keys)) == m.n_tris
