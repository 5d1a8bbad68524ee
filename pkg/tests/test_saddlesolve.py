"""Solver tests: manufactured-solution convergence, residual/determinism
contracts, Galerkin orthogonality across nested meshes, and the spectral
utilities (inf-sup constants vs. a dense oracle, operator norms vs. SVD)."""

import numpy as np
import pytest
import scipy.linalg as sla

import afemlab.femspace as fs
import afemlab.mesh as M
import afemlab.saddlesolve as ss
from afemlab.errors import ConfigError, SolverError
from afemlab.problems import (colliding_flow, constant_field, unit_square,
                              unit_square_two, zero_field)


def _solve_problem(prob, mesh, tol=1e-8):
    space = fs.THSpace(mesh)
    system = fs.assemble(space, prob.body_force)
    g = fs.p2_nodal_from_function(space, prob.dirichlet)
    return space, system, ss.solve(system, tol=tol, boundary_values=g)


def test_zero_force_zero_solution():
    mesh = unit_square()
    system = fs.assemble(fs.THSpace(mesh), zero_field)
    rep = ss.solve(system, tol=1e-8)
    assert rep.residual == 0.0
    assert np.all(rep.solution.vel == 0.0)
    assert np.all(rep.solution.pre == 0.0)


def test_residual_contract_and_determinism():
    prob = colliding_flow()
    mesh = M.refine(prob.mesh, np.arange(prob.mesh.n_tris))
    _, _, rep1 = _solve_problem(prob, mesh, tol=1e-8)
    _, _, rep2 = _solve_problem(prob, mesh, tol=1e-8)
    assert rep1.residual <= 1e-8
    assert rep1.solution.vel.tobytes() == rep2.solution.vel.tobytes()
    assert rep1.solution.pre.tobytes() == rep2.solution.pre.tobytes()


def test_pressure_mean_zero():
    prob = colliding_flow()
    space, system, rep = _solve_problem(prob, prob.mesh)
    scale = np.linalg.norm(rep.solution.pre) * np.linalg.norm(system.m)
    assert abs(system.m @ rep.solution.pre) <= 1e-12 * max(scale, 1.0)


def test_manufactured_colliding_flow_convergence():
    prob = colliding_flow()
    mesh = prob.mesh
    verrs, perrs, xerrs = [], [], []
    for _ in range(4):
        space, _, rep = _solve_problem(prob, mesh)
        verr, perr = fs.error_against_exact(space, rep.solution, prob.exact)
        verrs.append(verr)
        perrs.append(perr)
        diff = rep.solution.copy()
        xerrs.append(fs.xnorm(space, diff))
        mesh = M.refine(mesh, np.arange(mesh.n_tris))
    # one bisection round shrinks h by sqrt(2); P2/P1 gives O(h^2), i.e. a
    # factor 4 over two rounds
    for e in (verrs, perrs):
        assert e[1] / e[3] >= 3.2
        assert e[0] > e[1] > e[2] > e[3]


def test_energy_identity_zero_boundary():
    def f(x):
        out = np.empty((len(x), 2))
        out[:, 0] = 3.0
        out[:, 1] = x[:, 0]
        return out

    mesh = M.refine(unit_square(), np.arange(4))
    space = fs.THSpace(mesh)
    system = fs.assemble(space, f)
    rep = ss.solve(system)
    n = space.n_scalar
    S = space.stiffness_scalar
    u = rep.solution.vel
    energy = u[:n] @ (S @ u[:n]) + u[n:] @ (S @ u[n:])
    load = system.F @ u
    assert energy == pytest.approx(load, rel=1e-9)


def test_singular_two_triangle_mesh_flagged():
    system = fs.assemble(fs.THSpace(unit_square_two()), constant_field(1.0, 0.0))
    with pytest.raises(SolverError, match="pressure"):
        ss.solve(system, tol=1e-8)
    with pytest.raises(SolverError, match="pressure"):
        ss.infsup_constant(system)


def test_tolerance_domain_checked():
    system = fs.assemble(fs.THSpace(unit_square()), zero_field)
    with pytest.raises(ConfigError):
        ss.solve(system, tol=0.5)
    with pytest.raises(ConfigError):
        ss.solve(system, tol=0.0)


def _dense_infsup(space, system):
    """Dense generalized-eigenvalue oracle for the inf-sup constant."""
    free = space.velocity_free
    A = system.A[free][:, free].toarray()
    B = system.B[:, free].toarray()
    Z = sla.null_space(system.m.reshape(1, -1))
    K = np.block([[A, B.T @ Z], [Z.T @ B, np.zeros((Z.shape[1],) * 2)]])
    G = sla.block_diag(A, Z.T @ space.mass_p1.toarray() @ Z)
    mu = sla.eigvalsh(K, G)
    return float(np.abs(mu).min())


def test_infsup_dense_oracle_and_regression():
    mesh = M.refine(unit_square(), np.arange(4))
    assert mesh.n_tris == 8
    space = fs.THSpace(mesh)
    system = fs.assemble(space, zero_field)
    val = ss.infsup_constant(system, tol=1e-9)
    assert val == pytest.approx(_dense_infsup(space, system), rel=1e-5)
    # frozen regression value for the 8-triangle square
    assert val == pytest.approx(0.1099471510, rel=1e-6)


def test_infsup_uniform_sequence_bounded_below():
    mesh = M.refine(unit_square(), np.arange(4))
    vals = []
    for _ in range(3):
        system = fs.assemble(fs.THSpace(mesh), zero_field)
        vals.append(ss.infsup_constant(system, tol=1e-7))
        mesh = M.refine(mesh, np.arange(mesh.n_tris))
    assert min(vals) >= 0.5 * vals[0]


def test_infsup_renumbering_invariance():
    mesh = M.refine(unit_square(), np.arange(4))
    base = ss.infsup_constant(fs.assemble(fs.THSpace(mesh), zero_field),
                              tol=1e-9)

    rng = np.random.default_rng(7)
    perm = rng.permutation(mesh.n_vertices)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    shuffled = M.make_mesh(mesh.vertices[perm], inv[mesh.tris])
    val = ss.infsup_constant(fs.assemble(fs.THSpace(shuffled), zero_field),
                             tol=1e-9)
    assert val == pytest.approx(base, rel=1e-6)


def _scalar_prolongation(coarse_mesh, fine_mesh):
    """Columns = coarse scalar P2 basis evaluated in the fine space, and the
    same for P1 pressure hats (exact for nested refinements)."""
    cs, fsp = fs.THSpace(coarse_mesh), fs.THSpace(fine_mesh)
    P2 = np.zeros((fsp.n_scalar, cs.n_scalar))
    P1 = np.zeros((fsp.dim_pressure, cs.dim_pressure))
    for i in range(cs.n_scalar):
        vel = np.zeros(2 * cs.n_scalar)
        vel[i] = 1.0
        cv = fs.CoeffVec(cs, vel, np.zeros(cs.dim_pressure))
        P2[:, i] = fs.interpolate_between(cv, fsp).vel[:fsp.n_scalar]
    for j in range(cs.dim_pressure):
        pre = np.zeros(cs.dim_pressure)
        pre[j] = 1.0
        cv = fs.CoeffVec(cs, np.zeros(2 * cs.n_scalar), pre)
        P1[:, j] = fs.interpolate_between(cv, fsp).pre
    return cs, fsp, P2, P1


def test_galerkin_orthogonality_nested_spaces():
    prob = colliding_flow()
    coarse = M.refine(prob.mesh, np.arange(prob.mesh.n_tris))
    fine = M.refine(coarse, np.arange(coarse.n_tris))

    cspace, csys, crep = _solve_problem(prob, coarse)
    fspace, fsys, frep = _solve_problem(prob, fine)
    cs, fsp, P2, P1 = _scalar_prolongation(coarse, fine)

    up = fs.interpolate_between(crep.solution, fspace)
    du = frep.solution.vel - up.vel
    dp = frep.solution.pre - up.pre

    r_u = fsys.A @ du + fsys.B.T @ dp
    r_p = fsys.B @ du
    nf = fsp.n_scalar

    # coarse velocity test functions vanish on the boundary, component-wise
    for i in np.nonzero(cs.scalar_free)[0]:
        col = P2[:, i]
        for r_blk in (r_u[:nf], r_u[nf:]):
            bound = 1e-9 * np.linalg.norm(r_blk) * np.linalg.norm(col) + 1e-13
            assert abs(r_blk @ col) <= bound
    # coarse pressure test functions, projected to discrete mean zero
    mf = fsys.m
    for j in range(cs.dim_pressure):
        q = P1[:, j]
        q = q - (mf @ q) / mf.sum()
        bound = 1e-9 * np.linalg.norm(r_p) * np.linalg.norm(q) + 1e-13
        assert abs(r_p @ q) <= bound


def test_opnorm_examples():
    assert ss.opnorm(np.eye(5)) == pytest.approx(1.0, rel=1e-6)
    assert ss.opnorm(np.diag([1.0, 2.0, 3.0])) == pytest.approx(3.0, rel=1e-4)
    rng = np.random.default_rng(42)
    A = rng.standard_normal((50, 50))
    assert ss.opnorm(A, tol=1e-8) == pytest.approx(
        np.linalg.svd(A, compute_uv=False)[0], rel=1e-3)
    assert ss.opnorm(np.zeros((4, 4))) == 0.0
