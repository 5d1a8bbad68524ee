"""Adaptive loop (Solve -> Estimate -> Mark -> Refine -> Grade), run
records with persistence, convergence-rate fitting, and the measurement
harness for the four estimator axioms and the quasi-orthogonality sums.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse.linalg as spla

from . import saddlesolve as ss
from .errors import AfemError, ConfigError, SolverError
from .estimator import EstimatorReport, dorfler_mark, estimate
from .femspace import (CoeffVec, THSpace, assemble, interpolate_between,
                       p2_nodal_from_function, xnorm)
from .mesh import (TriMesh, check_grading, enforce_grading, patch, read_tri,
                   rebuild_keys, refine, write_tri)
from .problems import StokesProblem, make_problem

DEFAULTS = {
    "preset": "lshape",
    "field": "lshape-singular",
    "mode": "stokes",          # stokes | poisson (symmetric self-test)
    "theta": 0.5,
    "d_grad": 5,
    "power": 1,
    "tol": 1e-8,
    "max_elements": 200_000,
    "max_steps": 40,
    "eta_tol": 0.0,
    "reference_levels": 2,
}


def make_config(**overrides) -> dict:
    cfg = dict(DEFAULTS)
    for key, val in overrides.items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config field {key!r}")
        cfg[key] = val
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    for key in cfg:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config field {key!r}")
    if not 0.0 < cfg["theta"] <= 1.0:
        raise ConfigError(f"theta must be in (0, 1], got {cfg['theta']}")
    if int(cfg["d_grad"]) < 1:
        raise ConfigError(f"d_grad must be >= 1, got {cfg['d_grad']}")
    if not 0.0 < cfg["tol"] <= 1e-6:
        raise ConfigError(f"tol must be in (0, 1e-6], got {cfg['tol']}")
    if cfg["power"] not in (1, 2):
        raise ConfigError(f"power must be 1 or 2, got {cfg['power']}")
    if cfg["mode"] not in ("stokes", "poisson"):
        raise ConfigError(f"mode must be stokes or poisson, got {cfg['mode']!r}")
    if int(cfg["max_steps"]) < 1 or int(cfg["max_elements"]) < 1:
        raise ConfigError("max_steps and max_elements must be >= 1")
    if cfg["eta_tol"] < 0.0:
        raise ConfigError(f"eta_tol must be >= 0, got {cfg['eta_tol']}")
    if int(cfg["reference_levels"]) < 1:
        raise ConfigError("reference_levels must be >= 1")


@dataclass
class Step:
    """One adaptive level: mesh, discrete solution, estimator data and the
    mark set that produced the next level (None on the final step)."""

    mesh: TriMesh
    solution: CoeffVec
    report: EstimatorReport
    residual: float
    stats: dict
    marked: np.ndarray | None = None


@dataclass
class RunRecord:
    problem: StokesProblem
    config: dict
    steps: list = field(default_factory=list)
    truncated: bool = False

    def sizes(self) -> np.ndarray:
        return np.array([s.mesh.n_tris for s in self.steps])

    def etas(self) -> np.ndarray:
        return np.sqrt([s.report.total_eta2 for s in self.steps])

    def dofs(self) -> np.ndarray:
        return np.array([s.stats.get("n_unknowns", 0) for s in self.steps])


def solve_on(problem: StokesProblem, mesh: TriMesh, tol: float = 1e-8,
             mode: str = "stokes"):
    """Assemble and solve one level; returns (space, CoeffVec, residual,
    stats).  Poisson mode drops the divergence constraint and solves the
    vector Laplacian alone (symmetric positive definite)."""
    space = THSpace(mesh)
    system = assemble(space, problem.body_force)
    g = None
    if problem.dirichlet is not None:
        g = p2_nodal_from_function(space, problem.dirichlet)

    if mode == "stokes":
        rep = ss.solve(system, tol=tol, boundary_values=g)
        return space, rep.solution, rep.residual, rep.stats

    free = space.velocity_free
    vel = np.zeros(2 * space.n_scalar)
    if g is not None:
        vel[~free] = g[~free]
    Aff = system.A[free][:, free].tocsc()
    rhs = (system.F - system.A @ vel)[free]
    lu = spla.splu(Aff, permc_spec="COLAMD")
    z = lu.solve(rhs)
    scale = np.linalg.norm(rhs)
    residual = float(np.linalg.norm(Aff @ z - rhs) / (scale if scale > 0 else 1.0))
    if not np.isfinite(residual) or residual > tol:
        raise SolverError(f"poisson-mode residual {residual:.3e} exceeds {tol:.1e}")
    vel[free] = z
    sol = CoeffVec(space, vel, np.zeros(space.dim_pressure))
    stats = {"n_unknowns": int(Aff.shape[0]),
             "factor_nnz": int(lu.L.nnz + lu.U.nnz), "method": "splu/COLAMD"}
    return space, sol, residual, stats


def run_afem(config: dict | None = None,
             problem: StokesProblem | None = None) -> RunRecord:
    """Run the adaptive loop until a stopping rule fires.

    Stopping: total estimator below eta_tol, mesh size at least
    max_elements, or max_steps levels recorded -- whichever comes first."""
    cfg = make_config(**(config or {}))
    if problem is None:
        problem = make_problem(cfg["preset"], cfg["field"])
    record = RunRecord(problem, cfg)

    mesh = enforce_grading(problem.mesh, int(cfg["d_grad"]))
    while True:
        step_no = len(record.steps)
        try:
            space, sol, residual, stats = solve_on(
                problem, mesh, cfg["tol"], cfg["mode"])
        except SolverError as exc:
            raise SolverError(f"step {step_no}: {exc}") from None
        report = estimate(space, sol, problem.body_force)
        step = Step(mesh, sol, report, residual, stats)
        record.steps.append(step)

        eta = np.sqrt(report.total_eta2)
        if eta <= cfg["eta_tol"]:
            return record
        if mesh.n_tris >= int(cfg["max_elements"]) \
                or len(record.steps) >= int(cfg["max_steps"]):
            record.truncated = True
            return record

        mark = dorfler_mark(report, cfg["theta"], power=cfg["power"])
        if mark.converged:
            return record
        step.marked = mark.elements
        refined = refine(mesh, mark.elements)
        graded = enforce_grading(refined, int(cfg["d_grad"]))
        # make parent point one whole step back (refine + grading composed)
        graded.parent = refined.parent[graded.parent]
        if graded.n_tris <= mesh.n_tris:
            raise AfemError(f"step {step_no}: refinement did not grow the mesh")
        mesh = graded


def rate_fit(record: RunRecord):
    """Least-squares slope s of log eta against log(#T - #T_0 + 1) over the
    last half of the run; returns (s, rms residual of the fit)."""
    if len(record.steps) < 5:
        raise ConfigError(f"rate_fit needs >= 5 steps, got {len(record.steps)}")
    sizes = record.sizes()
    etas = record.etas()
    n = len(sizes)
    lo = n // 2
    x = np.log(sizes[lo:] - sizes[0] + 1)
    y = np.log(etas[lo:])
    slope, intercept = np.polyfit(x, y, 1)
    resid = float(np.sqrt(np.mean((slope * x + intercept - y) ** 2)))
    return float(-slope), resid


def reference_solution(record: RunRecord, extra_levels: int = 2):
    """Uniformly refine the finest mesh extra_levels times and solve there;
    the result stands in for the exact solution in all ratio measurements.
    Returns (space, solution, estimator floor eta)."""
    if extra_levels < 1:
        raise ConfigError("extra_levels must be >= 1")
    mesh = record.steps[-1].mesh
    for _ in range(int(extra_levels)):
        mesh = refine(mesh, np.arange(mesh.n_tris))
    space, sol, _, _ = solve_on(record.problem, mesh,
                                record.config["tol"], record.config["mode"])
    floor = float(np.sqrt(
        estimate(space, sol, record.problem.body_force).total_eta2))
    return space, sol, floor


def _diff(a: CoeffVec, b: CoeffVec) -> CoeffVec:
    return CoeffVec(a.space, a.vel - b.vel, a.pre - b.pre)


def _surviving(coarse: TriMesh, fine: TriMesh):
    """Index pairs (fine ids, coarse ids) of elements common to both meshes."""
    cmap = {k: i for i, k in enumerate(coarse.element_keys())}
    fid, cid = [], []
    for i, k in enumerate(fine.element_keys()):
        j = cmap.get(k)
        if j is not None:
            fid.append(i)
            cid.append(j)
    return np.array(fid, dtype=np.int64), np.array(cid, dtype=np.int64)


def measure_A1_A2(record: RunRecord) -> dict:
    """Stability on unrefined elements and reduction on refined ones,
    evaluated on every consecutive mesh pair of the run.

    A1: |sqrt(sum_S eta_fine^2) - sqrt(sum_S eta_coarse^2)| <= C_stab * dx
    A2: sum_{new} eta_fine^2 <= q_red * sum_{refined} eta_coarse^2 + C_red dx^2
    with S the surviving elements and dx the energy distance of the
    consecutive solutions.  q_red is picked from {0.5, 0.7, 0.9} to minimize
    the worst-step C_red."""
    rows = []
    for l in range(len(record.steps) - 1):
        coarse, fine = record.steps[l], record.steps[l + 1]
        fid, cid = _surviving(coarse.mesh, fine.mesh)
        up = interpolate_between(coarse.solution, fine.solution.space)
        dx = xnorm(fine.solution.space, _diff(fine.solution, up))
        a_f = float(np.sqrt(fine.report.eta2[fid].sum()))
        a_c = float(np.sqrt(coarse.report.eta2[cid].sum()))
        lhs2 = float(fine.report.total_eta2 - fine.report.eta2[fid].sum())
        rhs2 = float(coarse.report.total_eta2 - coarse.report.eta2[cid].sum())
        rows.append({"level": l, "a1_gap": abs(a_f - a_c), "dx": dx,
                     "a2_new": lhs2, "a2_refined": rhs2,
                     "c_stab": abs(a_f - a_c) / dx if dx > 0 else 0.0})
    c_stab = max((r["c_stab"] for r in rows), default=0.0)
    best = None
    for q in (0.5, 0.7, 0.9):
        c_red = max((max(0.0, r["a2_new"] - q * r["a2_refined"]) / r["dx"] ** 2
                     for r in rows if r["dx"] > 0), default=0.0)
        if best is None or c_red < best[1]:
            best = (q, c_red)
    return {"rows": rows, "C_stab": c_stab,
            "q_red": best[0], "C_red": best[1]}


def measure_A3_qosum(record: RunRecord, reference=None) -> dict:
    """Quasi-orthogonality table: S(l) = sum of squared increment energies
    from level l on, E(l) = squared energy distance to the reference,
    R(l) = S(l)/E(l)."""
    if reference is None:
        reference = reference_solution(
            record, record.config["reference_levels"])
    ref_space, ref_sol, floor = reference
    lifted = [interpolate_between(s.solution, ref_space) for s in record.steps]
    inc2 = [xnorm(ref_space, _diff(b, a)) ** 2
            for a, b in zip(lifted, lifted[1:])]
    tails = np.concatenate([np.cumsum(inc2[::-1])[::-1], [0.0]])
    rows = []
    for l in range(len(record.steps) - 1):
        e2 = xnorm(ref_space, _diff(ref_sol, lifted[l])) ** 2
        rows.append({"level": l, "S": float(tails[l]), "E2": e2,
                     "R": float(tails[l] / e2) if e2 > 0 else 0.0})
    return {"rows": rows, "floor_eta": floor,
            "max_R": max((r["R"] for r in rows), default=0.0)}


def measure_A4_dlr(record: RunRecord, level: int) -> dict:
    """Discrete-reliability measurement for the pair (T_level, T_level+1):
    energy distance squared over the estimator mass on the twice-iterated
    patch of the refined region, plus the patch-overhead count ratio."""
    coarse, fine = record.steps[level], record.steps[level + 1]
    fid, cid = _surviving(coarse.mesh, fine.mesh)
    refined = np.setdiff1d(np.arange(coarse.mesh.n_tris), cid)
    if refined.size == 0:
        raise AfemError(f"levels {level} and {level + 1} hold identical meshes")
    region = patch(coarse.mesh, refined, 2)
    up = interpolate_between(coarse.solution, fine.solution.space)
    dx2 = xnorm(fine.solution.space, _diff(fine.solution, up)) ** 2
    denom = float(coarse.report.eta2[region].sum())
    return {"level": level,
            "C_dlr": dx2 / denom if denom > 0 else float("inf"),
            "patch_ratio": float(region.size) / float(refined.size),
            "refined": int(refined.size), "patch": int(region.size)}


# ---------------------------------------------------------------------------
# persistence


def _write_coeffs(path: Path, sol: CoeffVec) -> None:
    with open(path, "wb") as fh:
        fh.write(b"AFC1")
        fh.write(struct.pack("<QQ", len(sol.vel), len(sol.pre)))
        fh.write(sol.vel.astype("<f8").tobytes())
        fh.write(sol.pre.astype("<f8").tobytes())


def _read_coeffs(path: Path, space: THSpace) -> CoeffVec:
    raw = Path(path).read_bytes()
    if raw[:4] != b"AFC1":
        raise AfemError(f"{path}: not a coefficient file")
    nv, npre = struct.unpack("<QQ", raw[4:20])
    vel = np.frombuffer(raw[20:20 + 8 * nv], dtype="<f8").copy()
    pre = np.frombuffer(raw[20 + 8 * nv:20 + 8 * (nv + npre)], dtype="<f8").copy()
    return CoeffVec(space, vel, pre)


def save_run(record: RunRecord, outdir) -> None:
    out = Path(outdir)
    for sub in ("meshes", "eta", "coeffs", "marked"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    steps = []
    for k, s in enumerate(record.steps):
        write_tri(s.mesh, out / "meshes" / f"step_{k}.tri")
        s.report.to_csv(out / "eta" / f"step_{k}.csv")
        _write_coeffs(out / "coeffs" / f"step_{k}.bin", s.solution)
        if s.marked is not None:
            (out / "marked" / f"step_{k}.bin").write_bytes(
                s.marked.astype("<i8").tobytes())
        steps.append({
            "n_tris": int(s.mesh.n_tris),
            "eta2_total": float(s.report.total_eta2),
            "osc2_total": float(s.report.total_osc2),
            "residual": float(s.residual),
            "n_unknowns": int(s.stats.get("n_unknowns", 0)),
            "marked_count": int(len(s.marked)) if s.marked is not None else 0,
        })
    doc = {"problem": record.problem.name, "config": record.config,
           "truncated": record.truncated, "steps": steps}
    (out / "run.json").write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_run(outdir, problem: StokesProblem | None = None) -> RunRecord:
    out = Path(outdir)
    doc = json.loads((out / "run.json").read_text())
    cfg = doc["config"]
    if problem is None:
        problem = make_problem(cfg["preset"], cfg["field"])
    record = RunRecord(problem, cfg, truncated=doc["truncated"])
    prev = None
    for k, meta in enumerate(doc["steps"]):
        mesh = read_tri(out / "meshes" / f"step_{k}.tri")
        if prev is not None:
            rebuild_keys(prev, mesh)
        elif np.any(mesh.root < 0):
            # initial grading refined the preset mesh; reattach to it
            rebuild_keys(problem.mesh, mesh)
        space = THSpace(mesh)
        sol = _read_coeffs(out / "coeffs" / f"step_{k}.bin", space)
        report = EstimatorReport.from_csv(out / "eta" / f"step_{k}.csv")
        marked_file = out / "marked" / f"step_{k}.bin"
        marked = None
        if marked_file.exists():
            marked = np.frombuffer(marked_file.read_bytes(), dtype="<i8").copy()
        record.steps.append(Step(mesh, sol, report,
                                 meta["residual"],
                                 {"n_unknowns": meta["n_unknowns"]}, marked))
        prev = mesh
    return record
