"""Static plane-strain solves and per-element field extraction."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse.linalg as spla

from .assembly import Assembler
from .material import (ElementInversionError, LinearElasticMaterial, MaterialModel,
                       default_materials, det2, equivalent_strain, log_strain,
                       von_mises_stress)

logger = logging.getLogger(__name__)

__all__ = ["LoadCase", "SolutionField", "SolverConvergenceError", "mmhg_to_kpa",
           "solve_static", "linear_elastic_solve", "element_fields",
           "save_solution", "load_solution"]

KPA_PER_MMHG = 101.325 / 760.0


def mmhg_to_kpa(p_mmhg):
    return p_mmhg * KPA_PER_MMHG


class SolverConvergenceError(RuntimeError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history or []


@dataclass
class LoadCase:
    lumen_pressure: float = mmhg_to_kpa(140.0)  # kPa
    load_steps: int = 10
    newton_tol: float = 1e-8
    max_newton_iters: int = 30
    max_halvings: int = 8

    def __post_init__(self):
        if self.lumen_pressure < 0:
            raise ValueError("lumen pressure must be non-negative")
        if self.load_steps < 1:
            raise ValueError("load_steps must be >= 1")
        if not self.newton_tol > 0:
            raise ValueError("newton_tol must be positive")


@dataclass
class SolutionField:
    displacements: np.ndarray          # (N, 2) mm
    von_mises_kpa: np.ndarray          # (E,)
    equivalent_strain: np.ndarray      # (E,)
    history: list = field(default_factory=list)  # per step: list of relative residuals
    converged: bool = True

    def max_stress(self) -> float:
        return float(self.von_mises_kpa.max(initial=0.0))


def sparse_solve(K, rhs):
    # The tangent is symmetric (closed pressure loops), so a symmetric ordering pays off.
    lu = spla.splu(K, permc_spec="MMD_AT_PLUS_A", options={"SymmetricMode": True})
    return lu.solve(rhs)


def _residual_norm(r, ref):
    return float(np.linalg.norm(r)) / ref


def _newton_step_loop(asm, u, pressure, lc: LoadCase, follower=True):
    """Newton iterations at fixed pressure (MPa); returns (u, residual history)."""
    ext = asm.external_forces(asm.full(u), pressure)[asm.free_dofs]
    ref = max(float(np.linalg.norm(ext)), 1e-30)
    r, K = asm.residual_and_tangent(u, pressure, follower)
    hist = [_residual_norm(r, ref)]
    for _ in range(lc.max_newton_iters):
        if hist[-1] < lc.newton_tol:
            return u, hist
        du = sparse_solve(K, -r)
        alpha, accepted = 1.0, None
        norm0 = np.linalg.norm(r)
        for _ in range(lc.max_halvings + 1):
            trial = u + alpha * du
            try:
                r_trial, K_trial = asm.residual_and_tangent(trial, pressure, follower)
            except ElementInversionError:
                alpha *= 0.5
                continue
            if np.all(np.isfinite(r_trial)) and np.linalg.norm(r_trial) < norm0:
                accepted = (trial, r_trial, K_trial)
                break
            if accepted is None and np.all(np.isfinite(r_trial)):
                accepted = (trial, r_trial, K_trial)
            alpha *= 0.5
        if accepted is None:
            raise ElementInversionError("line search could not avoid element inversion")
        u, r, K = accepted
        ext = asm.external_forces(asm.full(u), pressure)[asm.free_dofs]
        ref = max(float(np.linalg.norm(ext)), 1e-30)
        hist.append(_residual_norm(r, ref))
    if hist[-1] < lc.newton_tol:
        return u, hist
    raise SolverConvergenceError(
        f"Newton did not converge in {lc.max_newton_iters} iterations "
        f"(relative residual {hist[-1]:.3e})", [hist])


def element_fields(asm: Assembler, u):
    """Per-element von Mises stress (kPa) and equivalent log strain, averaged over Gauss points."""
    Fg, Fc = asm.gradients(u)
    E, G = Fg.shape[:2]
    vm = np.zeros((E, G))
    for mat, idx in asm.groups:
        F = Fg[idx]
        if isinstance(mat, MaterialModel):
            sig, s33 = mat.cauchy_iso(F)
            p = mat.bulk_penalty_K * (det2(Fc[idx]) - 1.0)
            sig = sig + p[:, None, None, None] * np.eye(2)
            s33 = s33 + p[:, None]
        else:
            sig, s33 = mat.stress(F)
        vm[idx] = von_mises_stress(sig[..., 0, 0], sig[..., 1, 1], s33, 0.5 * (sig[..., 0, 1] + sig[..., 1, 0]))
    eq = equivalent_strain(log_strain(Fg))
    return 1e3 * vm.mean(axis=1), eq.mean(axis=1)


def _check_mesh(mesh):
    if len(mesh.lumen_boundary_edges) == 0:
        raise ValueError("mesh has no lumen boundary to load")


def solve_static(mesh, materials=None, load_case: LoadCase | None = None) -> SolutionField:
    """Quasi-static hyperelastic solve with uniform load stepping.

    Raises
    ------
    SolverConvergenceError
        If a load step fails to reach ``newton_tol``; ``history`` holds the
        residuals of all steps attempted so far.
    ElementInversionError
        If no line-search step keeps every Jacobian positive.
    """
    materials = materials or default_materials()
    lc = load_case or LoadCase()
    _check_mesh(mesh)
    asm = Assembler(mesh, materials)
    u = np.zeros(len(asm.free_dofs))
    history = []
    if lc.lumen_pressure > 0:
        for step in range(1, lc.load_steps + 1):
            p = 1e-3 * lc.lumen_pressure * step / lc.load_steps
            try:
                u, hist = _newton_step_loop(asm, u, p, lc)
            except SolverConvergenceError as exc:
                exc.history = history + exc.history
                raise
            history.append(hist)
            logger.debug("load step %d/%d: %d iterations, residual %.2e",
                         step, lc.load_steps, len(hist) - 1, hist[-1])
    full = asm.full(u)
    vm, eq = element_fields(asm, full)
    return SolutionField(full.reshape(-1, 2), vm, eq, history)


def linear_elastic_solve(mesh, E: float, nu: float, load_case: LoadCase | None = None) -> SolutionField:
    """Small-strain solve (one linear system) with the load on the reference boundary."""
    lc = load_case or LoadCase()
    _check_mesh(mesh)
    mat = LinearElasticMaterial(E, nu)
    labels = np.unique(mesh.labels)
    asm = Assembler(mesh, {int(lab): mat for lab in labels})
    u0 = np.zeros(len(asm.free_dofs))
    p = 1e-3 * lc.lumen_pressure
    r, K = asm.residual_and_tangent(u0, p, follower=False)
    u = sparse_solve(K, -r) if p > 0 else u0
    full = asm.full(u)
    vm, eq = element_fields(asm, full)
    return SolutionField(full.reshape(-1, 2), vm, eq, [[0.0]])


def save_solution(solution: SolutionField, path, extra: dict | None = None) -> None:
    """``<path>.json`` metadata plus ``<path>.<kind>.f32`` little-endian blocks."""
    path = Path(path)
    blocks = {"disp": solution.displacements, "stress": solution.von_mises_kpa,
              "strain": solution.equivalent_strain}
    meta = {"format": "artery-solution", "version": 1, "converged": solution.converged,
            "history": solution.history, "shapes": {}, **(extra or {})}
    for kind, arr in blocks.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        meta["shapes"][kind] = list(arr.shape)
        Path(f"{path}.{kind}.f32").write_bytes(arr.tobytes())
    Path(f"{path}.json").write_text(json.dumps(meta, indent=1))


def load_solution(path) -> tuple[SolutionField, dict]:
    path = Path(path)
    meta = json.loads(Path(f"{path}.json").read_text())
    arrays = {}
    for kind, shape in meta["shapes"].items():
        raw = Path(f"{path}.{kind}.f32").read_bytes()
        arrays[kind] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
    sol = SolutionField(arrays["disp"], arrays["stress"], arrays["strain"],
                        meta.get("history", []), meta.get("converged", True))
    return sol, meta


def load_case_to_dict(lc: LoadCase) -> dict:
    return asdict(lc)
