"""Plane-strain hyperelastic finite elements for the artery wall."""
from .assembly import Assembler, apply_pressure_load, cavity_area, pressure_load_stiffness
from .material import (ElementInversionError, LinearElasticMaterial, MaterialModel,
                       TISSUE_COEFFICIENTS, cauchy_stress, default_materials,
                       equivalent_strain, log_strain, strain_energy, von_mises_stress)
from .solver import (LoadCase, SolutionField, SolverConvergenceError, element_fields,
                     linear_elastic_solve, load_solution, mmhg_to_kpa, save_solution,
                     solve_static)


def assemble_internal_forces(mesh, materials, u_free, pressure=0.0):
    """Residual (internal minus external force) on the free dofs; pressure in kPa."""
    return Assembler(mesh, materials).residual(u_free, 1e-3 * pressure)


def tangent_stiffness(mesh, materials, u_free, pressure=0.0):
    """Consistent tangent of :func:`assemble_internal_forces` on the free dofs."""
    return Assembler(mesh, materials).residual_and_tangent(u_free, 1e-3 * pressure)[1]
