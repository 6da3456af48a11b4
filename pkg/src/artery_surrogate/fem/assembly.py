"""Total-Lagrangian assembly for bilinear quads under plane strain.

The isochoric energy is integrated with 2x2 Gauss points; the volumetric
penalty is sampled at the element centre (selective reduced integration),
which keeps the near-incompressible tissue from locking.  Both parts derive
from one discrete potential, so the residual is its exact gradient.

The lumen pressure is a follower load on a closed cavity.  Its work is
``p * A(x)`` with ``A`` the current cavity area, so the load and its
stiffness are exact derivatives of that term.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .material import ElementInversionError, det2

__all__ = ["ElementKinematics", "Assembler", "apply_pressure_load", "pressure_load_stiffness",
           "cavity_area"]

_G = 1.0 / np.sqrt(3.0)
GAUSS_POINTS = np.array([[-_G, -_G], [_G, -_G], [_G, _G], [-_G, _G]])
GAUSS_WEIGHTS = np.ones(4)
_XI = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])


def shape_gradients_ref(xi, eta):
    """dN_a/d(xi, eta) for the four bilinear shape functions, shape (4, 2)."""
    return 0.25 * np.column_stack([_XI[:, 0] * (1 + _XI[:, 1] * eta),
                                   _XI[:, 1] * (1 + _XI[:, 0] * xi)])


@dataclass(frozen=True)
class ElementKinematics:
    grads: np.ndarray        # (E, G, 4, 2) dN_a/dX_J at each Gauss point
    weights: np.ndarray      # (E, G) w_g det J0
    grads_c: np.ndarray      # (E, 4, 2) at the element centre
    weight_c: np.ndarray     # (E,) element area

    @classmethod
    def build(cls, X_e: np.ndarray) -> "ElementKinematics":
        """``X_e`` holds reference nodal coordinates per element, shape (E, 4, 2)."""
        def at(xi, eta):
            dN = shape_gradients_ref(xi, eta)
            J0 = np.einsum("eai,aj->eij", X_e, dN)
            detJ0 = det2(J0)
            if np.any(detJ0 <= 0):
                raise ElementInversionError("reference element with non-positive Jacobian")
            invJ0 = np.linalg.inv(J0)
            return np.einsum("aj,eji->eai", dN, invJ0), detJ0

        g_list, w_list = [], []
        for (xi, eta), w in zip(GAUSS_POINTS, GAUSS_WEIGHTS):
            g, d = at(xi, eta)
            g_list.append(g)
            w_list.append(w * d)
        gc, dc = at(0.0, 0.0)
        return cls(np.stack(g_list, axis=1), np.stack(w_list, axis=1), gc, 4.0 * dc)


def strain_displacement(grads):
    """B with F_flat = I_flat + B @ u_e for (..., 4, 2) shape gradients.

    Rows are (i, J) -> 2i + J, columns (a, k) -> 2a + k; B = delta_ik dN_a/dX_J.
    """
    B = np.zeros(grads.shape[:-2] + (4, 8))
    for i in range(2):
        for J in range(2):
            B[..., 2 * i + J, i::2] = grads[..., :, J]
    return B


class Assembler:
    """Residual, tangent and potential of a mesh with per-element materials.

    Parameters
    ----------
    mesh : Mesh
    materials : dict
        TissueLabel -> material.  Hyperelastic materials expose
        ``tangent_iso``/``tangent_vol``; others (linear) expose ``tangent``
        and are fully integrated.
    """

    def __init__(self, mesh, materials):
        self.mesh = mesh
        self.materials = materials
        self.X = mesh.nodes
        self.n_dof = 2 * mesh.num_nodes
        fixed = np.zeros(mesh.num_nodes, dtype=bool)
        fixed[mesh.outer_fixed_nodes] = True
        self.free_dofs = np.flatnonzero(~np.repeat(fixed, 2))
        self.kin = ElementKinematics.build(self.X[mesh.elements])
        self.edofs = np.stack([2 * mesh.elements, 2 * mesh.elements + 1], axis=-1).reshape(-1, 8)
        self.rows = np.repeat(self.edofs, 8, axis=1).ravel()
        self.cols = np.tile(self.edofs, (1, 8)).ravel()
        self.B = strain_displacement(self.kin.grads)
        self.Bc = strain_displacement(self.kin.grads_c)
        self.groups = [(mat, np.flatnonzero(mesh.labels == label))
                       for label, mat in materials.items()
                       if np.any(mesh.labels == label)]
        covered = sum(len(idx) for _, idx in self.groups)
        if covered != mesh.num_elements:
            raise ValueError("every element label needs a material")

    # --- dof maps -------------------------------------------------------------
    def full(self, u_free):
        u = np.zeros(self.n_dof)
        u[self.free_dofs] = u_free
        return u

    def gradients(self, u):
        """Deformation gradients at Gauss points (E, G, 2, 2) and centres (E, 2, 2)."""
        u_e = u.reshape(-1, 2)[self.mesh.elements]
        eye = np.eye(2)
        Fg = eye + np.einsum("eai,egaj->egij", u_e, self.kin.grads)
        Fc = eye + np.einsum("eai,eaj->eij", u_e, self.kin.grads_c)
        return Fg, Fc

    # --- internal quantities --------------------------------------------------
    def internal_energy(self, u):
        Fg, Fc = self.gradients(u)
        total = 0.0
        for mat, idx in self.groups:
            if hasattr(mat, "tangent_iso"):
                Wg = mat.energy(Fg[idx], volumetric=False)
                Wc = mat.volumetric_energy(det2(Fc[idx]))
                total += np.sum(Wg * self.kin.weights[idx]) + np.sum(Wc * self.kin.weight_c[idx])
            else:
                total += np.sum(mat.energy(Fg[idx]) * self.kin.weights[idx])
        return float(total)

    def _element_terms(self, u, with_tangent):
        Fg, Fc = self.gradients(u)
        E = self.mesh.num_elements
        fe = np.zeros((E, 8))
        ke = np.zeros((E, 8, 8)) if with_tangent else None
        for mat, idx in self.groups:
            B = self.B[idx]
            w = self.kin.weights[idx]
            iso = hasattr(mat, "tangent_iso")
            if with_tangent:
                P, A = mat.tangent_iso(Fg[idx]) if iso else mat.tangent(Fg[idx])
            else:
                P = mat.piola_iso(Fg[idx]) if iso else mat.piola(Fg[idx])
            Bt = np.swapaxes(B, -1, -2)
            fe[idx] += np.sum((Bt @ P.reshape(P.shape[:-2] + (4, 1)))[..., 0] * w[..., None], axis=1)
            if with_tangent:
                A4 = A.reshape(A.shape[:-4] + (4, 4)) * w[..., None, None]
                ke[idx] += np.sum(Bt @ A4 @ B, axis=1)
            if iso:
                Bc = self.Bc[idx]
                wc = self.kin.weight_c[idx]
                Bct = np.swapaxes(Bc, -1, -2)
                if with_tangent:
                    Pv, Av = mat.tangent_vol(Fc[idx])
                    ke[idx] += Bct @ (Av.reshape(-1, 4, 4) * wc[:, None, None]) @ Bc
                else:
                    Pv = mat.tangent_vol(Fc[idx])[0]
                fe[idx] += (Bct @ Pv.reshape(-1, 4, 1))[..., 0] * wc[:, None]
        return fe, ke

    def internal_forces(self, u):
        fe, _ = self._element_terms(u, False)
        return np.bincount(self.edofs.ravel(), weights=fe.reshape(-1), minlength=self.n_dof)

    def internal_forces_and_stiffness(self, u):
        fe, ke = self._element_terms(u, True)
        f = np.bincount(self.edofs.ravel(), weights=fe.reshape(-1), minlength=self.n_dof)
        K = sp.coo_matrix((ke.reshape(-1), (self.rows, self.cols)),
                          shape=(self.n_dof, self.n_dof)).tocsr()
        return f, K

    # --- external load --------------------------------------------------------
    def external_forces(self, u, pressure):
        return apply_pressure_load(self.X + u.reshape(-1, 2), self.mesh.lumen_boundary_edges,
                                   pressure)

    def potential(self, u_free, pressure, follower=True):
        u = self.full(u_free)
        x = self.X + u.reshape(-1, 2) if follower else self.X
        if follower:
            work = pressure * cavity_area(x, self.mesh.lumen_boundary_edges)
        else:
            work = float(apply_pressure_load(self.X, self.mesh.lumen_boundary_edges, pressure) @ u)
        return self.internal_energy(u) - work

    def residual(self, u_free, pressure, follower=True):
        u = self.full(u_free)
        ext_u = u if follower else np.zeros_like(u)
        r = self.internal_forces(u) - self.external_forces(ext_u, pressure)
        return r[self.free_dofs]

    def residual_and_tangent(self, u_free, pressure, follower=True):
        u = self.full(u_free)
        f, K = self.internal_forces_and_stiffness(u)
        if follower:
            ext = self.external_forces(u, pressure)
            K = K - pressure_load_stiffness(self.mesh.lumen_boundary_edges, pressure, self.n_dof)
        else:
            ext = self.external_forces(np.zeros_like(u), pressure)
        free = self.free_dofs
        return (f - ext)[free], K[free][:, free].tocsc()


def apply_pressure_load(x, edges, pressure):
    """Follower pressure on oriented edges at current coordinates ``x`` (N, 2).

    Each edge (a -> b, solid on the left) receives pressure * length along
    its left normal, split equally between its two nodes.
    """
    n = len(x)
    f = np.zeros(2 * n)
    if pressure == 0 or len(edges) == 0:
        return f
    a, b = edges[:, 0], edges[:, 1]
    d = x[b] - x[a]
    half = 0.5 * pressure * np.column_stack([-d[:, 1], d[:, 0]])
    for node in (a, b):
        f += np.bincount(2 * node, weights=half[:, 0], minlength=2 * n)
        f += np.bincount(2 * node + 1, weights=half[:, 1], minlength=2 * n)
    return f


def pressure_load_stiffness(edges, pressure, n_dof):
    """d(apply_pressure_load)/dx as a sparse matrix; independent of x."""
    if pressure == 0 or len(edges) == 0:
        return sp.csr_matrix((n_dof, n_dof))
    a, b = edges[:, 0], edges[:, 1]
    h = 0.5 * pressure
    rows, cols, vals = [], [], []
    for node in (a, b):
        # f_x = -h (y_b - y_a), f_y = h (x_b - x_a)
        rows += [2 * node, 2 * node, 2 * node + 1, 2 * node + 1]
        cols += [2 * b + 1, 2 * a + 1, 2 * b, 2 * a]
        vals += [np.full(len(a), -h), np.full(len(a), h), np.full(len(a), h), np.full(len(a), -h)]
    return sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(n_dof, n_dof)).tocsr()


def cavity_area(x, edges):
    """Area enclosed by lumen loops whose edges keep the solid on the left."""
    if len(edges) == 0:
        return 0.0
    pa, pb = x[edges[:, 0]], x[edges[:, 1]]
    return float(-0.5 * np.sum(pa[:, 0] * pb[:, 1] - pb[:, 0] * pa[:, 1]))
