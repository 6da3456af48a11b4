"""Plane-strain constitutive laws.

Hyperelastic tissue uses the generalized polynomial energy

    W = sum_ij C_ij (I1b - 3)^i (I2b - 3)^j + K/2 (J - 1)^2

with isochoric invariants I1b = J^(-2/3) I1 and I2b = J^(-4/3) I2.  Under
plane strain (F33 = 1) both invariants depend on the in-plane gradient only
through c = tr(F2^T F2) and J = det F2:

    I1 = c + 1,   I2 = c + J^2

so P = 2 W_c F + W_J cof(F), and the tangent follows by differentiating once
more.  All stresses are in MPa; arrays carry arbitrary leading batch axes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import TissueLabel

__all__ = [
    "ElementInversionError",
    "MaterialModel",
    "LinearElasticMaterial",
    "TISSUE_COEFFICIENTS",
    "default_materials",
    "strain_energy",
    "cauchy_stress",
    "von_mises_stress",
    "equivalent_strain",
    "log_strain",
]

TISSUE_COEFFICIENTS = {
    TissueLabel.ARTERY: {(1, 0): 0.108, (0, 1): -0.101, (1, 1): -0.179, (2, 0): 0.088, (0, 2): 0.062},
    TissueLabel.FIBROUS: {(1, 0): 0.040, (0, 2): 0.003, (0, 3): 0.0297},
    TissueLabel.CALCIUM: {(1, 0): -0.495, (0, 1): 0.506, (1, 1): 1.193, (2, 0): 3.637, (3, 0): 4.737},
}
BULK_TO_SHEAR = 100.0

# d cof(F)_iJ / d F_kL for 2x2 F, cof = [[F22, -F21], [-F12, F11]].
_DCOF = np.zeros((2, 2, 2, 2))
_DCOF[0, 0, 1, 1] = 1.0
_DCOF[0, 1, 1, 0] = -1.0
_DCOF[1, 0, 0, 1] = -1.0
_DCOF[1, 1, 0, 0] = 1.0
_EYE4 = np.einsum("ik,jl->ijkl", np.eye(2), np.eye(2))


class ElementInversionError(ArithmeticError):
    """A deformation gradient with non-positive determinant was encountered."""


def cofactor(F):
    cof = np.empty_like(F)
    cof[..., 0, 0] = F[..., 1, 1]
    cof[..., 0, 1] = -F[..., 1, 0]
    cof[..., 1, 0] = -F[..., 0, 1]
    cof[..., 1, 1] = F[..., 0, 0]
    return cof


def det2(F):
    return F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]


def _outer(A, B):
    return A[..., :, :, None, None] * B[..., None, None, :, :]


def _check_jacobian(J):
    if np.any(~(J > 0)):
        raise ElementInversionError("non-positive Jacobian in deformation gradient")


@dataclass
class MaterialModel:
    """Polynomial hyperelastic law with a quadratic volumetric penalty.

    ``bulk_penalty_K`` defaults to 100 times the small-strain shear modulus
    2 (C10 + C01).
    """

    coefficients: dict
    bulk_penalty_K: float | None = None
    name: str = ""

    def __post_init__(self):
        self.coefficients = {tuple(int(v) for v in k): float(c) for k, c in self.coefficients.items()}
        if self.bulk_penalty_K is None:
            self.bulk_penalty_K = BULK_TO_SHEAR * self.shear_modulus

    @property
    def shear_modulus(self) -> float:
        return 2.0 * (self.coefficients.get((1, 0), 0.0) + self.coefficients.get((0, 1), 0.0))

    # --- energy as a function of the isochoric invariants --------------------
    def energy_invariants(self, I1b, I2b, J):
        a = np.asarray(I1b, dtype=float) - 3.0
        b = np.asarray(I2b, dtype=float) - 3.0
        W = np.zeros(np.broadcast(a, b).shape)
        for (i, j), c in self.coefficients.items():
            W = W + c * a ** i * b ** j
        return W + 0.5 * self.bulk_penalty_K * (np.asarray(J, dtype=float) - 1.0) ** 2

    def _poly_derivs(self, a, b):
        """W and its first/second partials with respect to a = I1b-3, b = I2b-3."""
        zero = np.zeros(np.broadcast(a, b).shape)
        Wa, Wb, Waa, Wab, Wbb = zero.copy(), zero.copy(), zero.copy(), zero.copy(), zero.copy()

        def pw(x, p):
            return x ** p if p > 0 else np.ones_like(x)

        for (i, j), c in self.coefficients.items():
            if i >= 1:
                Wa += c * i * pw(a, i - 1) * pw(b, j)
            if j >= 1:
                Wb += c * j * pw(a, i) * pw(b, j - 1)
            if i >= 2:
                Waa += c * i * (i - 1) * pw(a, i - 2) * pw(b, j)
            if i >= 1 and j >= 1:
                Wab += c * i * j * pw(a, i - 1) * pw(b, j - 1)
            if j >= 2:
                Wbb += c * j * (j - 1) * pw(a, i) * pw(b, j - 2)
        return Wa, Wb, Waa, Wab, Wbb

    def _iso_cJ(self, c, J, second=True):
        """Partials of the isochoric energy with respect to c and J."""
        J23, J43 = J ** (-2.0 / 3.0), J ** (-4.0 / 3.0)
        I1b = J23 * (c + 1.0)
        I2b = J43 * c + J ** (2.0 / 3.0)
        Wa, Wb, Waa, Wab, Wbb = self._poly_derivs(I1b - 3.0, I2b - 3.0)
        I1_c, I2_c = J23, J43
        I1_J = -2.0 / 3.0 * I1b / J
        I2_J = -4.0 / 3.0 * J43 * c / J + 2.0 / 3.0 * J ** (-1.0 / 3.0)
        Wc = Wa * I1_c + Wb * I2_c
        WJ = Wa * I1_J + Wb * I2_J
        if not second:
            return Wc, WJ
        I1_cJ = -2.0 / 3.0 * J23 / J
        I2_cJ = -4.0 / 3.0 * J43 / J
        I1_JJ = 10.0 / 9.0 * I1b / J ** 2
        I2_JJ = 28.0 / 9.0 * J43 * c / J ** 2 - 2.0 / 9.0 * J ** (-4.0 / 3.0)
        Wcc = Waa * I1_c ** 2 + 2 * Wab * I1_c * I2_c + Wbb * I2_c ** 2
        WcJ = (Waa * I1_c * I1_J + Wab * (I1_c * I2_J + I1_J * I2_c) + Wbb * I2_c * I2_J
               + Wa * I1_cJ + Wb * I2_cJ)
        WJJ = (Waa * I1_J ** 2 + 2 * Wab * I1_J * I2_J + Wbb * I2_J ** 2
               + Wa * I1_JJ + Wb * I2_JJ)
        return Wc, WJ, Wcc, WcJ, WJJ

    # --- functions of the in-plane deformation gradient ----------------------
    def invariants(self, F):
        J = det2(F)
        _check_jacobian(J)
        c = np.einsum("...ij,...ij->...", F, F)
        return (c + 1.0) * J ** (-2.0 / 3.0), (c + J ** 2) * J ** (-4.0 / 3.0), J

    def energy(self, F, volumetric=True):
        I1b, I2b, J = self.invariants(F)
        W = self.energy_invariants(I1b, I2b, np.ones_like(J))
        if volumetric:
            W = W + self.volumetric_energy(J)
        return W

    def volumetric_energy(self, J):
        return 0.5 * self.bulk_penalty_K * (J - 1.0) ** 2

    def piola_iso(self, F):
        J = det2(F)
        _check_jacobian(J)
        c = np.einsum("...ij,...ij->...", F, F)
        Wc, WJ = self._iso_cJ(c, J, second=False)
        return 2.0 * Wc[..., None, None] * F + WJ[..., None, None] * cofactor(F)

    def tangent_iso(self, F):
        """First Piola stress and dP/dF of the isochoric part."""
        J = det2(F)
        _check_jacobian(J)
        c = np.einsum("...ij,...ij->...", F, F)
        Wc, WJ, Wcc, WcJ, WJJ = self._iso_cJ(c, J)
        cof = cofactor(F)
        F2 = 2.0 * F
        P = Wc[..., None, None] * F2 + WJ[..., None, None] * cof
        e = (Ellipsis, None, None, None, None)
        A = (2.0 * Wc[e] * _EYE4 + Wcc[e] * _outer(F2, F2)
             + WcJ[e] * (_outer(F2, cof) + _outer(cof, F2))
             + WJJ[e] * _outer(cof, cof) + WJ[e] * _DCOF)
        return P, A

    def tangent_vol(self, F):
        J = det2(F)
        _check_jacobian(J)
        K = self.bulk_penalty_K
        dU = K * (J - 1.0)
        cof = cofactor(F)
        e = (Ellipsis, None, None, None, None)
        P = dU[..., None, None] * cof
        A = K * _outer(cof, cof) + dU[e] * _DCOF
        return P, A

    def piola(self, F):
        J = det2(F)
        _check_jacobian(J)
        return self.piola_iso(F) + (self.bulk_penalty_K * (J - 1.0))[..., None, None] * cofactor(F)

    def tangent(self, F):
        P1, A1 = self.tangent_iso(F)
        P2, A2 = self.tangent_vol(F)
        return P1 + P2, A1 + A2

    def cauchy_iso(self, F):
        """In-plane Cauchy stress (..., 2, 2) and sigma33 of the isochoric part."""
        J = det2(F)
        _check_jacobian(J)
        c = np.einsum("...ij,...ij->...", F, F)
        P = self.piola_iso(F)
        sigma = np.einsum("...iJ,...kJ->...ik", P, F) / J[..., None, None]
        # d/dF33 at F33 = 1 with I1 = c + F33^2, J3 = J F33, I2 = J^2 + F33^2 c.
        J23, J43 = J ** (-2.0 / 3.0), J ** (-4.0 / 3.0)
        I1b = J23 * (c + 1.0)
        I2b = J43 * c + J ** (2.0 / 3.0)
        Wa, Wb, *_ = self._poly_derivs(I1b - 3.0, I2b - 3.0)
        dI1 = J23 * (2.0 - 2.0 / 3.0 * (c + 1.0))
        dI2 = J43 * (2.0 * c - 4.0 / 3.0 * (c + J ** 2))
        s33 = (Wa * dI1 + Wb * dI2) / J
        return sigma, s33


@dataclass
class LinearElasticMaterial:
    """Small-strain isotropic law expressed through F (eps = sym(F) - I)."""

    E: float
    nu: float
    name: str = "linear"
    lam: float = field(init=False)
    mu: float = field(init=False)

    def __post_init__(self):
        self.lam = self.E * self.nu / ((1 + self.nu) * (1 - 2 * self.nu))
        self.mu = self.E / (2 * (1 + self.nu))

    def strain(self, F):
        eps = 0.5 * (F + np.swapaxes(F, -1, -2)) - np.eye(2)
        return eps

    def energy(self, F):
        eps = self.strain(F)
        tr = eps[..., 0, 0] + eps[..., 1, 1]
        return 0.5 * self.lam * tr ** 2 + self.mu * np.einsum("...ij,...ij->...", eps, eps)

    def piola(self, F):
        eps = self.strain(F)
        tr = eps[..., 0, 0] + eps[..., 1, 1]
        return self.lam * tr[..., None, None] * np.eye(2) + 2 * self.mu * eps

    def tangent(self, F):
        A = (self.lam * np.einsum("ij,kl->ijkl", np.eye(2), np.eye(2))
             + self.mu * (_EYE4 + np.einsum("il,jk->ijkl", np.eye(2), np.eye(2))))
        return self.piola(F), np.broadcast_to(A, F.shape + (2, 2)).copy()

    def stress(self, F):
        sigma = self.piola(F)
        eps = self.strain(F)
        return sigma, self.lam * (eps[..., 0, 0] + eps[..., 1, 1])


def default_materials(bulk_to_shear: float = BULK_TO_SHEAR) -> dict:
    """Artery/Fibrous/Calcium laws keyed by TissueLabel."""
    return {label: MaterialModel(coeffs, bulk_to_shear * 2.0 * (coeffs.get((1, 0), 0.0)
                                                               + coeffs.get((0, 1), 0.0)),
                                 name=label.name.lower())
            for label, coeffs in TISSUE_COEFFICIENTS.items()}


def strain_energy(material: MaterialModel, I1b, I2b, J):
    """Energy density in MPa at the given isochoric invariants and volume ratio."""
    if np.any(np.asarray(J) <= 0):
        raise ElementInversionError("J must be positive")
    return material.energy_invariants(I1b, I2b, J)


def cauchy_stress(material: MaterialModel, F):
    """Cauchy stress for a plane-strain gradient.

    Returns the in-plane 2x2 tensor and sigma33, both in kPa.
    """
    F = np.asarray(F, dtype=float)
    sigma, s33 = material.cauchy_iso(F)
    J = det2(F)
    p = material.bulk_penalty_K * (J - 1.0)
    sigma = sigma + p[..., None, None] * np.eye(2)
    return 1e3 * sigma, 1e3 * (s33 + p)


def von_mises_stress(s11, s22, s33, s12):
    s11, s22, s33, s12 = (np.asarray(v, dtype=float) for v in (s11, s22, s33, s12))
    q = s11 ** 2 + s22 ** 2 + s33 ** 2 - s11 * s22 - s22 * s33 - s33 * s11 + 3.0 * s12 ** 2
    return np.sqrt(np.maximum(q, 0.0))


def log_strain(F):
    """In-plane logarithmic (Hencky) strain 0.5 ln(F F^T); the 33 entry is 0."""
    B = np.einsum("...ik,...jk->...ij", F, F)
    w, v = np.linalg.eigh(B)
    return 0.5 * np.einsum("...ik,...k,...jk->...ij", v, np.log(w), v)


def equivalent_strain(eps, eps33=0.0):
    """von Mises equivalent strain sqrt(2/3 e_dev : e_dev).

    ``eps`` is a (..., 2, 2) in-plane tensor or a (..., 3, 3) full tensor.
    """
    eps = np.asarray(eps, dtype=float)
    if eps.shape[-1] == 2:
        full = np.zeros(eps.shape[:-2] + (3, 3))
        full[..., :2, :2] = eps
        full[..., 2, 2] = eps33
        eps = full
    tr = np.trace(eps, axis1=-2, axis2=-1)
    dev = eps - tr[..., None, None] / 3.0 * np.eye(3)
    return np.sqrt(2.0 / 3.0 * np.einsum("...ij,...ij->...", dev, dev))
