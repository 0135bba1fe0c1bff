"""Elastic stress laws and the rotation-safe SVD they rely on.

Three laws are provided: fixed corotated (first Piola), StVK on Hencky strain
(Kirchhoff), and weakly compressible neo-Hookean (first Piola). The solver
converts everything to Kirchhoff stress (tau = P F^T) at its boundary.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, NamedTuple

import numpy as np

from .errors import NonFinite, SingularF
from .material import LameCoefficients

_DET_FLOOR = 1e-12

# Singular values are clamped below at this value before stress evaluation
# when a substep would otherwise drive det(F) to zero.
SIGMA_CLAMP_FLOOR = 0.05


class StressTensor(NamedTuple):
    matrix: np.ndarray
    measure: Literal["piola", "kirchhoff"]


@dataclass(frozen=True)
class SvdDecomposition:
    """F = U diag(sigma) V^T with det(U) = det(V) = +1.

    Any reflection is folded into the sign of sigma[2]; for det(F) > 0 all
    singular values are positive and descending.
    """

    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return self.U @ np.diag(self.sigma) @ self.V.T


def svd_rotation_safe(F: np.ndarray) -> SvdDecomposition:
    """SVD with both factors forced to proper rotations."""
    F = np.asarray(F, dtype=float)
    if not np.all(np.isfinite(F)):
        raise NonFinite("deformation gradient contains NaN/Inf")
    U, sigma, Vh = np.linalg.svd(F)
    V = Vh.T
    sigma = sigma.copy()
    if np.linalg.det(U) < 0:
        U = U.copy()
        U[:, 2] *= -1.0
        sigma[2] *= -1.0
    if np.linalg.det(V) < 0:
        V = V.copy()
        V[:, 2] *= -1.0
        sigma[2] *= -1.0
    return SvdDecomposition(U=U, sigma=sigma, V=V)


def stress_fixed_corotated(F: np.ndarray, lame: LameCoefficients) -> StressTensor:
    """P = 2 mu (F - R) + lambda J (J - 1) F^{-T}."""
    F = np.asarray(F, dtype=float)
    J = np.linalg.det(F)
    if J <= _DET_FLOOR:
        raise SingularF(f"det(F) = {J:g} too small for fixed corotated stress")
    d = svd_rotation_safe(F)
    R = d.U @ d.V.T
    F_inv_T = np.linalg.inv(F).T
    P = 2.0 * lame.mu * (F - R) + lame.lam * J * (J - 1.0) * F_inv_T
    return StressTensor(P, "piola")


def stress_stvk_hencky(F: np.ndarray, lame: LameCoefficients) -> StressTensor:
    """tau = U [2 mu eps + lambda tr(eps) I] U^T with eps = log(Sigma)."""
    d = svd_rotation_safe(F)
    if np.any(d.sigma <= _DET_FLOOR):
        raise SingularF(f"singular value {d.sigma.min():g} too small for StVK stress")
    eps = np.log(d.sigma)
    diag = 2.0 * lame.mu * eps + lame.lam * eps.sum()
    tau = (d.U * diag) @ d.U.T
    return StressTensor(tau, "kirchhoff")


def stress_neo_hookean_fluid(F: np.ndarray, mu: float, kappa: float) -> StressTensor:
    """P = (mu / J^{2/3}) (F - J^{-1/3} R) + (kappa / 2)(J^2 - 1) F^{-T}."""
    F = np.asarray(F, dtype=float)
    J = np.linalg.det(F)
    if J <= _DET_FLOOR:
        raise SingularF(f"det(F) = {J:g} too small for neo-Hookean stress")
    d = svd_rotation_safe(F)
    R = d.U @ d.V.T
    F_inv_T = np.linalg.inv(F).T
    P = (mu / J ** (2.0 / 3.0)) * (F - J ** (-1.0 / 3.0) * R) + 0.5 * kappa * (
        J * J - 1.0
    ) * F_inv_T
    return StressTensor(P, "piola")


def kirchhoff_stress(stress: StressTensor, F: np.ndarray) -> np.ndarray:
    """Kirchhoff measure of a tagged stress: tau = P F^T, identity for tau."""
    if stress.measure == "kirchhoff":
        return stress.matrix
    return stress.matrix @ np.asarray(F, dtype=float).T
