"""Return mappings projecting trial elastic states back to the yield surface.

All six mappings act on the Hencky strain eps = log(Sigma) of the trial F^e,
so reconstruction F^e = U diag(exp(eps)) V^T is exact. Deviatoric Kirchhoff
stress in principal space is s = 2 mu dev(eps), which makes every radial
return a scalar rescaling of dev(eps).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .constitutive import SIGMA_CLAMP_FLOOR, SvdDecomposition, svd_rotation_safe

# Softening floor and default slope for the damage law; the yield stress
# never drops below DAMAGE_FLOOR_FRACTION * sigma_Y0.
DAMAGE_FLOOR_FRACTION = 0.01
DEFAULT_SOFTENING = 5.0

_SQRT_2_3 = math.sqrt(2.0 / 3.0)


@dataclass(frozen=True)
class TrialState:
    """Trial elastic state entering a return map."""

    decomp: SvdDecomposition
    eps: np.ndarray       # Hencky strain, principal values (3,)
    eps_p: float          # accumulated plastic strain
    dt: float             # substep length, seconds

    @property
    def dev_eps(self) -> np.ndarray:
        return self.eps - self.eps.sum() / 3.0


@dataclass(frozen=True)
class YieldResult:
    Fe: np.ndarray
    eps_p: float
    f_Y: float


def trial_from_F(F: np.ndarray, eps_p: float = 0.0, dt: float = 1e-4) -> TrialState:
    """Decompose a trial F^e; singular values are floored at the clamp guard."""
    d = svd_rotation_safe(F)
    sigma = np.maximum(d.sigma, SIGMA_CLAMP_FLOOR)
    if not np.array_equal(sigma, d.sigma):
        d = SvdDecomposition(U=d.U, sigma=sigma, V=d.V)
    return TrialState(decomp=d, eps=np.log(sigma), eps_p=eps_p, dt=dt)


def reconstruct_Fe(decomp: SvdDecomposition, eps: np.ndarray) -> np.ndarray:
    """F^e = U diag(exp(eps)) V^T."""
    return (decomp.U * np.exp(eps)) @ decomp.V.T


def _result(trial: TrialState, eps: np.ndarray, eps_p: float, f_Y: float) -> YieldResult:
    return YieldResult(Fe=reconstruct_Fe(trial.decomp, eps), eps_p=eps_p, f_Y=f_Y)


def return_map_identity(trial: TrialState) -> YieldResult:
    """No plastic evolution; f_Y is identically -1."""
    return YieldResult(Fe=trial.decomp.reconstruct(), eps_p=trial.eps_p, f_Y=-1.0)


def return_map_von_mises(trial: TrialState, mu: float, sigma_Y: float) -> YieldResult:
    """Radial return against ||s|| <= sqrt(2/3) sigma_Y."""
    dev = trial.dev_eps
    dev_norm = float(np.linalg.norm(dev))
    s_norm = 2.0 * mu * dev_norm
    target = _SQRT_2_3 * sigma_Y
    f = s_norm - target
    if f <= 0.0:
        return YieldResult(Fe=trial.decomp.reconstruct(), eps_p=trial.eps_p, f_Y=f)
    dev_new = dev * (target / (2.0 * mu) / dev_norm)
    eps_new = dev_new + trial.eps.sum() / 3.0
    eps_p = trial.eps_p + float(np.linalg.norm(dev - dev_new))
    f_after = 2.0 * mu * float(np.linalg.norm(dev_new)) - target
    return _result(trial, eps_new, eps_p, f_after)


def softened_yield_stress(sigma_Y0: float, softening: float, eps_p: float) -> float:
    """Linear softening with a floor: sigma_Y never reaches zero."""
    return max(sigma_Y0 * (1.0 - softening * eps_p), DAMAGE_FLOOR_FRACTION * sigma_Y0)


def return_map_von_mises_damage(
    trial: TrialState, mu: float, sigma_Y0: float, softening: float = DEFAULT_SOFTENING
) -> YieldResult:
    """von Mises with yield stress decreasing in accumulated plastic strain."""
    sigma_Y = softened_yield_stress(sigma_Y0, softening, trial.eps_p)
    return return_map_von_mises(trial, mu, sigma_Y)


def _viscous_relax(trial: TrialState, mu: float, sigma_Y: float, eta: float):
    """Shared overstress relaxation of the foam and Herschel-Bulkley maps.

    Relaxes the overstress y = ||s|| - sqrt(2/3) sigma_Y by 1/(1 + eta/(2 mu dt))
    and reports the discrete viscoplastic consistency residual (zero after a
    plastic step) as the yield value.
    """
    dev = trial.dev_eps
    dev_norm = float(np.linalg.norm(dev))
    s_norm = 2.0 * mu * dev_norm
    target = _SQRT_2_3 * sigma_Y
    y = s_norm - target
    if y <= 0.0:
        return YieldResult(Fe=trial.decomp.reconstruct(), eps_p=trial.eps_p, f_Y=y)
    relax = y / (1.0 + eta / (2.0 * mu * trial.dt))
    s_new_norm = s_norm - relax
    dev_new = dev * (s_new_norm / s_norm)
    eps_new = dev_new + trial.eps.sum() / 3.0
    eps_p = trial.eps_p + float(np.linalg.norm(dev - dev_new))
    # residual of (||s_out|| - target) - (eta/(2 mu dt)) (||s_trial|| - ||s_out||)
    residual = (s_new_norm - target) - (eta / (2.0 * mu * trial.dt)) * (s_norm - s_new_norm)
    return _result(trial, eps_new, eps_p, residual)


def return_map_viscoplastic_foam(
    trial: TrialState, mu: float, sigma_Y: float, eta: float
) -> YieldResult:
    """Viscous regularized von Mises yield (foam)."""
    return _viscous_relax(trial, mu, sigma_Y, eta)


def return_map_herschel_bulkley(
    trial: TrialState, mu: float, sigma_Y: float, eta: float
) -> YieldResult:
    """Rate-dependent viscoplastic fluid; identical relaxation rule as foam."""
    return _viscous_relax(trial, mu, sigma_Y, eta)


def drucker_prager_alpha(theta_fric_deg: float) -> float:
    """Cone slope from friction angle: sqrt(2/3) * 2 sin(t) / (3 - sin(t))."""
    s = math.sin(math.radians(theta_fric_deg))
    return _SQRT_2_3 * 2.0 * s / (3.0 - s)


def return_map_drucker_prager(
    trial: TrialState, mu: float, lam: float, theta_fric_deg: float
) -> YieldResult:
    """Cohesionless three-case Hencky-space projection onto the friction cone."""
    alpha = drucker_prager_alpha(theta_fric_deg)
    tr = float(trial.eps.sum())
    dev = trial.dev_eps
    dev_norm = float(np.linalg.norm(dev))
    if tr > 0.0:
        # expansion: project to the cone apex
        eps_new = np.zeros(3)
        eps_p = trial.eps_p + dev_norm
        return _result(trial, eps_new, eps_p, 0.0)
    kirchhoff_trace = (2.0 * mu + 3.0 * lam) * tr
    f = 2.0 * mu * dev_norm + alpha * kirchhoff_trace
    if f <= 0.0:
        return YieldResult(Fe=trial.decomp.reconstruct(), eps_p=trial.eps_p, f_Y=f)
    dev_target_norm = -alpha * kirchhoff_trace / (2.0 * mu)
    dev_new = dev * (dev_target_norm / dev_norm) if dev_norm > 0.0 else dev * 0.0
    eps_new = dev_new + tr / 3.0
    eps_p = trial.eps_p + float(np.linalg.norm(dev - dev_new))
    f_after = 2.0 * mu * float(np.linalg.norm(dev_new)) + alpha * kirchhoff_trace
    return _result(trial, eps_new, eps_p, f_after)
