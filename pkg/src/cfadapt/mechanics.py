"""Pointwise hyperelastic quantities for a compressible Neo-Hookean solid.

All functions are vectorised over leading axes: ``F`` has shape ``(..., 2, 2)``
and is embedded in 3D under plane strain (``F33 = 1``).

    W0 = mu/2 (tr C + 1 - 3) - mu ln J + lam/2 (ln J)^2
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "InvertedElementError",
    "MaterialParams",
    "strain_energy",
    "piola_stress",
    "material_tangent",
    "cauchy_stress",
    "von_mises",
    "von_mises_derivative",
    "eshelby_stress",
    "stress_state",
    "StressState",
]


class InvertedElementError(ValueError):
    """Raised when det F <= 0 at an evaluation point."""


@dataclass(frozen=True)
class MaterialParams:
    lam: float = 2.66
    mu: float = 0.71

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError(f"shear modulus must be positive, got mu={self.mu}")
        if not self.lam + self.mu > 0:
            raise ValueError(f"lam + mu must be positive, got {self.lam + self.mu}")


def _det(F):
    return F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]


def _inv(F, J):
    inv = np.empty_like(F)
    inv[..., 0, 0] = F[..., 1, 1]
    inv[..., 1, 1] = F[..., 0, 0]
    inv[..., 0, 1] = -F[..., 0, 1]
    inv[..., 1, 0] = -F[..., 1, 0]
    return inv / J[..., None, None]


def _kinematics(F):
    F = np.asarray(F, dtype=float)
    J = _det(F)
    if np.any(~(J > 0)):
        raise InvertedElementError("deformation gradient with det F <= 0")
    return F, J, _inv(F, J)


def strain_energy(F, m: MaterialParams):
    F, J, _ = _kinematics(F)
    lnJ = np.log(J)
    trC = np.einsum("...ij,...ij->...", F, F) + 1.0
    return 0.5 * m.mu * (trC - 3.0) - m.mu * lnJ + 0.5 * m.lam * lnJ**2


def piola_stress(F, m: MaterialParams):
    """First Piola-Kirchhoff stress ``P = dW0/dF`` (in-plane block)."""
    F, J, Finv = _kinematics(F)
    FinvT = np.swapaxes(Finv, -1, -2)
    lnJ = np.log(J)[..., None, None]
    return m.mu * (F - FinvT) + m.lam * lnJ * FinvT


def material_tangent(F, m: MaterialParams):
    """``A[..., i, J, k, L] = dP_iJ / dF_kL``."""
    F, J, Finv = _kinematics(F)
    lnJ = np.log(J)[..., None, None, None, None]
    eye = np.eye(2)
    A = m.mu * np.einsum("ik,JL->iJkL", eye, eye)
    A = A + (m.mu - m.lam * lnJ) * np.einsum("...Jk,...Li->...iJkL", Finv, Finv)
    A = A + m.lam * np.einsum("...Ji,...Lk->...iJkL", Finv, Finv)
    return A


def cauchy_stress(F, m: MaterialParams):
    """3x3 Cauchy stress of the plane-strain embedding."""
    F, J, _ = _kinematics(F)
    shape = F.shape[:-2]
    F3 = np.zeros(shape + (3, 3))
    F3[..., :2, :2] = F
    F3[..., 2, 2] = 1.0
    B = F3 @ np.swapaxes(F3, -1, -2)
    eye = np.eye(3)
    lnJ = np.log(J)[..., None, None]
    return (m.mu * (B - eye) + m.lam * lnJ * eye) / J[..., None, None]


def von_mises(sigma):
    sigma = np.asarray(sigma, dtype=float)
    tr = np.trace(sigma, axis1=-2, axis2=-1)
    dev = sigma - tr[..., None, None] / 3.0 * np.eye(3)
    return np.sqrt(1.5 * np.einsum("...ij,...ij->...", dev, dev))


def von_mises_derivative(F, m: MaterialParams, floor=1e-30):
    """Von Mises stress and its derivative with respect to ``F``.

    Uses ``d(svm)/dF = (2 mu/J) s.F - svm F^-T`` with ``s = 1.5 dev(sigma)/svm``
    restricted to the in-plane block. ``floor`` regularises the derivative at
    the stress-free state.
    """
    F, J, Finv = _kinematics(F)
    sigma = cauchy_stress(F, m)
    svm = von_mises(sigma)
    tr = np.trace(sigma, axis1=-2, axis2=-1)
    dev = sigma - tr[..., None, None] / 3.0 * np.eye(3)
    s = 1.5 * dev[..., :2, :2] / np.maximum(svm, floor)[..., None, None]
    FinvT = np.swapaxes(Finv, -1, -2)
    dsvm = 2.0 * m.mu * (s @ F) / J[..., None, None] - svm[..., None, None] * FinvT
    return svm, dsvm


def eshelby_stress(F, m: MaterialParams):
    """Eshelby stress in energy-momentum form ``W0 I - F^T P`` (no body forces)."""
    W = strain_energy(F, m)
    P = piola_stress(F, m)
    F = np.asarray(F, dtype=float)
    return W[..., None, None] * np.eye(2) - np.swapaxes(F, -1, -2) @ P


@dataclass
class StressState:
    P: np.ndarray
    sigma: np.ndarray
    sigma_vm: np.ndarray
    Sigma: np.ndarray
    W0: np.ndarray


def stress_state(F, m: MaterialParams) -> StressState:
    sigma = cauchy_stress(F, m)
    return StressState(
        P=piola_stress(F, m),
        sigma=sigma,
        sigma_vm=von_mises(sigma),
        Sigma=eshelby_stress(F, m),
        W0=strain_energy(F, m),
    )
