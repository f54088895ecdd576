"""Small tensor algebra used by the stress and stability machinery.

Matrices are numpy arrays whose LAST two axes are the tensor indices, so a
field of d x d matrices over a grid has shape (..., d, d) and every routine
broadcasts over the leading axes.
"""
from __future__ import annotations

import numpy as np

from .errors import DomainError


def _dim(A: np.ndarray) -> int:
    A = np.asarray(A, dtype=float)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise DomainError(f"expected square matrices on the last two axes, got {A.shape}")
    return A.shape[-1]


def trace(A: np.ndarray) -> np.ndarray:
    return np.trace(np.asarray(A, dtype=float), axis1=-2, axis2=-1)


def traceless(A: np.ndarray) -> np.ndarray:
    """A + A^T - (2/d) tr(A) I.

    Symmetrizes and removes the trace; in d = 1 this is identically zero,
    which is why the trace part carries all the viscous dissipation there.
    Satisfies T(A):T(A) = 2 T(A):A.
    """
    A = np.asarray(A, dtype=float)
    d = _dim(A)
    eye = np.eye(d)
    tr = trace(A)
    return A + np.swapaxes(A, -1, -2) - (2.0 / d) * tr[..., None, None] * eye


def frobenius(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Componentwise contraction A:B summed over the matrix axes."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    return np.sum(A * B, axis=(-2, -1))


def stress(D: np.ndarray, mu: float, lam: float) -> np.ndarray:
    """Newtonian stress S(D) = mu (D - tr(D)/d I) + lam tr(D) I for symmetric D."""
    D = np.asarray(D, dtype=float)
    d = _dim(D)
    if mu < 0.0 or lam <= 0.0:
        raise DomainError(f"viscosities must satisfy mu >= 0, lam > 0, got mu={mu}, lam={lam}")
    eye = np.eye(d)
    tr = trace(D)[..., None, None]
    return mu * (D - tr * eye / d) + lam * tr * eye


def stress_power(D: np.ndarray, mu: float, lam: float) -> np.ndarray:
    """S(D):D = mu |D - tr(D)/d I|^2 + lam tr(D)^2 >= 0."""
    return frobenius(stress(D, mu, lam), np.asarray(D, dtype=float))
