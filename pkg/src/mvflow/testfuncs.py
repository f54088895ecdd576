"""Space-time test functions with analytic derivatives.

Families are tensor products of a spatial factor and a time factor.  Spatial
factors for momentum tests vanish at both walls; the generic family used for
the density equations does not need to.  Every function carries evaluators
for its value, time derivative, and space derivative, so residual quadrature
never differentiates numerically.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SpaceTimeFunction:
    """Scalar test function psi(t, x) = f(x) * g(t) with analytic derivatives."""

    id: str
    f: object
    df: object
    g: object
    dg: object
    vanishes_at_walls: bool
    length: float

    def value(self, t: float, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.f(x), dtype=float) * float(self.g(t))

    def dt(self, t: float, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.f(x), dtype=float) * float(self.dg(t))

    def dx(self, t: float, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.df(x), dtype=float) * float(self.g(t))


_TIME_FACTORS = (
    ("1", lambda t: 1.0, lambda t: 0.0),
    ("t", lambda t: t, lambda t: 1.0),
    ("1+t", lambda t: 1.0 + t, lambda t: 1.0),
)


def _combine(space_factors, length, vanishes):
    out = []
    for sid, f, df in space_factors:
        for tid, g, dg in _TIME_FACTORS:
            out.append(SpaceTimeFunction(id=f"{sid}*{tid}", f=f, df=df, g=g, dg=dg,
                                         vanishes_at_walls=vanishes, length=length))
    return out


def density_family(length: float, k_max: int = 2) -> list[SpaceTimeFunction]:
    """Test functions for the density equations; free values at the walls."""
    space = [
        ("1", lambda x: np.ones_like(np.asarray(x, dtype=float)),
         lambda x: np.zeros_like(np.asarray(x, dtype=float))),
        ("x/L", lambda x, L=length: np.asarray(x, dtype=float) / L,
         lambda x, L=length: np.full_like(np.asarray(x, dtype=float), 1.0 / L)),
    ]
    for k in range(1, k_max + 1):
        w = k * np.pi / length
        space.append((f"cos({k}pi x/L)",
                      lambda x, w=w: np.cos(w * np.asarray(x, dtype=float)),
                      lambda x, w=w: -w * np.sin(w * np.asarray(x, dtype=float))))
    return _combine(space, length, vanishes=False)


def momentum_family(length: float, k_max: int = 2) -> list[SpaceTimeFunction]:
    """Test functions vanishing at both walls, for the momentum equation."""
    space = [
        ("x/L(1-x/L)",
         lambda x, L=length: (np.asarray(x, dtype=float) / L)
         * (1.0 - np.asarray(x, dtype=float) / L),
         lambda x, L=length: (1.0 - 2.0 * np.asarray(x, dtype=float) / L) / L),
    ]
    for k in range(1, k_max + 1):
        w = k * np.pi / length
        space.append((f"sin({k}pi x/L)",
                      lambda x, w=w: np.sin(w * np.asarray(x, dtype=float)),
                      lambda x, w=w: w * np.cos(w * np.asarray(x, dtype=float))))
    return _combine(space, length, vanishes=True)


def compatibility_family(length: float) -> list[SpaceTimeFunction]:
    """Symmetric matrix test fields (scalars in 1D), constant member included."""
    w = np.pi / length
    space = [
        ("1", lambda x: np.ones_like(np.asarray(x, dtype=float)),
         lambda x: np.zeros_like(np.asarray(x, dtype=float))),
        ("sin(pi x/L)",
         lambda x, w=w: np.sin(w * np.asarray(x, dtype=float)),
         lambda x, w=w: w * np.cos(w * np.asarray(x, dtype=float))),
    ]
    return _combine(space, length, vanishes=False)
