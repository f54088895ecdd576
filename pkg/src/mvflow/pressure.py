"""Pressure laws p = h + q, their potentials, and convexity certificates.

The monotone part h is a power law (or tabulated samples); the optional
non-monotone part q is a C^1 bump compactly supported in (0, oo).  The
pressure potential splits the same way, P = H + Q, with

    H(rho) = rho * int_1^rho h(z)/z^2 dz,     Q likewise from q,

so that rho*H' - H = h and rho*H'' = h'.  The Bregman divergence of H is
the distance notion used by the stability machinery; the two certificates
below bound it from below by (rho - r)^2 / (1 + rho^gamma) and from above
against the h-increment, on user-supplied grids.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad

from .errors import DomainError, InsufficientGridError, InvalidLawError, QuadratureError

# Quadrature tolerances for potential evaluation.
QUAD_ABSTOL = 1e-10
QUAD_RELTOL = 1e-8

# Exclusion half-width around rho = r where the h-ratio is 0/0 to second order.
H_BOUND_EXCLUSION = 1e-6


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=float)


@dataclass(frozen=True)
class CompactBump:
    """C^1 bump q(rho) = amp * 16 t^2 (1-t)^2, t = (rho-q1)/(q2-q1), on [q1, q2].

    The quartic profile peaks at amp in the middle of the support and has
    vanishing slope at both endpoints, so q is C^1 on all of [0, oo).
    """

    q1: float
    q2: float
    amp: float

    def __post_init__(self):
        if not (self.q1 > 0.0 and self.q2 > self.q1):
            raise InvalidLawError(
                f"bump support must satisfy 0 < q1 < q2, got [{self.q1}, {self.q2}]"
            )

    @property
    def width(self) -> float:
        return self.q2 - self.q1

    def value(self, rho) -> np.ndarray:
        rho = _as_array(rho)
        t = (rho - self.q1) / self.width
        inside = (t >= 0.0) & (t <= 1.0)
        t = np.clip(t, 0.0, 1.0)
        out = self.amp * 16.0 * t * t * (1.0 - t) * (1.0 - t)
        return np.where(inside, out, 0.0)

    def slope(self, rho) -> np.ndarray:
        rho = _as_array(rho)
        t = (rho - self.q1) / self.width
        inside = (t >= 0.0) & (t <= 1.0)
        t = np.clip(t, 0.0, 1.0)
        dpsi = 32.0 * t * (1.0 - t) * (1.0 - 2.0 * t)
        return np.where(inside, self.amp * dpsi / self.width, 0.0)

    def _poly_coeffs(self) -> np.ndarray:
        # q(z) = 16 amp / w^4 * [(z - q1)(q2 - z)]^2, expanded in powers of z.
        p2 = np.polynomial.Polynomial([-self.q1 * self.q2, self.q1 + self.q2, -1.0])
        return (16.0 * self.amp / self.width**4) * (p2 * p2).coef

    def integral_over_z2(self, rho) -> np.ndarray:
        """Exact antiderivative evaluation of int_1^rho q(z)/z^2 dz."""
        d = self._poly_coeffs()  # degree 0..4 coefficients of q(z)

        def phi(z):
            # antiderivative of q(z)/z^2 on the support
            return (-d[0] / z + d[1] * np.log(z) + d[2] * z
                    + d[3] * z * z / 2.0 + d[4] * z**3 / 3.0)

        rho = _as_array(rho)
        hi = np.clip(rho, self.q1, self.q2)
        lo = np.clip(np.ones_like(rho), self.q1, self.q2)
        return phi(hi) - phi(lo)


@dataclass(frozen=True)
class PowerLawH:
    """Monotone part h(rho) = a * rho^gamma with a > 0, gamma >= 1."""

    a: float
    gamma: float

    def __post_init__(self):
        if not (self.a > 0.0):
            raise InvalidLawError(f"power-law coefficient must be positive, got a = {self.a}")
        if not (self.gamma >= 1.0):
            raise InvalidLawError(f"power-law exponent must satisfy gamma >= 1, got {self.gamma}")

    def value(self, rho) -> np.ndarray:
        rho = _as_array(rho)
        return self.a * np.power(rho, self.gamma)

    def slope(self, rho) -> np.ndarray:
        rho = _as_array(rho)
        return self.a * self.gamma * np.power(rho, self.gamma - 1.0)

    def curvature(self, rho) -> np.ndarray:
        rho = _as_array(rho)
        g = self.gamma
        return self.a * g * (g - 1.0) * np.power(rho, g - 2.0)

    def potential(self, rho) -> np.ndarray:
        """H(rho); closed form, with H(0) = 0 taken as the limit value."""
        rho = _as_array(rho)
        if self.gamma == 1.0:
            with np.errstate(divide="ignore", invalid="ignore"):
                out = self.a * rho * np.log(rho)
            return np.where(rho > 0.0, out, 0.0)
        return self.a * (np.power(rho, self.gamma) - rho) / (self.gamma - 1.0)

    def potential_slope(self, rho) -> np.ndarray:
        rho = _as_array(rho)
        if self.gamma == 1.0:
            return self.a * (np.log(rho) + 1.0)
        return self.a * (self.gamma * np.power(rho, self.gamma - 1.0) - 1.0) / (self.gamma - 1.0)

    def potential_curvature(self, rho) -> np.ndarray:
        rho = _as_array(rho)
        return self.a * self.gamma * np.power(rho, self.gamma - 2.0)


@dataclass(frozen=True)
class TabulatedH:
    """Monotone part from strictly increasing C^1 samples (PCHIP interpolant).

    gamma_tail declares the growth exponent used by certificates and by the
    sound-speed floor; samples must start at (0, 0) or interpolation is
    rejected, since h(0) = 0 is part of the admissibility conditions.
    """

    rho_samples: tuple
    h_samples: tuple
    gamma_tail: float = 2.0
    _spline: object = field(init=False, repr=False, compare=False, default=None)

    def __post_init__(self):
        from scipy.interpolate import PchipInterpolator

        r = np.asarray(self.rho_samples, dtype=float)
        h = np.asarray(self.h_samples, dtype=float)
        if r.ndim != 1 or r.shape != h.shape or r.size < 3:
            raise InvalidLawError("tabulated law needs >= 3 matching (rho, h) samples")
        if r[0] != 0.0 or h[0] != 0.0:
            raise InvalidLawError("tabulated law must start at (0, 0)")
        if np.any(np.diff(r) <= 0.0) or np.any(np.diff(h) <= 0.0):
            raise InvalidLawError("tabulated samples must be strictly increasing")
        if not (self.gamma_tail >= 1.0):
            raise InvalidLawError("gamma_tail must be >= 1")
        object.__setattr__(self, "_spline", PchipInterpolator(r, h, extrapolate=True))

    @property
    def a(self) -> float:
        # tail coefficient estimated from the last sample
        return float(self.h_samples[-1] / self.rho_samples[-1] ** self.gamma_tail)

    @property
    def gamma(self) -> float:
        return self.gamma_tail

    def value(self, rho) -> np.ndarray:
        return np.asarray(self._spline(_as_array(rho)), dtype=float)

    def slope(self, rho) -> np.ndarray:
        return np.asarray(self._spline.derivative()(_as_array(rho)), dtype=float)

    def curvature(self, rho) -> np.ndarray:
        return np.asarray(self._spline.derivative(2)(_as_array(rho)), dtype=float)

    def _int_over_z2(self, rho: float) -> float:
        lo, hi = (rho, 1.0) if rho < 1.0 else (1.0, rho)
        if lo == hi:
            return 0.0
        val, err = quad(lambda z: float(self._spline(z)) / z**2, lo, hi,
                        epsabs=QUAD_ABSTOL, epsrel=QUAD_RELTOL, limit=200)
        if err > QUAD_ABSTOL + QUAD_RELTOL * abs(val):
            raise QuadratureError(
                f"potential quadrature achieved {err:.3g} only", achieved=err)
        return val if rho >= 1.0 else -val

    def potential(self, rho) -> np.ndarray:
        rho = _as_array(rho)
        flat = np.atleast_1d(rho)
        out = np.array([r * self._int_over_z2(r) if r > 0.0 else 0.0 for r in flat])
        return out.reshape(rho.shape) if rho.shape else out[0]

    def potential_slope(self, rho) -> np.ndarray:
        rho = _as_array(rho)
        flat = np.atleast_1d(rho)
        out = np.array([self._int_over_z2(r) + float(self._spline(r)) / r for r in flat])
        return out.reshape(rho.shape) if rho.shape else out[0]

    def potential_curvature(self, rho) -> np.ndarray:
        rho = _as_array(rho)
        return self.slope(rho) / rho


@dataclass(frozen=True)
class PressureLaw:
    """p(rho) = h(rho) + q(rho); bump = None means q = 0."""

    h_part: PowerLawH | TabulatedH
    bump: CompactBump | None = None

    # -- pressure -----------------------------------------------------------
    def h(self, rho):
        return self.h_part.value(rho)

    def dh(self, rho):
        return self.h_part.slope(rho)

    def d2h(self, rho):
        return self.h_part.curvature(rho)

    def q(self, rho):
        if self.bump is None:
            return np.zeros_like(_as_array(rho))
        return self.bump.value(rho)

    def dq(self, rho):
        if self.bump is None:
            return np.zeros_like(_as_array(rho))
        return self.bump.slope(rho)

    def p(self, rho):
        return self.h(rho) + self.q(rho)

    def dp(self, rho):
        return self.dh(rho) + self.dq(rho)

    # -- potential ----------------------------------------------------------
    def H(self, rho):
        return self.h_part.potential(rho)

    def dH(self, rho):
        return self.h_part.potential_slope(rho)

    def d2H(self, rho):
        return self.h_part.potential_curvature(rho)

    def Q(self, rho):
        """Q(rho) = rho * int_1^rho q(z)/z^2 dz via the exact antiderivative."""
        rho = _as_array(rho)
        if self.bump is None:
            return np.zeros_like(rho)
        return rho * self.bump.integral_over_z2(rho)

    def dQ(self, rho):
        rho = _as_array(rho)
        if self.bump is None:
            return np.zeros_like(rho)
        with np.errstate(divide="ignore", invalid="ignore"):
            tail = np.where(rho > 0.0, self.bump.value(rho) / rho, 0.0)
        return self.bump.integral_over_z2(rho) + tail

    def P(self, rho):
        return self.H(rho) + self.Q(rho)

    def dP(self, rho):
        return self.dH(rho) + self.dQ(rho)

    @property
    def gamma(self) -> float:
        return self.h_part.gamma

    @property
    def a(self) -> float:
        return self.h_part.a


ZERO_BUMP = None


def build_bump_q(q1: float, q2: float, amp: float) -> CompactBump:
    """Construct the compactly supported C^1 pressure bump."""
    return CompactBump(q1=q1, q2=q2, amp=amp)


def pressure(law: PressureLaw, rho):
    """p(rho) = h(rho) + q(rho); rho must be >= 0."""
    rho = _as_array(rho)
    if np.any(rho < 0.0):
        raise DomainError("pressure requires rho >= 0")
    return law.p(rho)


def potential(law: PressureLaw, rho):
    """P(rho) = H(rho) + Q(rho) with Q by adaptive quadrature of q(z)/z^2.

    H uses the closed form when available.  The quadrature path is the
    contract; the exact bump antiderivative is cross-checked against it in
    the test suite and used internally where speed matters.
    """
    rho = _as_array(rho)
    if np.any(rho < 0.0):
        raise DomainError("potential requires rho >= 0")
    H = law.H(rho)
    if law.bump is None:
        return H

    bump = law.bump

    def q_over_z2(z):
        return float(bump.value(z)) / z**2

    flat = np.atleast_1d(rho)
    Q = np.zeros_like(flat)
    for i, r in enumerate(flat):
        if r <= 0.0:
            continue
        lo, hi = (r, 1.0) if r < 1.0 else (1.0, r)
        a = max(lo, bump.q1)
        b = min(hi, bump.q2)
        if a >= b:
            continue
        val, err = quad(q_over_z2, a, b, epsabs=QUAD_ABSTOL, epsrel=QUAD_RELTOL, limit=200)
        if err > QUAD_ABSTOL + QUAD_RELTOL * abs(val):
            raise QuadratureError(f"bump quadrature achieved {err:.3g} only", achieved=err)
        Q[i] = r * (val if r >= 1.0 else -val)
    Q = Q.reshape(rho.shape) if rho.shape else Q[0]
    return H + Q


def _power_bregman(a: float, gamma: float, rho: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Cancellation-free Bregman divergence of H for the power-law part.

    Writes B(rho, r) = a * r^gamma * g(x), x = rho/r, and sums the binomial
    series of g for x near 1; the direct formula is safe elsewhere.  For
    gamma = 2 the series terminates after one term, so B = a (rho - r)^2 to
    rounding accuracy even when rho is within one grid cell of r.
    """
    x = rho / r
    # (rho - r) is exact for rho within [r/2, 2r] (Sterbenz), so forming the
    # increment before dividing keeps d fully accurate in the series branch
    d = (rho - r) / r
    out = np.empty_like(x)

    near = np.abs(d) <= 0.5
    if np.any(near):
        dn = d[near]
        beta = np.full_like(dn, gamma / 2.0)
        term = beta * dn * dn
        acc = term.copy()
        dk = dn * dn
        k = 2
        while True:
            beta = beta * (gamma - k) / (k + 1.0)
            if not np.any(beta):
                break
            dk = dk * dn
            term = beta * dk
            acc += term
            k += 1
            if k > 200 or np.all(np.abs(term) <= 1e-18 * np.maximum(np.abs(acc), 1e-300)):
                break
        out[near] = acc

    far = ~near
    if np.any(far):
        xf = x[far]
        if gamma == 1.0:
            with np.errstate(divide="ignore", invalid="ignore"):
                g = np.where(xf > 0.0, xf * np.log(xf), 0.0) - (xf - 1.0)
        else:
            g = (np.power(xf, gamma) - 1.0 - gamma * (xf - 1.0)) / (gamma - 1.0)
        out[far] = g

    return a * np.power(r, gamma) * out


def h_increment(law: PressureLaw, rho, r):
    """h(rho) - h(r) - h'(r)(rho - r), evaluated without cancellation.

    For a power law this equals (gamma - 1) times the H-Bregman divergence,
    which the stable series core already provides; gamma = 1 makes h linear
    and the increment identically zero.
    """
    rho = np.asarray(rho, dtype=float)
    r = np.asarray(r, dtype=float)
    rho_b, r_b = np.broadcast_arrays(rho, r)
    if isinstance(law.h_part, PowerLawH):
        g = law.gamma
        if g == 1.0:
            return np.zeros_like(rho_b)
        return (g - 1.0) * _power_bregman(law.a, g, rho_b.astype(float), r_b.astype(float))
    return law.h(rho_b) - law.h(r_b) - law.dh(r_b) * (rho_b - r_b)


def bregman_H(law: PressureLaw, rho, r):
    """Bregman divergence H(rho) - H(r) - H'(r)(rho - r); rho >= 0, r > 0.

    Only the monotone part enters.  Nonnegative by convexity of H and zero
    iff rho = r.
    """
    rho = np.asarray(rho, dtype=float)
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0.0):
        raise DomainError("bregman_H requires r > 0")
    if np.any(rho < 0.0):
        raise DomainError("bregman_H requires rho >= 0")
    rho_b, r_b = np.broadcast_arrays(rho, r)
    if isinstance(law.h_part, PowerLawH):
        out = _power_bregman(law.a, law.gamma, rho_b.astype(float), r_b.astype(float))
    else:
        out = law.H(rho_b) - law.H(r_b) - law.dH(r_b) * (rho_b - r_b)
    return out if out.shape else float(out)


# -- certificates ------------------------------------------------------------

@dataclass(frozen=True)
class LowerBoundCertificate:
    """Grid witness for B(rho, r) >= c (rho-r)^2 on [r1, r2], >= c (1+rho^gamma) outside."""

    r1: float
    r2: float
    r_values: np.ndarray
    c_middle: np.ndarray
    c_outer: np.ndarray
    grid_min: float
    grid_max: float
    grid_step: float
    valid: bool

    def c_of_r(self) -> np.ndarray:
        return np.minimum(self.c_middle, self.c_outer)

    @property
    def c_min(self) -> float:
        return float(np.min(self.c_of_r()))


@dataclass(frozen=True)
class HBoundCertificate:
    """Grid witness for |h(rho)-h(r)-h'(r)(rho-r)| <= C(r) * B(rho, r)."""

    r_values: np.ndarray
    C_of_r: np.ndarray
    grid_min: float
    grid_max: float
    grid_step: float
    exclusion: float
    valid: bool

    @property
    def C_max(self) -> float:
        return float(np.max(self.C_of_r))


def _check_grid(rho_grid: np.ndarray, r_min: float, r_max: float) -> tuple[float, float]:
    if rho_grid.ndim != 1 or rho_grid.size < 8:
        raise InsufficientGridError("certification grid needs at least 8 points")
    if np.any(np.diff(rho_grid) <= 0.0):
        raise InsufficientGridError("certification grid must be strictly increasing")
    if not (0.0 < r_min <= r_max):
        raise DomainError(f"r range must satisfy 0 < r_min <= r_max, got [{r_min}, {r_max}]")
    r2 = 2.0 * r_max
    if rho_grid[0] > 1e-12:
        raise InsufficientGridError("grid must start at rho = 0")
    if rho_grid[-1] < 2.0 * r2:
        raise InsufficientGridError(
            f"grid must reach rho >= {2.0 * r2} = 2*r2 to witness the outer band")
    return r_min / 2.0, r2


def certify_lower_bound(law: PressureLaw, r_range: tuple[float, float], rho_grid,
                        n_r: int = 33) -> LowerBoundCertificate:
    """Largest grid-witnessed c(r) in the two-band lower bound for B(., r).

    On the middle band [r1, r2] = [r_min/2, 2 r_max] the bound is against
    (rho - r)^2; outside it is against 1 + rho^gamma.  Valid iff the minimum
    over the r sample set is strictly positive.
    """
    rho_grid = _as_array(rho_grid)
    r_min, r_max = float(r_range[0]), float(r_range[1])
    r1, r2 = _check_grid(rho_grid, r_min, r_max)

    r_values = np.linspace(r_min, r_max, n_r) if r_max > r_min else np.array([r_min])
    gamma = law.gamma
    c_mid = np.empty(r_values.size)
    c_out = np.empty(r_values.size)

    middle = (rho_grid >= r1) & (rho_grid <= r2)
    outer = ~middle
    for i, r in enumerate(r_values):
        breg = bregman_H(law, rho_grid, r)
        sep = np.abs(rho_grid - r) > 1e-9 * max(1.0, r)
        mid_mask = middle & sep
        if not np.any(mid_mask):
            raise InsufficientGridError(
                f"no middle-band grid points distinct from r = {r}; refine the grid")
        ratios = breg[mid_mask] / (rho_grid[mid_mask] - r) ** 2
        # the rho -> r limit B/(rho-r)^2 -> H''(r)/2 is a legitimate candidate
        limit = float(law.d2H(np.asarray(r))) / 2.0
        c_mid[i] = min(float(np.min(ratios)), limit)
        if np.any(outer):
            c_out[i] = float(np.min(breg[outer] / (1.0 + rho_grid[outer] ** gamma)))
        else:
            c_out[i] = np.inf

    step = float(np.median(np.diff(rho_grid)))
    valid = bool(np.min(np.minimum(c_mid, c_out)) > 0.0)
    return LowerBoundCertificate(r1=r1, r2=r2, r_values=r_values, c_middle=c_mid,
                                 c_outer=c_out, grid_min=float(rho_grid[0]),
                                 grid_max=float(rho_grid[-1]), grid_step=step, valid=valid)


def certify_h_bound(law: PressureLaw, r_range: tuple[float, float], rho_grid,
                    n_r: int = 33, exclusion: float = H_BOUND_EXCLUSION) -> HBoundCertificate:
    """Smallest grid-witnessed C(r) with |h-increment| <= C(r) * B(rho, r).

    A band |rho - r| < exclusion is skipped: both sides vanish to second
    order there and the ratio is numerically 0/0.
    """
    rho_grid = _as_array(rho_grid)
    r_min, r_max = float(r_range[0]), float(r_range[1])
    _check_grid(rho_grid, r_min, r_max)

    r_values = np.linspace(r_min, r_max, n_r) if r_max > r_min else np.array([r_min])
    C = np.empty(r_values.size)
    valid = True
    for i, r in enumerate(r_values):
        mask = np.abs(rho_grid - r) >= exclusion
        breg = bregman_H(law, rho_grid[mask], r)
        hinc = np.abs(h_increment(law, rho_grid[mask], r))
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios = np.where(breg > 0.0, hinc / breg, np.inf)
        C[i] = float(np.max(ratios))
        if not np.isfinite(C[i]):
            valid = False

    step = float(np.median(np.diff(rho_grid)))
    return HBoundCertificate(r_values=r_values, C_of_r=C, grid_min=float(rho_grid[0]),
                             grid_max=float(rho_grid[-1]), grid_step=step,
                             exclusion=exclusion, valid=valid)


def certificate_rows(lower: LowerBoundCertificate, hbound: HBoundCertificate):
    """Rows (r, c_middle, c_outer, C_ratio, valid) for the certificate CSV."""
    if lower.r_values.shape != hbound.r_values.shape or \
            not np.allclose(lower.r_values, hbound.r_values):
        raise DomainError("certificates were built over different r samples")
    ok = lower.valid and hbound.valid
    return [
        (float(r), float(cm), float(co), float(cr), ok)
        for r, cm, co, cr in zip(lower.r_values, lower.c_middle, lower.c_outer,
                                 hbound.C_of_r)
    ]


# -- serialization ------------------------------------------------------------

def law_to_config(law: PressureLaw) -> dict:
    """Flatten a law into dotted key/value pairs for the text config format."""
    out: dict[str, str] = {}
    if isinstance(law.h_part, PowerLawH):
        out["law.kind"] = "power"
        out["law.a"] = repr(float(law.h_part.a))
        out["law.gamma"] = repr(float(law.h_part.gamma))
    else:
        out["law.kind"] = "tabulated"
        out["law.rho"] = ",".join(repr(float(v)) for v in law.h_part.rho_samples)
        out["law.h"] = ",".join(repr(float(v)) for v in law.h_part.h_samples)
        out["law.gamma"] = repr(float(law.h_part.gamma_tail))
    if law.bump is not None:
        out["law.bump.q1"] = repr(float(law.bump.q1))
        out["law.bump.q2"] = repr(float(law.bump.q2))
        out["law.bump.A"] = repr(float(law.bump.amp))
    return out


def law_from_config(cfg: dict) -> PressureLaw:
    """Inverse of law_to_config; raises InvalidLawError on bad parameters."""
    kind = cfg.get("law.kind", "power")
    if kind == "power":
        try:
            a = float(cfg["law.a"])
            gamma = float(cfg["law.gamma"])
        except KeyError as e:
            raise InvalidLawError(f"power law config missing {e}") from e
        h_part: PowerLawH | TabulatedH = PowerLawH(a=a, gamma=gamma)
    elif kind == "tabulated":
        try:
            rho = tuple(float(v) for v in cfg["law.rho"].split(","))
            h = tuple(float(v) for v in cfg["law.h"].split(","))
        except KeyError as e:
            raise InvalidLawError(f"tabulated law config missing {e}") from e
        h_part = TabulatedH(rho_samples=rho, h_samples=h,
                            gamma_tail=float(cfg.get("law.gamma", 2.0)))
    else:
        raise InvalidLawError(f"unknown law kind '{kind}'")

    bump = None
    if "law.bump.q1" in cfg or "law.bump.q2" in cfg or "law.bump.A" in cfg:
        try:
            bump = CompactBump(q1=float(cfg["law.bump.q1"]), q2=float(cfg["law.bump.q2"]),
                               amp=float(cfg["law.bump.A"]))
        except KeyError as e:
            raise InvalidLawError(f"bump config missing {e}") from e
    return PressureLaw(h_part=h_part, bump=bump)
