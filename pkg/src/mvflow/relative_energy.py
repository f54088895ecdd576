"""Relative energy between an empirical measure and a smooth comparison flow.

Evaluates the modulated energy E(tau), the four remainder integrals that
drive its growth, grid-witnessed constants turning each remainder into a
bound by C * int E plus an absorbable share of the viscous trace block, and
the final exponential-growth verdict with its empirical counterpart.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (CannotBoundError, DomainError, InvalidBandError,
                     ReferenceInvalidError)
from .measures import DiscreteYoungMeasure
from .pressure import (HBoundCertificate, LowerBoundCertificate, PressureLaw,
                       bregman_H, h_increment, potential)
from .solver import StrongSolutionRef

# Half-width of the band around s = r excluded from ratio scans; both sides
# of the scanned ratios vanish to second order there.
SCAN_EXCLUSION = 1e-6


def _check_alignment(measure: DiscreteYoungMeasure, ref: StrongSolutionRef) -> None:
    if measure.times.shape != ref.times.shape or \
            not np.allclose(measure.times, ref.times, atol=1e-12, rtol=0.0):
        raise ReferenceInvalidError(
            "comparison solution sampled on different times than the measure")
    if measure.x.shape != ref.x.shape or \
            not np.allclose(measure.x, ref.x, atol=1e-12, rtol=0.0):
        raise ReferenceInvalidError(
            "comparison solution lives on a different grid than the measure")
    if np.min(ref.r) <= 0.0:
        raise ReferenceInvalidError("comparison density is not strictly positive")


def relative_energy_series(measure: DiscreteYoungMeasure, law: PressureLaw,
                           ref: StrongSolutionRef) -> np.ndarray:
    """E(tau_k) = int < 1/2 s (v-U)^2 + B_H(s, r) > dx at every sample time."""
    _check_alignment(measure, ref)
    kin = 0.5 * measure.S * (measure.V - ref.U) ** 2
    pot = bregman_H(law, measure.S, ref.r)
    integrand = np.mean(kin + pot, axis=0)
    if not np.all(np.isfinite(integrand)):
        raise DomainError("relative energy integrand is not finite")
    return np.sum(integrand, axis=1) * measure.dx


def relative_energy(measure: DiscreteYoungMeasure, law: PressureLaw,
                    ref: StrongSolutionRef, tau: float) -> float:
    """Modulated energy distance to (r, U) at a single sample time."""
    k = measure.time_index(tau)
    series = relative_energy_series(measure, law, ref)
    return float(series[k])


# -- estimator configuration -----------------------------------------------------

@dataclass(frozen=True)
class EstimatorConfig:
    """Split parameters and scan controls for the remainder bounds.

    eps is the Young split weight on the bump mismatch term; delta_split the
    weight on the low-density tail of the density-velocity cross term.  Both
    default to fractions of the viscosity so the absorbed trace terms stay
    strictly below the dissipation block that must swallow them (None means
    resolve at evaluation time).
    """

    eps: float | None = None
    delta_split: float | None = None
    band_margin: float = 0.05
    width_frac: float = 0.1
    scan_points: int = 2001
    scan_r_points: int = 41
    guard: float = 1.01
    verdict_tol: float = 1e-9
    floor_in: float = 1e-12
    floor_out_scale: float = 1e-8

    def __post_init__(self):
        if self.eps is not None and not self.eps > 0.0:
            raise DomainError(f"eps must be > 0, got {self.eps}")
        if self.delta_split is not None and not self.delta_split > 0.0:
            raise DomainError(f"delta_split must be > 0, got {self.delta_split}")
        if not 0.0 < self.band_margin < 1.0:
            raise DomainError("band_margin must lie in (0, 1)")
        if not 0.0 < self.width_frac <= 0.5:
            raise DomainError("width_frac must lie in (0, 0.5]")
        if self.scan_points < 64 or self.scan_r_points < 3:
            raise DomainError("scan grids too coarse to witness anything")
        if self.guard < 1.0:
            raise DomainError("guard factor must be >= 1")


def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


@dataclass(frozen=True)
class CutoffBand:
    """C^1 partition of unity psi + w1 + w2 = 1 over density.

    psi is 1 on [r1, r2] and supported in (r1 - width, r2 + width); w1 covers
    the low tail [0, r1), w2 the high tail (r2, infinity).
    """

    r1: float
    r2: float
    width: float

    def w1(self, s):
        s = np.asarray(s, dtype=float)
        return 1.0 - _smoothstep((s - (self.r1 - self.width)) / self.width)

    def w2(self, s):
        s = np.asarray(s, dtype=float)
        return _smoothstep((s - self.r2) / self.width)

    def psi(self, s):
        return 1.0 - self.w1(s) - self.w2(s)


def build_cutoff(law: PressureLaw, ref: StrongSolutionRef,
                 cfg: EstimatorConfig = EstimatorConfig()) -> CutoffBand:
    """Density band that strictly brackets the comparison range and the bump.

    The lower edge sits below half the smaller of (bump onset / 2, inf r / 2);
    the upper edge above twice the larger of (bump end, sup r).
    """
    r_inf = float(np.min(ref.r))
    r_sup = float(np.max(ref.r))
    lo = [r_inf / 2.0]
    hi = [2.0 * r_sup]
    if law.bump is not None:
        lo.append(law.bump.q1 / 2.0)
        hi.append(2.0 * law.bump.q2)
    r1 = (1.0 - cfg.band_margin) * min(lo)
    r2 = (1.0 + cfg.band_margin) * max(hi)
    width = cfg.width_frac * r1
    if r1 <= 0.0 or r1 - width <= 0.0:
        raise InvalidBandError(f"cutoff lower edge {r1} leaves no room above zero")
    if r2 <= r1 + width:
        raise InvalidBandError(f"cutoff band [{r1}, {r2}] is degenerate")
    return CutoffBand(r1=r1, r2=r2, width=width)


# -- grid-witnessed constants ----------------------------------------------------

def _scan_max(law: PressureLaw, s_grid: np.ndarray, r_grid: np.ndarray,
              num_fn, extra_candidates=()) -> float:
    """max over the scan grid of num(s, r) / B(s, r), diagonal excluded.

    extra_candidates supplies analytic s -> r limit values where the ratio
    has a removable singularity.
    """
    B = bregman_H(law, s_grid[None, :], r_grid[:, None])
    num = num_fn(s_grid[None, :], r_grid[:, None])
    sep = np.abs(s_grid[None, :] - r_grid[:, None]) > \
        SCAN_EXCLUSION * np.maximum(1.0, r_grid[:, None])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(sep & (B > 0.0), num / B, 0.0)
    best = float(np.max(ratios)) if ratios.size else 0.0
    for c in extra_candidates:
        best = max(best, float(c))
    if not np.isfinite(best):
        raise CannotBoundError("ratio scan diverged; the witnessed bound is empty")
    return best


def _trace_poincare_constant(measure: DiscreteYoungMeasure,
                             ref: StrongSolutionRef, guard: float) -> float:
    """Witnessed constant with int <(v-U)^2> <= c * int <(D - dU/dx)^2> per time.

    Falls back to the closed-form (L/pi)^2 of zero-boundary profiles when the
    data gives no usable quotient (both sides at machine zero).
    """
    num = np.sum(np.mean((measure.V - ref.U) ** 2, axis=0), axis=1) * measure.dx
    den = np.sum(np.mean((measure.D - ref.dU_dx[None]) ** 2, axis=0), axis=1) * measure.dx
    usable = den > 1e-14 * np.maximum(1.0, num)
    if np.any(num[~usable] > 1e-12 * max(1.0, float(np.max(num)))):
        raise DomainError(
            "velocity mismatch with vanishing gradient mismatch; "
            "trace quotient is unbounded on this data")
    if not np.any(usable):
        return (measure.length / math.pi) ** 2
    return guard * float(np.max(num[usable] / den[usable]))


@dataclass(frozen=True)
class RemainderReport:
    """Remainder integrals, their bounds, slacks, and every constant used."""

    times: np.ndarray
    E_mv: np.ndarray
    E_int: np.ndarray
    trace_int: np.ndarray
    I2: np.ndarray
    I3: np.ndarray
    I4: np.ndarray
    I5: np.ndarray
    bound2: np.ndarray
    bound3: np.ndarray
    bound4: np.ndarray
    bound5: np.ndarray
    slack2: np.ndarray
    slack3: np.ndarray
    slack4: np.ndarray
    slack5: np.ndarray
    constants: dict
    cutoff: CutoffBand

    def at(self, tau: float) -> dict:
        k = int(np.argmin(np.abs(self.times - tau)))
        if abs(self.times[k] - tau) > 1e-9 * max(1.0, float(self.times[-1])):
            raise DomainError(f"tau {tau} is not a sample time")
        out = {}
        for name in ("I2", "I3", "I4", "I5", "bound2", "bound3", "bound4",
                     "bound5", "slack2", "slack3", "slack4", "slack5"):
            out[name] = float(getattr(self, name)[k])
        return out


def _cumtrapz(f: np.ndarray, t: np.ndarray) -> np.ndarray:
    out = np.zeros_like(f)
    if t.size > 1:
        out[1:] = np.cumsum(0.5 * (f[1:] + f[:-1]) * np.diff(t))
    return out


def _require_certificates(lower: LowerBoundCertificate, hbound: HBoundCertificate,
                          r_inf: float, r_sup: float, s_max: float) -> None:
    if lower is None or hbound is None:
        raise CannotBoundError(
            "both convexity certificates are required to bound the remainders")
    if not (lower.valid and hbound.valid):
        raise CannotBoundError("certificate carries no positive witness")
    tiny = 1e-12
    for cert, name in ((lower, "lower-bound"), (hbound, "increment-ratio")):
        if cert.r_values[0] > r_inf + tiny or cert.r_values[-1] < r_sup - tiny:
            raise InvalidBandError(
                f"{name} certificate covers r in [{cert.r_values[0]:.6g}, "
                f"{cert.r_values[-1]:.6g}] but the comparison density spans "
                f"[{r_inf:.6g}, {r_sup:.6g}]")
        if cert.grid_max < s_max:
            raise InvalidBandError(
                f"{name} certificate grid tops out at {cert.grid_max:.6g} "
                f"below the observed density {s_max:.6g}")


def remainder_terms(measure: DiscreteYoungMeasure, law: PressureLaw, lam: float,
                    ref: StrongSolutionRef, lower: LowerBoundCertificate,
                    hbound: HBoundCertificate,
                    cfg: EstimatorConfig = EstimatorConfig()) -> RemainderReport:
    """Evaluate the four growth integrals and their witnessed bounds.

    Each bound has the shape K * int_0^tau E dt plus, for the split terms, an
    absorbable multiple of the viscous trace block int int <(D - dU/dx)^2>.
    The absorbed multiples must sum below lam, the coefficient the energy
    balance actually provides; eps and delta_split default to lam/2 and
    lam/(8 c_tr) so the total stays at 5/8 of it.
    """
    _check_alignment(measure, ref)
    if lam <= 0.0:
        raise DomainError(f"viscosity must be > 0, got {lam}")
    r_inf = float(np.min(ref.r))
    r_sup = float(np.max(ref.r))
    s_max = float(np.max(measure.S))
    _require_certificates(lower, hbound, r_inf, r_sup, s_max)
    cutoff = build_cutoff(law, ref, cfg)

    # witnessed constants ---------------------------------------------------
    c_tr = _trace_poincare_constant(measure, ref, cfg.guard)
    eps = cfg.eps if cfg.eps is not None else lam / 2.0
    delta_split = cfg.delta_split if cfg.delta_split is not None \
        else lam / (8.0 * c_tr)
    absorbed = eps + delta_split * c_tr
    if absorbed >= lam:
        raise DomainError(
            f"split weights absorb {absorbed:.6g} of trace dissipation "
            f"but the balance only provides {lam:.6g}")

    r_grid = np.linspace(r_inf, r_sup, cfg.scan_r_points)
    s_cap = max(2.0 * (cutoff.r2 + cutoff.width), 1.2 * s_max)
    s_lo = cutoff.r1 - cutoff.width

    s_psi = np.linspace(s_lo, cutoff.r2 + cutoff.width, cfg.scan_points)
    alpha_psi = cfg.guard * _scan_max(
        law, s_psi, r_grid,
        lambda s, r: cutoff.psi(s) * (s - r) ** 2 / np.sqrt(s),
        extra_candidates=[
            cutoff.psi(r) * 2.0 / (math.sqrt(r) * float(law.d2H(np.asarray(r))))
            for r in r_grid])

    s_low = np.linspace(0.0, cutoff.r1, cfg.scan_points)
    A_w1 = cfg.guard * _scan_max(
        law, s_low, r_grid, lambda s, r: cutoff.w1(s) ** 2 * (s - r) ** 2)

    s_high = np.linspace(cutoff.r2, s_cap, cfg.scan_points)
    A_w2 = cfg.guard * _scan_max(law, s_high, r_grid,
                                 lambda s, r: cutoff.w2(s) * s)

    if law.bump is None:
        Cq = 0.0
    else:
        s_all = np.linspace(0.0, s_cap, 2 * cfg.scan_points)
        Cq = cfg.guard * _scan_max(
            law, s_all, r_grid,
            lambda s, r: (law.q(s) - law.q(r)) ** 2,
            extra_candidates=[
                2.0 * float(law.dq(np.asarray(r))) ** 2
                / float(law.d2H(np.asarray(r))) for r in r_grid])

    w3 = (lam * ref.d2U_dx2 - law.dq(ref.r) * ref.dr_dx) / ref.r
    w3_sup = float(np.max(np.abs(w3)))
    dU_sup = float(np.max(np.abs(ref.dU_dx)))
    U_C1 = float(ref.norms["U_C1"])

    K2 = max(U_C1, 2.0 * dU_sup)
    K3 = w3_sup * max(alpha_psi / 2.0, 1.0 / math.sqrt(s_lo)) \
        + w3_sup ** 2 * A_w1 / (4.0 * delta_split) \
        + w3_sup * max(A_w2 / 2.0, 1.0)
    K4 = dU_sup * float(hbound.C_max)
    K5 = Cq / (4.0 * eps)

    # remainder integrals ---------------------------------------------------
    dx, times = measure.dx, measure.times
    S, V, D = measure.S, measure.V, measure.D

    E_mv = relative_energy_series(measure, law, ref)
    E_int = _cumtrapz(E_mv, times)

    trace_rate = np.sum(np.mean((D - ref.dU_dx[None]) ** 2, axis=0), axis=1) * dx
    trace_int = _cumtrapz(trace_rate, times)

    m2 = np.mean(S * (V - ref.U) ** 2, axis=0)
    I2 = _cumtrapz(-np.sum(m2 * ref.dU_dx, axis=1) * dx, times)

    m3 = np.mean((S - ref.r) * (ref.U - V), axis=0)
    I3 = _cumtrapz(np.sum(m3 * w3, axis=1) * dx, times)

    m4 = np.mean(h_increment(law, S, ref.r), axis=0)
    I4 = _cumtrapz(-np.sum(m4 * ref.dU_dx, axis=1) * dx, times)

    if law.bump is None:
        I5 = np.zeros_like(E_mv)
    else:
        m5 = np.mean((law.q(S) - law.q(ref.r)) * (D - ref.dU_dx[None]), axis=0)
        I5 = _cumtrapz(np.sum(m5, axis=1) * dx, times)

    bound2 = K2 * E_int
    bound3 = K3 * E_int + delta_split * c_tr * trace_int
    bound4 = K4 * E_int
    bound5 = K5 * E_int + eps * trace_int

    constants = {
        "K2": K2, "K3": K3, "K4": K4, "K5": K5,
        "w3_sup": w3_sup, "dU_sup": dU_sup, "U_C1": U_C1,
        "alpha_psi": alpha_psi, "A_w1": A_w1, "A_w2": A_w2, "Cq": Cq,
        "C_max": float(hbound.C_max), "c_lower": float(lower.c_min),
        "c_trace": c_tr, "eps": eps, "delta_split": delta_split,
        "absorbed_trace": absorbed, "lam": lam,
        "r1_cut": cutoff.r1, "r2_cut": cutoff.r2, "cut_width": cutoff.width,
    }
    return RemainderReport(
        times=times.copy(), E_mv=E_mv, E_int=E_int, trace_int=trace_int,
        I2=I2, I3=I3, I4=I4, I5=I5,
        bound2=bound2, bound3=bound3, bound4=bound4, bound5=bound5,
        slack2=bound2 - np.abs(I2), slack3=bound3 - np.abs(I3),
        slack4=bound4 - np.abs(I4), slack5=bound5 - np.abs(I5),
        constants=constants, cutoff=cutoff)


# -- exponential growth verdict ---------------------------------------------------

@dataclass(frozen=True)
class RelativeEnergyReport:
    """Stability verdict: empirical growth factor against the certified one."""

    times: np.ndarray
    E_mv: np.ndarray
    D: np.ndarray
    remainders: RemainderReport
    constants: dict
    lambda_emp: float
    lambda_cert: float
    C_total: float
    E_ref: float
    uniqueness_mode: bool
    passed: bool

    def rows(self):
        """CSV rows (tau, E, D, I2..I5, bound2..5, slack2..5)."""
        hdr = ["tau", "E_mv", "D",
               "I2", "I3", "I4", "I5",
               "bound2", "bound3", "bound4", "bound5",
               "slack2", "slack3", "slack4", "slack5"]
        rem = self.remainders
        rows = []
        for k in range(self.times.size):
            rows.append((float(self.times[k]), float(self.E_mv[k]),
                         float(self.D[k]),
                         float(rem.I2[k]), float(rem.I3[k]),
                         float(rem.I4[k]), float(rem.I5[k]),
                         float(rem.bound2[k]), float(rem.bound3[k]),
                         float(rem.bound4[k]), float(rem.bound5[k]),
                         float(rem.slack2[k]), float(rem.slack3[k]),
                         float(rem.slack4[k]), float(rem.slack5[k])))
        return hdr, rows

    def verdict_line(self) -> str:
        mode = "uniqueness" if self.uniqueness_mode else "growth"
        consts = " ".join(f"{k}={v:.6g}" for k, v in sorted(self.constants.items())
                          if isinstance(v, float))
        return (f"verdict={'pass' if self.passed else 'fail'} mode={mode} "
                f"lambda_emp={self.lambda_emp:.6g} "
                f"lambda_cert={self.lambda_cert:.6g} {consts}")


def gronwall_verdict(times: np.ndarray, E_mv: np.ndarray, D: np.ndarray,
                     remainders: RemainderReport, ref: StrongSolutionRef,
                     law: PressureLaw, xi: np.ndarray | None = None,
                     cfg: EstimatorConfig = EstimatorConfig()) -> RelativeEnergyReport:
    """Compare max (E + D) against exp(C_total T) times the initial energy.

    C_total collects the coefficients of int E from every remainder bound plus
    sup(xi) * |U|_C1 for the concentration pairing.  When E(0) sits below the
    input floor the run is graded by the uniqueness clause instead: E + D must
    stay below floor_out_scale * (1 + reference energy) throughout.
    """
    times = np.asarray(times, dtype=float)
    E_mv = np.asarray(E_mv, dtype=float)
    D = np.asarray(D, dtype=float)
    if not (times.shape == E_mv.shape == D.shape == remainders.times.shape):
        raise DomainError("verdict series must share one common time grid")
    if not np.allclose(times, remainders.times, atol=1e-12, rtol=0.0):
        raise DomainError("verdict series sampled on different times "
                          "than the remainder report")
    if E_mv[0] < -1e-15:
        raise DomainError(f"initial relative energy is negative: {E_mv[0]}")

    k = remainders.constants
    xi_sup = float(np.max(xi)) if xi is not None and np.size(xi) else 0.0
    C_total = k["K2"] + k["K3"] + k["K4"] + k["K5"] + xi_sup * k["U_C1"]
    T = float(times[-1])
    lambda_cert = math.exp(C_total * T)

    # energy scale of the comparison flow, for the uniqueness floor
    e_ref_density = 0.5 * ref.r[0] * ref.U[0] ** 2 + potential(law, ref.r[0])
    E_ref = float(np.sum(e_ref_density) * ref.dx)

    total = E_mv + D
    E0 = float(E_mv[0])
    lambda_emp = float(np.max(total)) / max(E0, cfg.floor_in)

    uniqueness = E0 < cfg.floor_in
    if uniqueness:
        floor_out = cfg.floor_out_scale * (1.0 + E_ref)
        passed = bool(np.all(total < floor_out))
    else:
        passed = bool(lambda_emp <= lambda_cert + cfg.verdict_tol)

    constants = dict(k)
    constants.update({"C_total": C_total, "xi_sup": xi_sup, "T": T,
                      "E0": E0, "E_ref": E_ref})
    return RelativeEnergyReport(
        times=times.copy(), E_mv=E_mv.copy(), D=D.copy(),
        remainders=remainders, constants=constants,
        lambda_emp=lambda_emp, lambda_cert=lambda_cert, C_total=C_total,
        E_ref=E_ref, uniqueness_mode=uniqueness, passed=passed)
