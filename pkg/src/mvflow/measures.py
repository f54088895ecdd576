"""Empirical Young measures on the phase space (density, velocity, gradient).

A measure is assembled from an ensemble of trajectories sharing one
space-time sampling grid: each cell (t_k, x_i) holds one equally weighted
atom per member, with the gradient surrogate taken by the same
finite-difference operator the solver uses for its dissipation bookkeeping.

The weak-form residual evaluators integrate with midpoint sums in space and
the trapezoid rule in time.  Defects are estimated as tail differences along
an explicit refinement or regularization sequence, clipped at zero with the
pre-clip values logged; they are estimators of limit objects, not limits.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CannotEstimateError,
    DomainError,
    IncompatibleEnsembleError,
    InvalidTestFunctionError,
    ObservableDomainError,
    UnsupportedDimensionError,
)
from .pressure import PressureLaw
from .solver import Trajectory, gradient_1d
from .tensors import traceless


@dataclass(frozen=True)
class PhaseAtom:
    s: float
    v: float
    D: float
    w: float

    def __post_init__(self):
        if self.s < 0.0:
            raise DomainError(f"atom density must be nonnegative, got {self.s}")
        if not (0.0 < self.w <= 1.0):
            raise DomainError(f"atom weight must lie in (0, 1], got {self.w}")


@dataclass(frozen=True)
class DiscreteYoungMeasure:
    """Equal-weight empirical measure; arrays indexed (member, time, cell)."""

    times: np.ndarray
    x: np.ndarray
    dx: float
    length: float
    S: np.ndarray
    V: np.ndarray
    D: np.ndarray
    member_ids: tuple

    def __post_init__(self):
        k, nt, nx = self.S.shape
        if self.V.shape != (k, nt, nx) or self.D.shape != (k, nt, nx):
            raise IncompatibleEnsembleError("field arrays disagree in shape")
        if self.times.shape != (nt,) or self.x.shape != (nx,):
            raise IncompatibleEnsembleError("grid arrays disagree with fields")
        if len(self.member_ids) != k:
            raise IncompatibleEnsembleError("member id count mismatch")

    @property
    def n_members(self) -> int:
        return self.S.shape[0]

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.n_members, 1.0 / self.n_members)

    def atoms_at(self, k_t: int, k_x: int) -> list[PhaseAtom]:
        w = 1.0 / self.n_members
        return [PhaseAtom(s=float(self.S[j, k_t, k_x]), v=float(self.V[j, k_t, k_x]),
                          D=float(self.D[j, k_t, k_x]), w=w)
                for j in range(self.n_members)]

    def time_index(self, tau: float) -> int:
        idx = int(np.argmin(np.abs(self.times - tau)))
        if abs(self.times[idx] - tau) > 1e-9 * max(1.0, float(self.times[-1])):
            raise DomainError(
                f"tau {tau} is not a sample time (nearest {self.times[idx]})")
        return idx


def assemble(ensemble: list[Trajectory]) -> DiscreteYoungMeasure:
    """One atom per member per space-time cell, weights 1/K."""
    if len(ensemble) < 1:
        raise IncompatibleEnsembleError("ensemble must hold at least one member")
    first = ensemble[0]
    for j, traj in enumerate(ensemble):
        if traj.grid.n != first.grid.n or traj.grid.length != first.grid.length:
            raise IncompatibleEnsembleError(
                f"member {j} grid ({traj.grid.n}, {traj.grid.length}) differs")
        if traj.times.shape != first.times.shape or not np.allclose(
                traj.times, first.times, rtol=0.0, atol=1e-12):
            raise IncompatibleEnsembleError(f"member {j} sample times differ")

    k, nt, nx = len(ensemble), first.times.size, first.grid.n
    S = np.empty((k, nt, nx))
    V = np.empty((k, nt, nx))
    D = np.empty((k, nt, nx))
    for j, traj in enumerate(ensemble):
        S[j] = traj.rho
        V[j] = traj.u
        for kt in range(nt):
            D[j, kt] = gradient_1d(traj.u[kt], traj.grid.dx)
    return DiscreteYoungMeasure(times=first.times.copy(), x=first.grid.centers,
                                dx=first.grid.dx, length=first.grid.length,
                                S=S, V=V, D=D,
                                member_ids=tuple(range(k)))


def moment(measure: DiscreteYoungMeasure, g) -> np.ndarray:
    """Per-cell ensemble average of g(s, v, D); g must be numpy-vectorized."""
    with np.errstate(all="ignore"):
        vals = np.asarray(g(measure.S, measure.V, measure.D), dtype=float)
    if vals.shape != measure.S.shape:
        vals = np.broadcast_to(vals, measure.S.shape)
    bad = ~np.isfinite(vals)
    if np.any(bad):
        j, kt, kx = map(int, np.argwhere(bad)[0])
        raise ObservableDomainError(
            f"observable undefined at member {j}, time index {kt}, cell {kx} "
            f"(s={measure.S[j, kt, kx]:.6g})")
    return vals.mean(axis=0)


# -- renormalization functions ---------------------------------------------------

@dataclass(frozen=True)
class RenormFunction:
    """C1 function b with b'(s) = 0 beyond the threshold r_b."""

    b: object
    db: object
    r_b: float
    name: str = "b"

    def __post_init__(self):
        if not (self.r_b > 0.0):
            raise DomainError("r_b must be positive")
        probe = np.linspace(self.r_b * (1.0 + 1e-9), self.r_b * 50.0, 401)
        slopes = np.asarray(self.db(probe), dtype=float)
        if np.max(np.abs(slopes)) > 1e-12:
            raise DomainError(
                f"renormalization slope must vanish beyond r_b={self.r_b}, "
                f"max |b'| = {np.max(np.abs(slopes)):.3e}")


def renorm_constant(c: float = 1.0) -> RenormFunction:
    return RenormFunction(
        b=lambda s: np.full_like(np.asarray(s, dtype=float), c),
        db=lambda s: np.zeros_like(np.asarray(s, dtype=float)),
        r_b=1.0, name=f"const({c})")


def renorm_identity_truncated(r_b: float, width: float) -> RenormFunction:
    """b(s) = s below r_b - width, constant r_b - width/2 above r_b.

    The slope rolls off through the cubic smoothstep on [r_b - width, r_b],
    keeping b in C1.
    """
    if not (0.0 < width <= r_b):
        raise DomainError("need 0 < width <= r_b")
    a = r_b - width

    def db(s):
        s = np.asarray(s, dtype=float)
        t = np.clip((s - a) / width, 0.0, 1.0)
        return 1.0 - (3.0 * t**2 - 2.0 * t**3)

    def b(s):
        s = np.asarray(s, dtype=float)
        t = np.clip((s - a) / width, 0.0, 1.0)
        ramp = a + width * (t - t**3 + 0.5 * t**4)
        return np.where(s <= a, s, ramp)

    return RenormFunction(b=b, db=db, r_b=r_b, name=f"trunc(r_b={r_b})")


# -- weak-form residuals -----------------------------------------------------------

def _space_sum(field_1d: np.ndarray, dx: float) -> float:
    return float(np.sum(field_1d) * dx)


def _time_trapz(series: np.ndarray, times: np.ndarray) -> float:
    return float(np.trapezoid(series, times))


def _require_wall_zero(fn, length: float):
    walls = np.array([0.0, length])
    for t in (0.0, 0.5, 1.0):
        if np.max(np.abs(fn.value(t, walls))) > 1e-12:
            raise InvalidTestFunctionError(
                f"test function {fn.id} does not vanish at the walls")


def continuity_residual(measure: DiscreteYoungMeasure, psi, tau: float) -> float:
    """Mass form: [integral <s> psi]_0^tau - iint (<s> dpsi/dt + <s v> dpsi/dx)."""
    i = measure.time_index(tau)
    x, dx, times = measure.x, measure.dx, measure.times[: i + 1]
    s_mom = moment(measure, lambda s, v, D: s)
    sv_mom = moment(measure, lambda s, v, D: s * v)
    boundary = (_space_sum(s_mom[i] * psi.value(tau, x), dx)
                - _space_sum(s_mom[0] * psi.value(times[0], x), dx))
    interior = np.array([
        _space_sum(s_mom[k] * psi.dt(times[k], x)
                   + sv_mom[k] * psi.dx(times[k], x), dx)
        for k in range(i + 1)])
    return boundary - _time_trapz(interior, times)


def renorm_continuity_residual(measure: DiscreteYoungMeasure, b: RenormFunction,
                               psi, tau: float) -> float:
    """Renormalized mass form, including the <(s b' - b) tr D> psi source."""
    i = measure.time_index(tau)
    x, dx, times = measure.x, measure.dx, measure.times[: i + 1]
    b_mom = moment(measure, lambda s, v, D: b.b(s))
    bv_mom = moment(measure, lambda s, v, D: b.b(s) * v)
    src_mom = moment(measure, lambda s, v, D: (s * b.db(s) - b.b(s)) * D)
    boundary = (_space_sum(b_mom[i] * psi.value(tau, x), dx)
                - _space_sum(b_mom[0] * psi.value(times[0], x), dx))
    interior = np.array([
        _space_sum(b_mom[k] * psi.dt(times[k], x)
                   + bv_mom[k] * psi.dx(times[k], x), dx)
        for k in range(i + 1)])
    source = np.array([
        _space_sum(src_mom[k] * psi.value(times[k], x), dx)
        for k in range(i + 1)])
    return boundary - _time_trapz(interior, times) + _time_trapz(source, times)


def momentum_residual(measure: DiscreteYoungMeasure, law: PressureLaw, lam: float,
                      phi, tau: float, defect=None) -> tuple[float, float]:
    """Momentum form residual and the defect-pairing inequality slack.

    Returns (residual, slack) where slack = xi(tau) D(tau) |phi|_C1 minus the
    actual |<rM; dphi/dx>| at tau; slack must be nonnegative for a valid
    defect report.  With defect=None the concentration term is zero and the
    slack is reported as 0.
    """
    _require_wall_zero(phi, measure.length)
    i = measure.time_index(tau)
    x, dx, times = measure.x, measure.dx, measure.times[: i + 1]
    sv_mom = moment(measure, lambda s, v, D: s * v)
    svv_mom = moment(measure, lambda s, v, D: s * v * v)
    p_mom = moment(measure, lambda s, v, D: law.p(s))
    stress_mom = moment(measure, lambda s, v, D: lam * D)

    boundary = (_space_sum(sv_mom[i] * phi.value(tau, x), dx)
                - _space_sum(sv_mom[0] * phi.value(times[0], x), dx))
    interior = np.array([
        _space_sum(sv_mom[k] * phi.dt(times[k], x)
                   + svv_mom[k] * phi.dx(times[k], x)
                   + p_mom[k] * phi.dx(times[k], x)
                   - stress_mom[k] * phi.dx(times[k], x), dx)
        for k in range(i + 1)])
    residual = boundary - _time_trapz(interior, times)

    slack = 0.0
    if defect is not None:
        pairing = np.array([
            _space_sum(defect.rM_field[k] * phi.dx(times[k], x), dx)
            for k in range(i + 1)])
        residual -= _time_trapz(pairing, times)
        phi_c1 = max(
            float(np.max(np.abs(phi.value(t, x))
                         + np.abs(phi.dt(t, x)) + np.abs(phi.dx(t, x))))
            for t in times)
        slack = float(defect.xi[i] * defect.D_total[i] * phi_c1
                      - abs(pairing[i]))
    return residual, slack


def compatibility_residual(measure: DiscreteYoungMeasure, M, tau: float | None = None
                           ) -> float:
    """Gradient compatibility: -iint <v> dM/dx - iint <D> M."""
    i = measure.time_index(tau) if tau is not None else measure.times.size - 1
    x, dx, times = measure.x, measure.dx, measure.times[: i + 1]
    v_mom = moment(measure, lambda s, v, D: v)
    d_mom = moment(measure, lambda s, v, D: D)
    series = np.array([
        -_space_sum(v_mom[k] * M.dx(times[k], x), dx)
        - _space_sum(d_mom[k] * M.value(times[k], x), dx)
        for k in range(i + 1)])
    return _time_trapz(series, times)


def energy_inequality_slack(measure: DiscreteYoungMeasure, law: PressureLaw,
                            lam: float, defect, e_initial: float, tau: float,
                            cum_dissipation: np.ndarray | None = None) -> float:
    """Energy form slack: e_initial - <energy>(tau) - dissipation - D(tau).

    Nonnegative for valid data.  cum_dissipation, when given, is the
    per-member average of the solver's accumulated per-step dissipation
    series (length matching the sample times); otherwise the dissipation is
    the trapezoid integral of the measure moment lam <(tr D)^2>.
    """
    i = measure.time_index(tau)
    x, dx, times = measure.x, measure.dx, measure.times[: i + 1]
    energy_mom = moment(
        measure, lambda s, v, D: 0.5 * s * v * v + law.P(s))
    e_tau = _space_sum(energy_mom[i], dx)
    if cum_dissipation is not None:
        dis = float(cum_dissipation[i])
    else:
        dis_mom = moment(measure, lambda s, v, D: lam * D * D)
        series = np.array([_space_sum(dis_mom[k], dx) for k in range(i + 1)])
        dis = _time_trapz(series, times)
    d_tau = float(defect.D_total[i]) if defect is not None else 0.0
    return float(e_initial - e_tau - dis - d_tau)


# -- defect estimation ---------------------------------------------------------------

@dataclass(frozen=True)
class DefectReport:
    """Tail-difference estimates of the limit defects along a sequence.

    These are estimators measured at desk scale from an explicit sequence,
    not weak-* limits; negative pre-clip values are recorded in clip_log.
    """

    times: np.ndarray
    x: np.ndarray
    E_inf: np.ndarray            # (nt,)
    sigma_inf: np.ndarray        # (nt,), cumulative over [0, tau]
    zeta: np.ndarray             # (nt,)
    D_total: np.ndarray          # (nt,)
    rM_field: np.ndarray         # (nt, nx)
    rM_abs: np.ndarray           # (nt,), L1 size of rM_field
    xi: np.ndarray               # (nt,)
    xi_meaningful: np.ndarray    # (nt,) bool, False where D_total < 1e-12
    zeta_by_member: np.ndarray   # (n_members, nt)
    C: float
    tail: int
    clip_log: dict = field(default_factory=dict)


def _trajectory_deltas(trajectories: list[Trajectory]) -> list[float]:
    return [traj.cfg.delta for traj in trajectories]


def estimate_defect(trajectories: list[Trajectory], finest: DiscreteYoungMeasure,
                    law: PressureLaw, lam: float, tail: int = 1,
                    C: float = 1.0, xi_floor: float = 1e-14) -> DefectReport:
    """Estimate concentration defects from a refinement/regularization sequence.

    trajectories are ordered with the finest (smallest delta or finest mesh)
    last; the tail average of field-side quantities is compared against the
    moments of `finest`.  All components are clipped at zero with pre-clip
    extrema logged.
    """
    if len(trajectories) < 2:
        raise CannotEstimateError(
            f"need a sequence of at least 2 trajectories, got {len(trajectories)}")
    if not (1 <= tail <= len(trajectories)):
        raise CannotEstimateError(f"tail {tail} outside sequence length")

    times, x, dx = finest.times, finest.x, finest.dx
    nt = times.size
    deltas = _trajectory_deltas(trajectories)

    def field_energy(traj):
        kin = 0.5 * traj.rho * traj.u**2
        return np.sum(kin + law.P(traj.rho), axis=1) * traj.grid.dx

    def field_dissipation_cum(traj):
        series = np.empty(nt)
        for k in range(nt):
            g = gradient_1d(traj.u[k], traj.grid.dx)
            series[k] = np.sum(lam * g * g) * traj.grid.dx
        out = np.empty(nt)
        for k in range(nt):
            out[k] = np.trapezoid(series[: k + 1], times[: k + 1])
        return out

    def field_flux(traj, delta):
        # momentum-flux scalar rho u^2 + p + delta rho^Gamma on traj's grid,
        # restricted to the common grid by cell averaging if finer
        flux = traj.rho * traj.u**2 + law.p(traj.rho)
        if delta > 0.0:
            flux = flux + delta * np.power(traj.rho, traj.cfg.Gamma)
        factor = traj.grid.n // x.size
        if factor > 1:
            flux = flux.reshape(nt, x.size, factor).mean(axis=2)
        return flux

    tail_members = trajectories[-tail:]
    tail_deltas = deltas[-tail:]

    e_field = np.mean([field_energy(t) for t in tail_members], axis=0)
    energy_mom = moment(finest, lambda s, v, D: 0.5 * s * v * v + law.P(s))
    e_meas = np.sum(energy_mom, axis=1) * dx
    E_inf_raw = e_field - e_meas

    sig_field = np.mean([field_dissipation_cum(t) for t in tail_members], axis=0)
    dis_mom = moment(finest, lambda s, v, D: lam * D * D)
    dis_series = np.sum(dis_mom, axis=1) * dx
    sig_meas = np.array([
        np.trapezoid(dis_series[: k + 1], times[: k + 1]) for k in range(nt)])
    sigma_raw = sig_field - sig_meas

    zeta_by_member = np.array([
        np.sum(d * np.power(t.rho, t.cfg.Gamma), axis=1) * t.grid.dx
        for t, d in zip(trajectories, deltas)])
    zeta_raw = np.mean(zeta_by_member[-tail:], axis=0)

    flux_field = np.mean(
        [field_flux(t, d) for t, d in zip(tail_members, tail_deltas)], axis=0)
    flux_mom = moment(finest, lambda s, v, D: s * v * v + law.p(s))
    rM_field = flux_field - flux_mom

    clip_log = {}
    def clip(name, raw):
        low = float(np.min(raw))
        if low < 0.0:
            clip_log[name] = low
        return np.maximum(raw, 0.0)

    E_inf = clip("E_inf", E_inf_raw)
    sigma_inf = clip("sigma_inf", sigma_raw)
    zeta = clip("zeta", zeta_raw)
    D_total = E_inf + C * zeta + sigma_inf
    # below the floor the ratio xi is meaningless; zero the pairing field
    # there so the concentration term drops out instead of amplifying noise
    dead = D_total < xi_floor
    rM_field = np.where(dead[:, None], 0.0, rM_field)
    rM_abs = np.sum(np.abs(rM_field), axis=1) * dx
    xi = rM_abs / np.maximum(D_total, xi_floor)
    return DefectReport(times=times.copy(), x=x.copy(), E_inf=E_inf,
                        sigma_inf=sigma_inf, zeta=zeta, D_total=D_total,
                        rM_field=rM_field, rM_abs=rM_abs, xi=xi,
                        xi_meaningful=D_total >= 1e-12,
                        zeta_by_member=zeta_by_member, C=C, tail=tail,
                        clip_log=clip_log)


# -- generalized Korn-Poincare check ---------------------------------------------------

def _grad_nd(field: np.ndarray, spacings: list[float]) -> np.ndarray:
    """Gradient of a (d, n1..nd) vector field: out[i, j] = d field_i / d x_j."""
    d = field.shape[0]
    out = np.empty((d, d) + field.shape[1:])
    for i in range(d):
        for j in range(d):
            out[i, j] = np.gradient(field[i], spacings[j], axis=j, edge_order=2)
    return out


def korn_poincare_check(v: np.ndarray, u_tilde: np.ndarray, lengths: list[float],
                        d: int | None = None,
                        c_p_config: float | None = None) -> dict:
    """Empirical two-sided data for the gradient-controls-velocity inequality.

    v and u_tilde are (d, n1, ..., nd) arrays on a uniform cell-centered grid
    over a box with the given side lengths; u_tilde must have zero boundary
    trace for the inequality to make sense.  Returns lhs, rhs, the empirical
    ratio c_P, and a pass flag (lhs <= c_p_config * rhs when configured).
    """
    if d is None:
        d = int(np.asarray(v).shape[0])
    if d == 1:
        raise UnsupportedDimensionError(
            "d = 1 unsupported: the traceless symmetrized gradient vanishes "
            "identically, so the inequality has no content")
    if d not in (2, 3):
        raise UnsupportedDimensionError(f"d must be 2 or 3, got {d}")
    v = np.asarray(v, dtype=float)
    u_tilde = np.asarray(u_tilde, dtype=float)
    if v.shape != u_tilde.shape or v.ndim != d + 1 or v.shape[0] != d:
        raise DomainError("fields must be matching (d, n1..nd) arrays")

    shape = v.shape[1:]
    spacings = [lengths[j] / shape[j] for j in range(d)]
    cell = float(np.prod(spacings))

    diff = v - u_tilde
    lhs = float(np.sum(diff * diff) * cell)

    gv = _grad_nd(v, spacings)
    gu = _grad_nd(u_tilde, spacings)
    # move the two tensor axes last for the traceless operator
    tv = traceless(np.moveaxis(gv, (0, 1), (-2, -1)))
    tu = traceless(np.moveaxis(gu, (0, 1), (-2, -1)))
    dt_ = tv - tu
    rhs = float(np.sum(dt_ * dt_) * cell)

    ratio = lhs / rhs if rhs > 0.0 else 0.0
    passes = lhs <= c_p_config * rhs if c_p_config is not None else True
    return {"lhs": lhs, "rhs": rhs, "c_P": ratio, "passes": passes}


# -- serialization ------------------------------------------------------------------

def save_measure(measure: DiscreteYoungMeasure, path: str) -> None:
    """Columnar text format: one header line, then one row per atom."""
    k, nt, nx = measure.S.shape
    with open(path, "w") as fh:
        fh.write(f"# young-measure K={k} nt={nt} nx={nx} "
                 f"L={float(measure.length)!r}\n")
        fh.write("# times: " + ",".join(repr(float(t)) for t in measure.times) + "\n")
        fh.write("member,t_index,x_index,s,v,D,w\n")
        w = 1.0 / k
        for j in range(k):
            for kt in range(nt):
                for kx in range(nx):
                    fh.write(f"{j},{kt},{kx},{float(measure.S[j, kt, kx])!r},"
                             f"{float(measure.V[j, kt, kx])!r},"
                             f"{float(measure.D[j, kt, kx])!r},{w!r}\n")


def load_measure(path: str) -> DiscreteYoungMeasure:
    with open(path) as fh:
        header = fh.readline().strip()
        if not header.startswith("# young-measure"):
            raise DomainError(f"not a measure file: {path}")
        meta = dict(tok.split("=") for tok in header.split()[2:])
        k, nt, nx = int(meta["K"]), int(meta["nt"]), int(meta["nx"])
        length = float(meta["L"])
        times_line = fh.readline().strip()
        times = np.array([float(tok) for tok in
                          times_line.split(":", 1)[1].split(",")])
        fh.readline()  # column header
        S = np.empty((k, nt, nx))
        V = np.empty((k, nt, nx))
        D = np.empty((k, nt, nx))
        for line in fh:
            j, kt, kx, s, vv, dd, _w = line.strip().split(",")
            S[int(j), int(kt), int(kx)] = float(s)
            V[int(j), int(kt), int(kx)] = float(vv)
            D[int(j), int(kt), int(kx)] = float(dd)
    dx = length / nx
    x = (np.arange(nx) + 0.5) * dx
    return DiscreteYoungMeasure(times=times, x=x, dx=dx, length=length,
                                S=S, V=V, D=D, member_ids=tuple(range(k)))
