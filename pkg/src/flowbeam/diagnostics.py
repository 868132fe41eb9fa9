"""Energy ledgers, trace-norm surrogates, and identity-closure monitors.

The coupled scheme conserves (or exactly books) a small set of quadratic
forms; everything else about a run is measured here as the defect of an
identity that holds for smooth solutions.  Three bookkeeping levels appear:

* level 0: E0 = (1/2)(||w_t||^2 + D||w_xx||^2 + beta D||w_x w_xx||^2) for the
  beam, Ef0 = (1/2)(||psi||^2 + ||grad phi||^2 + mu||phi||^2) for the flow.
  Their sum plus the accumulated interface work U int <w_x, psi> and the
  damping/sponge losses returns the initial value up to time-quadrature
  error (exactly, at U = 0).
* level 1: the same structure one time derivative up.  w_tt is recomputed
  from the equation of motion (the stored state does not carry it, and
  differencing it would stack two orders of roundoff); the flow derivatives
  are backward differences of the stored trajectory, except at the first
  row where the generator image is used.  The nonlinear pollution J(t) is
  accumulated from its boundary-plus-cubic closed form and enters the
  level-1 balance column.
* level 2: (1/2)(||w_t||_{H2}^2 + ||A4 w||^2), the fixed-point ball energy.

The negative-order trace norm is a surrogate: the beam-boundary samples are
zero-extended to a periodic window of four beam lengths, transformed, and
weighted by (1 + k^2)^s.  The surrogate is consistent under refinement but
not norm-equivalent at a fixed grid, so it is used for trends and empirical
constants only, never as a pass/fail tolerance.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.optimize import nnls

from .beam import BeamOperator, _grad_vnl, beam_accel, beam_energy
from .coupled import (
    CoupledOperator,
    CoupledState,
    pressure_trace,
    trace_coupling_rate,
)
from .errors import AssertionFailure, ConfigurationError, ShapeError
from .util import running_trapezoid, trapezoid_weights

__all__ = [
    "LEDGER_COLUMNS",
    "EnergyLedger",
    "TraceSeries",
    "ledger_update",
    "trace_series",
    "trace_norm",
    "smooth_trace",
    "trace_bound_check",
    "blowup_monitor",
    "equipartition_residual",
    "quartic_pairing_split",
    "f_work_residual",
    "flow_h1_control",
]


LEDGER_COLUMNS = (
    "t", "E0", "E1", "E2", "Ef0", "Ef1", "trace_coupling_integral", "J_t",
    "balance_residual_level0", "balance_residual_level1",
    "equipartition_residual",
)


# ---------------------------------------------------------------------------
# energy ledger


def _flow_energy0(op: CoupledOperator, phi: np.ndarray, psi: np.ndarray) -> float:
    f = op.flow
    p, q = phi.ravel(), psi.ravel()
    return 0.5 * (float(q @ (f.w * q)) + float(p @ (f.LAP @ p))
                  + float(p @ (f.w * f.mu_field * p)))


def _beam_products(op: BeamOperator, w_full, v_full):
    wu, vu = op.active(w_full), op.active(v_full)
    return op.D1p @ wu, op.D2p @ wu, op.D1p @ vu, op.D2p @ vu


class EnergyLedger:
    """Per-step energy and identity-closure bookkeeping for a coupled run.

    Feed states in time order at fixed spacing dt; each update appends one
    row (see LEDGER_COLUMNS) and returns it.  Rows are plain dicts so the
    CSV dump is trivially deterministic.
    """

    def __init__(self, op: CoupledOperator, dt: float):
        if not (dt > 0) or not np.isfinite(dt):
            raise ConfigurationError(f"dt must be positive and finite, got {dt}")
        self.op = op
        self.dt = dt
        self.rows: list[dict] = []
        self._prev: CoupledState | None = None
        self._ref0 = 0.0
        self._ref1 = 0.0
        self._J_boundary0 = 0.0
        self._a4w0_sq = 0.0
        self._acc = {k: 0.0 for k in
                     ("trace0", "trace1", "J_cubic", "damp0", "damp1",
                      "sponge0", "sponge1", "eq")}
        self._rate_prev: dict = {}

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        if name not in LEDGER_COLUMNS:
            raise ConfigurationError(f"unknown ledger column {name!r}")
        return np.array([r[name] for r in self.rows])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(LEDGER_COLUMNS)
            for row in self.rows:
                writer.writerow([repr(row[k]) for k in LEDGER_COLUMNS])

    def _flow_derivatives(self, state: CoupledState):
        """phi_t and psi_t flat vectors; generator image on the first row,
        backward differences afterwards."""
        if self._prev is None:
            y = self.op.pack(state)
            ydot = self.op.A @ y
            n = self.op.n_flow
            return ydot[:n], ydot[n:2 * n]
        dt = self.dt
        phi_t = (state.flow.phi.ravel() - self._prev.flow.phi.ravel()) / dt
        psi_t = (state.flow.psi.ravel() - self._prev.flow.psi.ravel()) / dt
        return phi_t, psi_t

    def _trapezoid(self, key: str, rate: float) -> float:
        if self._prev is not None:
            self._acc[key] += 0.5 * self.dt * (self._rate_prev[key] + rate)
        self._rate_prev[key] = rate
        return self._acc[key]

    def update(self, state: CoupledState) -> dict:
        op, bop, fop = self.op, self.op.beam, self.op.flow
        pr = bop.params
        if state.flow.phi.shape != (fop.grid.nx, fop.grid.nz):
            raise ShapeError(f"state shape {state.flow.phi.shape} does not "
                             f"match grid {(fop.grid.nx, fop.grid.nz)}")

        p_full = pressure_trace(op, state)
        w_tt = beam_accel(bop, state.beam.w, state.beam.v, p_full=p_full)
        e0 = beam_energy(bop, state.beam, level=0)
        e1 = beam_energy(bop, state.beam, level=1, w_tt=w_tt)
        e2 = beam_energy(bop, state.beam, level=2)

        phi_t, psi_t = self._flow_derivatives(state)
        ef0 = _flow_energy0(op, state.flow.phi, state.flow.psi)
        ef1 = 0.5 * (float(psi_t @ (fop.w * psi_t))
                     + float(phi_t @ (fop.LAP @ phi_t))
                     + float(phi_t @ (fop.w * fop.mu_field * phi_t)))

        # interface work and the signed loss channels
        tr0 = self._trapezoid("trace0", trace_coupling_rate(op, state))
        vu = bop.active(state.beam.v)
        au = bop.active(w_tt)
        d0 = self._trapezoid("damp0", pr.delta * float(vu @ (bop.K @ vu)))
        d1 = self._trapezoid("damp1", pr.delta * float(au @ (bop.K @ au)))
        q = state.flow.psi.ravel()
        s0 = self._trapezoid("sponge0", float(q @ (fop.w * fop.sponge * q)))
        s1 = self._trapezoid("sponge1", float(psi_t @ (fop.w * fop.sponge * psi_t)))

        # level-1 interface work, midpoint products of differenced psi
        if self._prev is not None and op.sigma and fop.params.U != 0.0:
            v_mid = 0.5 * (bop.active(state.beam.v)
                           + bop.active(self._prev.beam.v))
            wx_t = bop.D1p @ v_mid
            sel = wx_t if fop.grid.junction == "beam" else wx_t[1:-1]
            psit_b = psi_t[fop.neumann_cols]
            self._acc["trace1"] += self.dt * op.sigma * fop.params.U * float(
                np.sum(fop.mb * sel * psit_b))
        tr1 = self._acc["trace1"]

        # nonlinear pollution J(t): boundary term plus cubic time integrals
        w1, w2, v1, v2 = _beam_products(bop, state.beam.w, state.beam.v)
        j_boundary = -4.0 * pr.D * float(bop.q_full @ (w1 * w2 * v1 * v2))
        j_rate = 3.0 * pr.D * (float(bop.q_full @ (w2 * v2 * v1**2))
                               + float(bop.q_full @ (w1 * v1 * v2**2)))
        j_cubic = self._trapezoid("J_cubic", j_rate)
        if self._prev is None:
            self._J_boundary0 = j_boundary
        J_t = pr.beta * (j_boundary - self._J_boundary0 + j_cubic)

        # equipartition closure: the delta boundary term against its
        # accumulated rate; every other pairing cancels exactly because w_tt
        # comes from the same equation
        wu = bop.active(state.beam.w)
        a4w = bop.A4 @ wu
        a4_sq = float(a4w @ (bop.M * a4w))
        eq_rate = (float(au @ (bop.M * a4w)) + pr.D * a4_sq
                   - float(bop.active(p_full) @ (bop.M * a4w)))
        if pr.beta:
            quad, rem = quartic_pairing_split(bop, state.beam.w)
            eq_rate += quad + rem
        eq_int = self._trapezoid("eq", eq_rate)
        if self._prev is None:
            self._a4w0_sq = a4_sq
        eq_resid = 0.5 * pr.delta * (a4_sq - self._a4w0_sq) + eq_int

        if self._prev is None:
            self._ref0 = e0 + ef0
            self._ref1 = e1 + ef1

        row = {
            "t": float(state.t),
            "E0": e0, "E1": e1, "E2": e2, "Ef0": ef0, "Ef1": ef1,
            "trace_coupling_integral": tr0,
            "J_t": J_t,
            "balance_residual_level0": (e0 + ef0) + tr0 + d0 + s0 - self._ref0,
            "balance_residual_level1": (e1 + ef1) + tr1 + d1 + s1
                                       - self._ref1 - J_t,
            "equipartition_residual": eq_resid,
        }
        for k, val in row.items():
            if not np.isfinite(val):
                raise AssertionFailure(
                    f"ledger entry {k} is not finite at t={state.t}")
        self.rows.append(row)
        self._prev = state.copy()
        return row


def ledger_update(ledger: EnergyLedger, state: CoupledState) -> dict:
    """Append one row for `state`; see EnergyLedger.update."""
    return ledger.update(state)


# ---------------------------------------------------------------------------
# negative-order trace norms


@dataclass
class TraceSeries:
    """Bottom-boundary psi samples on the beam footprint, one row per step.

    The diagnostic Sobolev exponent is s = -1/2 - eps; eps > 0 keeps the
    weight summable under zero extension.  window_values marks rows that
    already live on the full periodic window (smoothing widens supports
    beyond the footprint, so smoothed series are stored that way).
    """

    values: np.ndarray
    dt: float
    h: float
    eps: float = 0.5
    window_values: bool = False

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if not (self.eps > 0):
            raise ConfigurationError(f"eps must be positive, got {self.eps}")
        if not (self.dt > 0) or not (self.h > 0):
            raise ConfigurationError("dt and h must be positive")

    @property
    def s(self) -> float:
        return -0.5 - self.eps

    def differentiated(self) -> "TraceSeries":
        """Backward-differenced series (psi_t), one fewer row."""
        if self.values.shape[0] < 2:
            raise ConfigurationError("differencing needs at least two rows")
        dv = np.diff(self.values, axis=0) / self.dt
        return TraceSeries(dv, self.dt, self.h, self.eps, self.window_values)


def trace_series(op: CoupledOperator, traj, dt: float, eps: float = 0.5) -> TraceSeries:
    rows = [pressure_trace(op, s) for s in traj]
    return TraceSeries(np.array(rows), dt, op.beam.grid.h, eps)


def _window_extension(series: TraceSeries) -> np.ndarray:
    """Zero extension of the rows to a periodic window of 4 beam lengths
    (identity when the rows already carry window samples)."""
    if series.window_values:
        return series.values
    m, nb = series.values.shape
    n_win = 4 * (nb - 1)
    padded = np.zeros((m, n_win))
    padded[:, :nb] = series.values
    return padded


def _window_spectrum(series: TraceSeries):
    """rfft over the periodic window, plus wavenumbers and the one-sidedness
    multiplicities."""
    padded = _window_extension(series)
    n_win = padded.shape[1]
    coeffs = np.fft.rfft(padded, axis=1)
    length = n_win * series.h
    kappa = 2.0 * np.pi * np.arange(coeffs.shape[1]) / length
    mult = np.full(coeffs.shape[1], 2.0)
    mult[0] = 1.0
    if n_win % 2 == 0:
        mult[-1] = 1.0
    return coeffs, kappa, mult, n_win


def trace_norm(series: TraceSeries, window=None, k_max: int | None = None) -> float:
    """Time integral of the squared H^s window surrogate of the trace.

    window selects a row slice (i0, i1); k_max zeroes all spectral bins
    above the given index before weighting (never increases the value).
    """
    if not (series.s < 0):
        raise ConfigurationError(f"diagnostic exponent must be negative, got {series.s}")
    coeffs, kappa, mult, n_win = _window_spectrum(series)
    weight = (1.0 + kappa**2) ** (series.s / 2.0)
    power = np.abs(coeffs * weight) ** 2
    if k_max is not None:
        power[:, k_max + 1:] = 0.0
    per_step = (series.h / n_win) * (power @ mult)
    if window is not None:
        per_step = per_step[window[0]:window[1]]
    if len(per_step) < 2:
        return float(per_step.sum() * series.dt)
    return float(trapezoid_weights(len(per_step), series.dt) @ per_step)


def smooth_trace(series: TraceSeries, passes: int = 1) -> TraceSeries:
    """Circular three-point (1/4, 1/2, 1/4) averaging on the periodic window.

    Each pass multiplies the window spectrum by cos^2(pi k / N) in [0, 1],
    so trace_norm never increases; the result lives on the window (the
    averaging widens supports beyond the beam footprint)."""
    vals = _window_extension(series).copy()
    for _ in range(passes):
        vals = 0.25 * np.roll(vals, 1, axis=1) + 0.5 * vals \
            + 0.25 * np.roll(vals, -1, axis=1)
    return TraceSeries(vals, series.dt, series.h, series.eps, window_values=True)


def trace_bound_check(op: CoupledOperator, traj, dt: float, eps: float = 0.5) -> dict:
    """Empirical constant of the flow trace estimate.

    lhs  = int ||psi| on (0,L)||_{H^s}^2 dt   (window surrogate, s = -1/2-eps)
    rhs  = Ef0(0) + int ||w_t + U w_x||^2 dt
    The lemma asserts lhs <= C rhs for some C; the report measures
    C_emp = lhs / rhs, with the zero-data 0/0 case reported as satisfied.
    """
    series = trace_series(op, traj, dt, eps)
    lhs = trace_norm(series)
    bop, fop = op.beam, op.flow
    U = fop.params.U
    f_sq = []
    for s in traj:
        f = s.beam.v + U * (bop.D1p @ bop.active(s.beam.w))
        f_sq.append(float(bop.q_full @ f**2))
    if len(f_sq) > 1:
        f_int = float(trapezoid_weights(len(f_sq), dt) @ np.asarray(f_sq))
    else:
        f_int = 0.0
    rhs = _flow_energy0(op, traj[0].flow.phi, traj[0].flow.psi) + f_int
    if rhs <= 0.0:
        return {"lhs": lhs, "rhs_denominator": rhs, "c_emp": 0.0,
                "eps": eps, "satisfied": lhs == 0.0}
    return {"lhs": lhs, "rhs_denominator": rhs, "c_emp": lhs / rhs,
            "eps": eps, "satisfied": True}


# ---------------------------------------------------------------------------
# blow-up envelope fit


def blowup_monitor(ledger, fit_config: dict | None = None) -> dict:
    """Fit E1(t) <= f1 + f2 t + C int E1^2 and report the implied envelope.

    The fitted coefficients are nonnegative; f1 is inflated minimally so the
    integral inequality holds at every sample.  M1(t) = (f1 + f2 t) /
    (1 - C [f1 t + f2 t^2]) is the implied comparison envelope, finite up to
    T* = sup{ C [f1 t + f2 t^2] < 1 }; a flat or decaying series yields the
    degenerate fit C = 0 and T* = +inf.  envelope_violated is a numerical
    self-check of the certified inequality at the samples, not of M1 (which
    can touch the data for exactly saturating series).
    """
    cfg = {"degenerate_tol": 0.0}
    if fit_config:
        cfg.update(fit_config)
    if hasattr(ledger, "column"):
        t = ledger.column("t")
        e1 = ledger.column("E1")
    else:
        t = np.asarray(ledger["t"], dtype=float)
        e1 = np.asarray(ledger["E1"], dtype=float)
    if len(t) != len(e1) or len(t) < 2:
        raise ConfigurationError("need at least two ledger rows to fit")

    integral = np.concatenate(([0.0], np.cumsum(
        0.5 * np.diff(t) * (e1[1:] ** 2 + e1[:-1] ** 2))))
    design = np.column_stack([np.ones_like(t), t, integral])
    coef, _ = nnls(design, e1)
    f1, f2, C = (float(c) for c in coef)
    slack = float(np.max(e1 - design @ coef))
    if slack > 0.0:
        f1 += slack

    degenerate = C <= cfg["degenerate_tol"] or (f1 + f2) <= 0.0
    if degenerate:
        t_star = np.inf
    elif f2 == 0.0:
        t_star = 1.0 / (C * f1)
    else:
        t_star = (-C * f1 + np.sqrt((C * f1) ** 2 + 4.0 * C * f2)) / (2.0 * C * f2)

    denom = 1.0 - C * (f1 * t + f2 * t**2)
    m1 = np.where(denom > 0.0, (f1 + f2 * t) / np.where(denom > 0, denom, 1.0),
                  np.inf)
    lin = f1 + f2 * t + C * integral
    violated = bool(np.any(e1 > lin * (1.0 + 1e-9) + 1e-300))
    return {"f1": f1, "f2": f2, "C": C, "T_star": float(t_star),
            "M1": m1.tolist(), "degenerate": bool(degenerate),
            "envelope_violated": violated}


# ---------------------------------------------------------------------------
# higher-order identity closures


def quartic_pairing_split(bop: BeamOperator, w_full: np.ndarray):
    """Pairing of the quasilinear force with A4 w, split into the signed
    square D ||w_x A4 w||^2 and the measured lower-order remainder."""
    wu = bop.active(np.asarray(w_full, dtype=float))
    a4w = bop.A4 @ wu
    pair = float(_grad_vnl(bop, wu) @ a4w)
    w1 = bop.D1p @ wu
    quad = bop.params.D * float(bop.q_full @ (w1 * bop.full(a4w))**2)
    return quad, pair - quad


def _beam_view(op, traj):
    """(beam operator, beam states, pressure rows) from either a coupled or
    a plain beam trajectory."""
    if isinstance(op, CoupledOperator):
        states = [s.beam for s in traj]
        pressures = [pressure_trace(op, s) for s in traj]
        return op.beam, states, pressures
    states = list(traj)
    zeros = np.zeros(op.grid.n_points)
    return op, states, [zeros] * len(states)


def equipartition_residual(op, traj, dt: float, w_tt_series=None) -> float:
    """Closure defect of the fourth-order multiplier identity over a slab.

    (delta/2) ||A4 w||^2 changes plus the time integrals of D||A4 w||^2, the
    signed quartic square, the measured remainder, (w_tt, A4 w) and the
    forcing pairing must cancel; with w_tt obtained by central differencing
    of the stored velocity the defect sits at the integrator's order.
    """
    bop, states, pressures = _beam_view(op, traj)
    if len(states) < 3:
        raise ConfigurationError("equipartition needs at least three states")
    pr = bop.params
    if w_tt_series is None:
        v = np.array([s.v for s in states])
        w_tt_series = np.empty_like(v)
        w_tt_series[1:-1] = (v[2:] - v[:-2]) / (2.0 * dt)
        w_tt_series[0] = (v[1] - v[0]) / dt
        w_tt_series[-1] = (v[-1] - v[-2]) / dt

    rates = []
    a4_sq = []
    for s, p, a in zip(states, pressures, w_tt_series):
        wu = bop.active(s.w)
        a4w = bop.A4 @ wu
        a4_sq.append(float(a4w @ (bop.M * a4w)))
        rate = (float(bop.active(np.asarray(a)) @ (bop.M * a4w))
                + pr.D * a4_sq[-1]
                - float(bop.active(p) @ (bop.M * a4w)))
        if pr.beta:
            quad, rem = quartic_pairing_split(bop, s.w)
            rate += quad + rem
        rates.append(rate)
    closure = 0.5 * pr.delta * (a4_sq[-1] - a4_sq[0]) + float(
        trapezoid_weights(len(rates), dt) @ np.asarray(rates))
    return abs(closure)


def f_work_residual(op, traj, dt: float) -> dict:
    """Exchange between the quasilinear force work and the inextensibility
    energy (D/2)||w_x w_xx||^2; the force is the exact discrete gradient, so
    the running defect is pure time-quadrature error."""
    bop, states, _ = _beam_view(op, traj)
    beta = bop.params.beta
    energies = [bop.params.D * bop.inextensibility_energy(s.w) for s in states]
    rates = [beta * float(_grad_vnl(bop, bop.active(s.w)) @ bop.active(s.v))
             for s in states]
    if len(states) < 2:
        return {"residual_sup": 0.0, "work_rates": rates,
                "energy_series": energies}
    work = running_trapezoid(rates, dt)
    resid = np.abs(np.asarray(energies) - energies[0] - work)
    return {"residual_sup": float(np.max(resid)),
            "work_rates": rates, "energy_series": energies}


def flow_h1_control(op: CoupledOperator, traj) -> dict:
    """Sup over the run of the H1-seminorm of psi against the initial-data
    bound sqrt(E0 + E1 + ||Delta_mu phi(0)||^2) suggested by the domain
    characterization; the ratio should be refinement-stable."""
    fop, bop = op.flow, op.beam
    sup_h1 = 0.0
    for s in traj:
        q = s.flow.psi.ravel()
        sup_h1 = max(sup_h1, float(q @ (fop.LAP @ q)))
    sup_h1 = np.sqrt(sup_h1)

    s0 = traj[0]
    p0 = pressure_trace(op, s0)
    w_tt0 = beam_accel(bop, s0.beam.w, s0.beam.v, p_full=p0)
    e0 = beam_energy(bop, s0.beam, level=0) + _flow_energy0(
        op, s0.flow.phi, s0.flow.psi)
    y = op.pack(s0)
    ydot = op.A @ y
    n = op.n_flow
    phi_t, psi_t = ydot[:n], ydot[n:2 * n]
    ef1 = 0.5 * (float(psi_t @ (fop.w * psi_t))
                 + float(phi_t @ (fop.LAP @ phi_t))
                 + float(phi_t @ (fop.w * fop.mu_field * phi_t)))
    e1 = beam_energy(bop, s0.beam, level=1, w_tt=w_tt0) + ef1

    g = s0.beam.v + op.sigma * fop.params.U * (bop.D1p @ bop.active(s0.beam.w))
    dm = fop.delta_mu(s0.flow.phi, neumann=g).ravel()
    dm_sq = float(dm @ (fop.w * dm))

    base = np.sqrt(e0 + e1 + dm_sq)
    ratio = sup_h1 / base if base > 0 else 0.0
    return {"sup_psi_h1": float(sup_h1), "bound_base": float(base),
            "ratio": float(ratio)}
