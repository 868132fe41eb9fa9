"""Monolithic coupled flow-beam generator, time stepping, and sweeps.

The stacked state is y = (phi, psi; w, v) with the flow rows of flow.py and
the beam rows of beam.py glued by two boundary exchanges: the beam velocity
(plus sigma * U * w_x) enters the flow as weak Neumann data, and the bottom
trace of psi forces the beam.  Both exchanges use the same trapezoid masses,
so the energy pairing cancels exactly: with sigma = 0 the assembled matrix is
skew in the energy inner product for every state that satisfies the discrete
boundary conditions and vanishes on the lateral margin columns, to roundoff.
That exactness is what the dissipativity check measures, and it is why the
monolithic implicit midpoint step conserves the energy to solver precision
when U = 0.

The nonlinear beam force is resolved per step by sub-iteration with the
force frozen at the current midpoint iterate; the slab-level Picard map used
by ``contraction_solve`` freezes the force along a whole trajectory instead
and re-solves the linear system, which is the construction the delta and mu
sweeps drive.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .beam import (BeamGrid, BeamOperator, BeamParams, BeamState,
                   assemble_beam_operator, beam_accel, beam_energy, step_beam,
                   _grad_vnl)
from .errors import (AssertionFailure, ConfigurationError, ContractionFailure,
                     ShapeError, StepFailure)
from .flow import (FlowField, FlowGrid, FlowOperator, FlowParams,
                   assemble_flow_operator, boundary_data, step_flow)
from .util import running_trapezoid, trapezoid_weights

__all__ = [
    "CoupledState", "FixedPointConfig", "CoupledOperator",
    "assemble_generator", "generator_apply", "y_inner", "y_norm",
    "coupled_energy", "trace_coupling_rate", "pressure_trace",
    "dissipativity_check", "step_coupled", "step_coupled_staggered",
    "run_coupled", "contraction_solve", "delta_sweep", "mu_sweep",
]


@dataclass
class CoupledState:
    """Flow field plus beam state at one instant."""

    flow: FlowField
    beam: BeamState
    t: float = 0.0

    def copy(self) -> "CoupledState":
        return CoupledState(self.flow.copy(), self.beam.copy(), self.t)


@dataclass(frozen=True)
class FixedPointConfig:
    """Controls for the slab-level Picard iteration.

    ball_radius bounds the integrated fourth-order beam norm plus the sup of
    the velocity bending norm along the slab (the invariance constraint);
    window_T is the slab length on which contraction is attempted.
    """

    ball_radius: float = 10.0
    tol: float = 1e-9
    max_iters: int = 40
    window_T: float = 0.25

    def __post_init__(self):
        if not (self.ball_radius > 0):
            raise ConfigurationError(f"ball_radius must be positive, got {self.ball_radius}")
        if not (self.tol > 0):
            raise ConfigurationError(f"tol must be positive, got {self.tol}")
        if self.max_iters < 1:
            raise ConfigurationError(f"max_iters must be at least 1, got {self.max_iters}")
        if not (self.window_T > 0):
            raise ConfigurationError(f"window_T must be positive, got {self.window_T}")


@dataclass
class CoupledOperator:
    """Assembled monolithic generator for one ((grids, params), sigma) tuple."""

    flow: FlowOperator
    beam: BeamOperator
    sigma: int
    A: sp.csr_matrix            # acts on [phi; psi; w_act; v_act]
    E_tr: sp.csr_matrix         # bottom-trace selector, active beam rows
    S_inj: sp.csr_matrix        # full-grid beam values -> weak Neumann flux rows
    _lu: dict

    @property
    def n_flow(self) -> int:
        return self.flow.n_nodes

    @property
    def n_active(self) -> int:
        return self.beam.grid.n_points - 1

    def pack(self, state: CoupledState) -> np.ndarray:
        n = self.n_flow
        y = np.concatenate([state.flow.phi.ravel(), state.flow.psi.ravel(),
                            state.beam.w[1:], state.beam.v[1:]])
        y[n + self.flow.kj_cols] = 0.0
        return y

    def unpack(self, y: np.ndarray, t: float = 0.0) -> CoupledState:
        n, na = self.n_flow, self.n_active
        shape = (self.flow.grid.nx, self.flow.grid.nz)
        flow = FlowField(y[:n].reshape(shape), y[n:2 * n].reshape(shape))
        beam = BeamState(self.beam.full(y[2 * n:2 * n + na]),
                         self.beam.full(y[2 * n + na:]))
        return CoupledState(flow, beam, t)


def assemble_generator(flow_grid: FlowGrid, flow_params: FlowParams,
                       beam_grid: BeamGrid, beam_params: BeamParams,
                       sigma: int = 1) -> CoupledOperator:
    """Build the four-row block operator with the boundary exchanges.

    Rows: phi_t = -U phi_x + psi; psi_t = (Delta - mu) phi - U psi_x plus the
    weak Neumann flux of (v + sigma U w_x); w_t = v; v_t = -D A4 w
    - delta A4 v + trace of psi on the footprint.  The quasilinear force is
    not part of the matrix; the steppers add it as per-step data.
    """
    if sigma not in (0, 1):
        raise ConfigurationError(f"sigma must be 0 or 1, got {sigma}")
    fop = assemble_flow_operator(flow_grid, flow_params)
    bop = assemble_beam_operator(beam_grid, beam_params)

    nb = beam_grid.n_points
    rng = flow_grid.beam_index_range
    if len(rng) != nb or abs(flow_grid.hx - beam_grid.h) > 1e-12 * beam_grid.h:
        raise ShapeError(
            f"beam grid ({nb} nodes, h={beam_grid.h}) does not conform to the "
            f"flow footprint ({len(rng)} nodes, hx={flow_grid.hx})")

    n, na = fop.n_nodes, nb - 1
    nz = flow_grid.nz

    # weak Neumann flux: full-grid beam values -> psi rows, weight -mb / w
    neu_nodes = np.arange(nb) if flow_grid.junction == "beam" else np.arange(1, nb - 1)
    S_inj = sp.csr_matrix(
        (-fop.mb / fop.w[fop.neumann_cols], (fop.neumann_cols, neu_nodes)),
        shape=(n, nb))

    B_v = sp.csr_matrix(S_inj[:, 1:])
    B_w = sigma * flow_params.U * (S_inj @ bop.D1p) if sigma else sp.csr_matrix((n, na))

    tr_rows = (rng[1:]) * nz
    E_tr = sp.csr_matrix((np.ones(na), (np.arange(na), tr_rows)), shape=(na, n))

    D, delta = beam_params.D, beam_params.delta
    Z_nn = sp.csr_matrix((na, na))
    Z_nN = sp.csr_matrix((na, n))
    A = sp.bmat([
        [fop.A[:n, :n],     fop.A[:n, n:],     sp.csr_matrix((n, na)), sp.csr_matrix((n, na))],
        [fop.A[n:, :n],     fop.A[n:, n:],     B_w,                    B_v],
        [Z_nN,              Z_nN,              Z_nn,                   sp.identity(na, format="csr")],
        [Z_nN,              E_tr,              -D * bop.A4,            -delta * bop.A4],
    ], format="csr")

    return CoupledOperator(fop, bop, sigma, A, E_tr, S_inj, {})


def generator_apply(op: CoupledOperator, state: CoupledState) -> CoupledState:
    """Image of a state under the linear generator, as a state-shaped object."""
    return op.unpack(op.A @ op.pack(state), state.t)


def y_inner(op: CoupledOperator, s1: CoupledState, s2: CoupledState) -> float:
    """Energy inner product: weighted H1 on phi, L2 on psi, bending form on w,
    L2 on v.  The phi weight uses the operator's mu field so the product is
    exactly the one the generator is skew against."""
    f = op.flow
    p1, p2 = s1.flow.phi.ravel(), s2.flow.phi.ravel()
    q1, q2 = s1.flow.psi.ravel(), s2.flow.psi.ravel()
    out = float(p1 @ (f.LAP @ p2)) + float(p1 @ (f.w * f.mu_field * p2))
    out += float(q1 @ (f.w * q2))
    w1, w2 = s1.beam.w[1:], s2.beam.w[1:]
    v1, v2 = s1.beam.v[1:], s2.beam.v[1:]
    out += op.beam.params.D * float(w1 @ (op.beam.K @ w2))
    out += float(v1 @ (op.beam.M * v2))
    return out


def y_norm(op: CoupledOperator, state: CoupledState) -> float:
    return np.sqrt(max(y_inner(op, state, state), 0.0))


def coupled_energy(op: CoupledOperator, state: CoupledState) -> float:
    """Total energy: half the squared Y-norm plus, when the nonlinearity is
    on, the inextensibility potential."""
    f = op.flow
    p, q = state.flow.phi.ravel(), state.flow.psi.ravel()
    e_f = 0.5 * (float(q @ (f.w * q)) + float(p @ (f.LAP @ p))
                 + float(p @ (f.w * f.mu_field * p)))
    return e_f + beam_energy(op.beam, state.beam, level=0)


def pressure_trace(op: CoupledOperator, state: CoupledState) -> np.ndarray:
    """psi sampled on the bottom beam footprint, zero at the clamp node."""
    p = np.zeros(op.beam.grid.n_points)
    p[1:] = state.flow.psi[op.flow.grid.beam_index_range[1:], 0]
    return p


def trace_coupling_rate(op: CoupledOperator, state: CoupledState) -> float:
    """sigma * U * (w_x, psi) over the footprint with the exchange masses;
    the time integral of this is the ledger term in the energy balance."""
    if op.sigma == 0 or op.flow.params.U == 0.0:
        return 0.0
    wx_full = op.beam.D1p @ state.beam.w[1:]
    psi_b = state.flow.psi.ravel()[op.flow.neumann_cols]
    sel = wx_full if op.flow.grid.junction == "beam" else wx_full[1:-1]
    return op.sigma * op.flow.params.U * float(np.sum(op.flow.mb * sel * psi_b))


# ---------------------------------------------------------------------------
# dissipativity / skewness measurement


def _random_domain_state(op: CoupledOperator, rng) -> CoupledState:
    """Random state satisfying the discrete boundary conditions, supported
    away from the lateral margins (two zero columns per side)."""
    nx, nz = op.flow.grid.nx, op.flow.grid.nz
    phi = rng.standard_normal((nx, nz))
    psi = rng.standard_normal((nx, nz))
    for a in (phi, psi):
        a[:2] = 0.0
        a[-2:] = 0.0
    psi.ravel()[op.flow.kj_cols] = 0.0
    nb = op.beam.grid.n_points
    w = np.concatenate(([0.0], rng.standard_normal(nb - 1)))
    v = np.concatenate(([0.0], rng.standard_normal(nb - 1)))
    return CoupledState(FlowField(phi, psi), BeamState(w, v))


def _form_breakdown(op: CoupledOperator, state: CoupledState) -> dict:
    """Green-identity bookkeeping for <A y, y>_Y."""
    f = op.flow
    U = f.params.U
    phi, psi = state.flow.phi.ravel(), state.flow.psi.ravel()
    hmu = f.LAP @ phi + f.w * f.mu_field * phi

    # lateral advective fluxes (the SBP boundary matrix acting at x edges)
    dxphi = f.DX @ phi
    adv_phi = -U * float(dxphi @ hmu)
    adv_psi = -U * float(psi @ (f.w * (f.DX @ psi)))

    # trace exchange: flow loses what the beam gains, plus the sigma term
    psi_b = psi[f.neumann_cols]
    v_full = state.beam.v
    wx_full = op.beam.D1p @ state.beam.w[1:]
    if f.grid.junction == "beam":
        v_sel, wx_sel = v_full, wx_full
    else:
        v_sel, wx_sel = v_full[1:-1], wx_full[1:-1]
    flow_loss = -float(np.sum(f.mb * psi_b * v_sel))
    tr = psi.reshape(f.grid.nx, f.grid.nz)[f.grid.beam_index_range[1:], 0]
    beam_gain = float(tr @ (op.beam.M * state.beam.v[1:]))
    perturbation = -op.sigma * U * float(np.sum(f.mb * psi_b * wx_sel))

    sponge = -float(psi @ (f.w * f.sponge * psi))
    damping = -op.beam.params.delta * float(op.beam.bending_form(state.beam.v))

    # flux the unconstrained pressure rows would drive into the KJ set; the
    # constrained generator annihilates it, so a nonzero value here flags a
    # state that violates the wake condition rather than a generator defect
    kj = f.kj_cols
    r_kj = (-(f.LAP @ phi) / f.w - f.mu_field * phi
            - U * (f.DX @ psi) - f.sponge * psi)[kj]
    kj_violation = float((f.w[kj] * psi[kj]) @ r_kj)

    terms = {
        "advection_phi_flux": adv_phi,
        "advection_psi_flux": adv_psi,
        "trace_exchange": flow_loss + beam_gain,
        "perturbation_flux": perturbation,
        "sponge_dissipation": sponge,
        "damping_dissipation": damping,
        "kj_violation_flux": kj_violation,
    }
    form = y_inner(op, generator_apply(op, state), state)
    terms["unattributed"] = form - sum(
        v for k, v in terms.items() if k != "kj_violation_flux")
    terms["total"] = form
    return terms


def dissipativity_check(op: CoupledOperator, n_samples: int = 100,
                        seed: int = 0, states=None) -> dict:
    """Measure max |<A y, y>_Y| / ||y||_Y^2 over boundary-satisfying states.

    With sigma = 0 and no sponge the ratio sits at roundoff; the report
    carries the Green-identity breakdown of the worst sample so a violated
    boundary condition (states passed in directly) shows up as a named term.
    """
    if states is None:
        if n_samples < 1:
            raise ConfigurationError(f"n_samples must be at least 1, got {n_samples}")
        rng = np.random.default_rng(seed)
        states = [_random_domain_state(op, rng) for _ in range(n_samples)]
    worst = {"ratio": -1.0, "terms": None}
    ratios = []
    for state in states:
        nrm = y_inner(op, state, state)
        if nrm <= 0.0:
            continue
        terms = _form_breakdown(op, state)
        ratio = abs(terms["total"]) / nrm
        ratios.append(ratio)
        if ratio > worst["ratio"]:
            worst = {"ratio": ratio, "terms": terms, "norm_sq": nrm}
    if not ratios:
        return {"max_ratio": 0.0, "n_samples": 0, "sigma": op.sigma, "terms": {}}
    return {
        "max_ratio": float(max(ratios)),
        "mean_ratio": float(np.mean(ratios)),
        "n_samples": len(ratios),
        "sigma": op.sigma,
        "terms": worst["terms"],
        "worst_norm_sq": worst["norm_sq"],
    }


# ---------------------------------------------------------------------------
# monolithic time stepping


def _midpoint_lu(op: CoupledOperator, dt: float):
    key = round(float(dt), 14)
    if key not in op._lu:
        m = sp.identity(op.A.shape[0], format="csr") - 0.5 * dt * op.A
        op._lu[key] = spla.splu(sp.csc_matrix(m))
    return op._lu[key]


def _nonlinear_rhs(op: CoupledOperator, w_mid_act: np.ndarray) -> np.ndarray:
    """Stacked right-hand side carrying -beta F(w_mid) in the velocity row."""
    n, na = op.n_flow, op.n_active
    b = np.zeros(2 * n + 2 * na)
    b[2 * n + na:] = -_grad_vnl(op.beam, w_mid_act) / op.beam.M
    return b


def step_coupled(op: CoupledOperator, state: CoupledState, dt: float,
                 sub_tol: float = 1e-12, sub_maxiter: int = 40):
    """One implicit-midpoint step of the monolithic system.

    With beta = 0 this is a single linear solve.  With the nonlinearity on,
    the force is frozen at the midpoint iterate and the stage is re-solved
    until the update is below sub_tol relative to the state scale; a stalled
    or growing iteration raises StepFailure with the measured factor.
    """
    if not (dt > 0) or not np.isfinite(dt):
        raise ConfigurationError(f"dt must be positive and finite, got {dt}")
    if state.flow.phi.shape != (op.flow.grid.nx, op.flow.grid.nz):
        raise ShapeError(f"flow field shape {state.flow.phi.shape} does not "
                         f"match grid {(op.flow.grid.nx, op.flow.grid.nz)}")
    if state.beam.w.shape != (op.beam.grid.n_points,):
        raise ShapeError(f"beam state has {state.beam.w.shape[0]} nodes, "
                         f"operator expects {op.beam.grid.n_points}")
    lu = _midpoint_lu(op, dt)
    y0 = op.pack(state)
    base = y0 + 0.5 * dt * (op.A @ y0)

    n, na = op.n_flow, op.n_active
    wn = y0[2 * n:2 * n + na]
    info = {"sub_iterations": 0}

    if not op.beam.params.beta:
        y1 = lu.solve(base)
    else:
        scale = max(float(np.max(np.abs(y0))), 1.0)
        y1 = lu.solve(base + dt * _nonlinear_rhs(op, wn))
        increments = []
        for it in range(sub_maxiter):
            w_mid = 0.5 * (wn + y1[2 * n:2 * n + na])
            if not np.isfinite(w_mid).all() or np.max(np.abs(w_mid)) > 1e8 * scale:
                q = (increments[-1] / increments[-2]
                     if len(increments) > 1 and increments[-2] > 0 else np.inf)
                raise StepFailure(
                    f"nonlinear sub-iteration diverged (growth factor {q:.2f}); "
                    f"reduce dt or the data amplitude",
                    residual=increments[-1] if increments else None,
                    iterations=it)
            y_next = lu.solve(base + dt * _nonlinear_rhs(op, w_mid))
            inc = float(np.max(np.abs(y_next - y1))) / scale
            increments.append(inc)
            y1 = y_next
            info["sub_iterations"] = it + 1
            if inc <= sub_tol:
                break
        else:
            q = (increments[-1] / increments[-2]
                 if len(increments) > 1 and increments[-2] > 0 else np.inf)
            raise StepFailure(
                f"nonlinear sub-iteration stalled at increment "
                f"{increments[-1]:.2e} (factor {q:.2f})",
                residual=increments[-1], iterations=sub_maxiter)

    if not np.isfinite(y1).all():
        raise StepFailure("coupled step diverged (non-finite state)")
    return op.unpack(y1, state.t + dt), info


def step_coupled_staggered(op: CoupledOperator, state: CoupledState, dt: float):
    """Split step: half flow advance with the frozen beam trace, full beam
    step forced by the half-step pressure, half flow advance with the updated
    beam trace.  Solves two flow-sized systems plus a beam system instead of
    the monolithic one; second order but only approximately conservative."""
    g0 = boundary_data(state.beam, op.beam, op.sigma, op.flow.params)
    f_half, _ = step_flow(state.flow, g0, 0.5 * dt, op.flow, t=state.t)
    p = pressure_trace(op, CoupledState(f_half, state.beam, state.t))
    b_new, _ = step_beam(op.beam, state.beam, dt, t=state.t, forcing=p)
    g1 = boundary_data(b_new, op.beam, op.sigma, op.flow.params)
    f_new, _ = step_flow(f_half, g1, 0.5 * dt, op.flow, t=state.t + 0.5 * dt)
    return CoupledState(f_new, b_new, state.t + dt), {"sub_iterations": 0}


def run_coupled(op: CoupledOperator, state: CoupledState, dt: float,
                n_steps: int, observer=None, store: bool = False,
                scheme: str = "implicit-midpoint"):
    """Advance n_steps; returns the final state, or the full trajectory
    (initial state included) when store is set.  observer(i, state) runs
    after each step."""
    if scheme == "implicit-midpoint":
        stepper = step_coupled
    elif scheme == "staggered":
        stepper = step_coupled_staggered
    else:
        raise ConfigurationError(
            f"scheme must be 'implicit-midpoint' or 'staggered', got {scheme!r}")
    cur = state
    traj = [cur.copy()] if store else None
    for i in range(n_steps):
        cur, _ = stepper(op, cur, dt)
        if store:
            traj.append(cur.copy())
        if observer is not None:
            observer(i + 1, cur)
    return traj if store else cur


# ---------------------------------------------------------------------------
# slab-level Picard iteration (the discrete T-map)


def _linear_slab(op: CoupledOperator, state0: CoupledState, dt: float,
                 n_steps: int, frozen_forces=None):
    """Midpoint trajectory with the quasilinear force replaced by explicit
    per-step data (None runs the purely linear system)."""
    lu = _midpoint_lu(op, dt)
    y = op.pack(state0)
    n, na = op.n_flow, op.n_active
    traj = [op.unpack(y, state0.t)]
    for k in range(n_steps):
        rhs = y + 0.5 * dt * (op.A @ y)
        if frozen_forces is not None:
            b = np.zeros_like(y)
            b[2 * n + na:] = -frozen_forces[k]
            rhs = rhs + dt * b
        y = lu.solve(rhs)
        if not np.isfinite(y).all():
            raise StepFailure("slab solve diverged (non-finite state)")
        traj.append(op.unpack(y, state0.t + (k + 1) * dt))
    return traj


def _beam_path_distance(op: CoupledOperator, t1, t2) -> float:
    """sup over steps of the beam finite-energy norm of the difference."""
    D = op.beam.params.D
    worst = 0.0
    for s1, s2 in zip(t1, t2):
        dw = s1.beam.w[1:] - s2.beam.w[1:]
        dv = s1.beam.v[1:] - s2.beam.v[1:]
        val = D * float(dw @ (op.beam.K @ dw)) + float(dv @ (op.beam.M * dv))
        worst = max(worst, val)
    return np.sqrt(worst)


def _frozen_forces(op: CoupledOperator, traj) -> list:
    forces = []
    for k in range(len(traj) - 1):
        w_mid = 0.5 * (traj[k].beam.w[1:] + traj[k + 1].beam.w[1:])
        forces.append(_grad_vnl(op.beam, w_mid) / op.beam.M)
    return forces


def _ball_value(op: CoupledOperator, traj, dt: float) -> float:
    """Integrated squared domain norm of w plus sup bending norm of v."""
    D = op.beam.params.D
    vals = []
    sup_v = 0.0
    for s in traj:
        a4w = D * (op.beam.A4 @ s.beam.w[1:])
        vals.append(float(a4w @ (op.beam.M * a4w)))
        sup_v = max(sup_v, D * float(op.beam.bending_form(s.beam.v)))
    integral = float(trapezoid_weights(len(vals), dt) @ np.asarray(vals))
    return integral + sup_v


def contraction_solve(op: CoupledOperator, state0: CoupledState,
                      config: FixedPointConfig, dt: float,
                      initial_guess: str = "linear"):
    """Picard iteration on one slab [t0, t0 + window_T]; returns (trajectory,
    report).

    Each iterate freezes the quasilinear force along the previous trajectory
    and re-solves the linear system on the slab; distances are measured in
    the sup-over-time beam energy norm.  A non-decreasing tail raises
    ContractionFailure (shrink window_T); leaving the configured ball raises
    AssertionFailure.
    """
    n_steps = int(round(config.window_T / dt))
    if n_steps < 1 or abs(n_steps * dt - config.window_T) > 1e-9 * config.window_T:
        raise ConfigurationError(
            f"window_T={config.window_T} is not an integer number of steps of dt={dt}")
    if op.beam.params.beta and not (op.beam.params.delta > 0):
        raise ConfigurationError(
            "the regularized construction requires delta > 0 when the "
            "nonlinearity is on")
    v0_sup = op.beam.params.D * float(op.beam.bending_form(state0.beam.v))
    if v0_sup > config.ball_radius:
        raise AssertionFailure(
            f"initial data lies outside the invariance ball: {v0_sup:.3e} > "
            f"ball_radius={config.ball_radius:.3e}")

    if isinstance(initial_guess, str):
        if initial_guess == "linear":
            traj = _linear_slab(op, state0, dt, n_steps)
        elif initial_guess == "rest":
            traj = [CoupledState(state0.flow.copy(), state0.beam.copy(),
                                 state0.t + k * dt) for k in range(n_steps + 1)]
        else:
            raise ConfigurationError(
                f"initial_guess must be 'linear', 'rest' or a trajectory, "
                f"got {initial_guess!r}")
    else:
        traj = list(initial_guess)
        if len(traj) != n_steps + 1:
            raise ShapeError(f"initial trajectory has {len(traj)} states, "
                             f"expected {n_steps + 1}")

    if not op.beam.params.beta:
        traj = _linear_slab(op, state0, dt, n_steps)
        report = {"iterations": 1, "q_estimate": 0.0, "distances": [],
                  "converged": True, "ball_value": _ball_value(op, traj, dt),
                  "window_T": config.window_T}
        report["ball_ok"] = report["ball_value"] <= config.ball_radius
        return traj, report

    distances = []
    converged = False
    for it in range(config.max_iters):
        new = _linear_slab(op, state0, dt, n_steps,
                           frozen_forces=_frozen_forces(op, traj))
        d = _beam_path_distance(op, new, traj)
        distances.append(d)
        traj = new
        if d <= config.tol:
            converged = True
            break
        if len(distances) >= 3 and distances[-1] >= distances[-2] >= distances[-3]:
            q = distances[-1] / max(distances[-2], 1e-300)
            raise ContractionFailure(
                f"slab iteration is not contracting (last ratio {q:.3f}); "
                f"use a smaller window_T than {config.window_T}",
                q_estimate=float(q), iterations=it + 1)
    ratios = [distances[i + 1] / distances[i]
              for i in range(len(distances) - 1) if distances[i] > 0]
    q_est = float(np.median(ratios)) if ratios else 0.0
    if not converged:
        raise ContractionFailure(
            f"slab iteration did not reach tol={config.tol:.1e} in "
            f"{config.max_iters} iterations (q about {q_est:.3f})",
            q_estimate=q_est, iterations=config.max_iters)

    ball = _ball_value(op, traj, dt)
    if ball > config.ball_radius:
        raise AssertionFailure(
            f"iterate left the invariance ball: {ball:.3e} > "
            f"ball_radius={config.ball_radius:.3e}")
    return traj, {"iterations": len(distances), "q_estimate": q_est,
                  "distances": distances, "converged": True,
                  "ball_value": ball, "ball_ok": True,
                  "window_T": config.window_T}


# ---------------------------------------------------------------------------
# parameter sweeps


def _sup_energies(op: CoupledOperator, traj) -> dict:
    e0, e1 = [], []
    for s in traj:
        e0.append(coupled_energy(op, s))
        acc = beam_accel(op.beam, s.beam.w, s.beam.v,
                         p_full=pressure_trace(op, s))
        e1.append(beam_energy(op.beam, s.beam, level=1, w_tt=acc))
    return {"sup_E0": float(np.max(e0)), "final_E0": float(e0[-1]),
            "initial_E0": float(e0[0]), "sup_E1": float(np.max(e1))}


def _trajectory_distance(op: CoupledOperator, t1, t2) -> float:
    worst = 0.0
    for s1, s2 in zip(t1, t2):
        diff = CoupledState(
            FlowField(s1.flow.phi - s2.flow.phi, s1.flow.psi - s2.flow.psi),
            BeamState(s1.beam.w - s2.beam.w, s1.beam.v - s2.beam.v))
        worst = max(worst, y_inner(op, diff, diff))
    return np.sqrt(worst)


def delta_sweep(state0: CoupledState, deltas, horizon_T: float, dt: float,
                flow_grid: FlowGrid, flow_params: FlowParams,
                beam_grid: BeamGrid, beam_params: BeamParams,
                config: FixedPointConfig | None = None, sigma: int = 1) -> dict:
    """Run the same data across descending damping values; delta = 0 steps
    directly, positive delta goes through the slab contraction when a config
    is given.  Reports pairwise trajectory distances (measured in the metric
    of the last operator) and the per-delta energy ledger."""
    deltas = list(deltas)
    if any(d < 0 for d in deltas):
        raise ConfigurationError(f"deltas must be nonnegative, got {deltas}")
    if sorted(deltas, reverse=True) != deltas:
        raise ConfigurationError(f"deltas must be descending, got {deltas}")
    n_steps = int(round(horizon_T / dt))
    if abs(n_steps * dt - horizon_T) > 1e-9 * horizon_T:
        raise ConfigurationError(
            f"horizon_T={horizon_T} is not an integer number of steps of dt={dt}")

    runs = {}
    ref_op = None
    for d in deltas:
        bp = BeamParams(D=beam_params.D, delta=d, beta=beam_params.beta)
        op = assemble_generator(flow_grid, flow_params, beam_grid, bp, sigma=sigma)
        ref_op = op
        entry = {"delta": d}
        try:
            if d > 0 and config is not None and beam_params.beta:
                if abs(round(horizon_T / config.window_T)
                       - horizon_T / config.window_T) > 1e-9:
                    raise ConfigurationError(
                        "horizon_T must be a whole number of window_T slabs")
                traj = None
                cur = state0
                qs = []
                for _ in range(int(round(horizon_T / config.window_T))):
                    piece, rep = contraction_solve(op, cur, config, dt)
                    qs.append(rep["q_estimate"])
                    cur = piece[-1]
                    traj = piece if traj is None else traj + piece[1:]
                entry["q_estimates"] = qs
            else:
                traj = run_coupled(op, state0, dt, n_steps, store=True)
            entry.update(_sup_energies(op, traj))
            entry["trajectory"] = traj
        except Exception as exc:  # noqa: BLE001 - per-member failures are data
            entry["error"] = f"{type(exc).__name__}: {exc}"
        runs[d] = entry

    distances = []
    ok = [d for d in deltas if "trajectory" in runs[d]]
    for d1, d2 in zip(ok[:-1], ok[1:]):
        distances.append({
            "pair": (d1, d2),
            "distance": _trajectory_distance(ref_op, runs[d1]["trajectory"],
                                             runs[d2]["trajectory"]),
        })
    dvals = [p["distance"] for p in distances]
    monotone = all(dvals[i + 1] <= dvals[i] * (1 + 1e-9)
                   for i in range(len(dvals) - 1))
    return {"runs": runs, "distances": distances, "monotone": monotone,
            "deltas": deltas, "dt": dt, "horizon_T": horizon_T}


def mu_sweep(state0: CoupledState, mus, horizon_T: float, dt: float,
             flow_grid: FlowGrid, flow_params: FlowParams,
             beam_grid: BeamGrid, beam_params: BeamParams,
             sigma: int = 1) -> dict:
    """Run the same data across descending mu and verify the calculus bound
    ||phi(t)|| <= ||phi(0)|| + integral of ||phi_t|| for every run."""
    mus = list(mus)
    if any(m <= 0 for m in mus):
        raise ConfigurationError(f"mus must be positive, got {mus}")
    if sorted(mus, reverse=True) != mus:
        raise ConfigurationError(f"mus must be descending, got {mus}")
    n_steps = int(round(horizon_T / dt))
    if abs(n_steps * dt - horizon_T) > 1e-9 * horizon_T:
        raise ConfigurationError(
            f"horizon_T={horizon_T} is not an integer number of steps of dt={dt}")

    runs = {}
    ref_op = None
    for m in mus:
        fp = FlowParams(U=flow_params.U, mu=m,
                        sponge_strength=flow_params.sponge_strength,
                        mu_inflation=flow_params.mu_inflation)
        op = assemble_generator(flow_grid, fp, beam_grid, beam_params, sigma=sigma)
        ref_op = ref_op or op
        traj = run_coupled(op, state0, dt, n_steps, store=True)

        wq = op.flow.w
        phin, dphin = [], []
        for s in traj:
            phi = s.flow.phi.ravel()
            phi_t = (s.flow.psi.ravel()
                     - op.flow.params.U * (op.flow.DX @ phi))
            phin.append(np.sqrt(float(phi @ (wq * phi))))
            dphin.append(np.sqrt(float(phi_t @ (wq * phi_t))))
        resid = phin[0] + running_trapezoid(dphin, dt) - np.asarray(phin)
        runs[m] = {"mu": m, "trajectory": traj,
                   "ftc_margin_min": float(np.min(resid)),
                   "sup_phi_norm": float(np.max(phin))}

    distances = []
    for m1, m2 in zip(mus[:-1], mus[1:]):
        distances.append({
            "pair": (m1, m2),
            "distance": _trajectory_distance(ref_op, runs[m1]["trajectory"],
                                             runs[m2]["trajectory"]),
        })
    return {"runs": runs, "distances": distances, "mus": mus,
            "dt": dt, "horizon_T": horizon_T}
