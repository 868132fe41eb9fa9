"""Frequency-domain solves: the mixed elliptic problem and the resolvent.

Shifting the coupled generator by lambda > 0 reduces, after eliminating the
flow velocity potential, to a subsonic advective Helmholtz problem on the
box with Dirichlet data on the off-beam part of the bottom edge and Neumann
data on the beam footprint.  ``zaremba_solve`` handles that mixed problem in
weak form.  ``resolvent_solve`` wraps the flow and beam solves in an
under-relaxed fixed point on the beam velocity and certifies the result
against the assembled first-order generator, so its inner linear system is
built from the same SBP matrices the time stepper uses rather than from the
weak form (the two agree to discretization order; tests compare them).
"""

from dataclasses import dataclass
from math import factorial
import warnings

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (ConfigurationError, ShapeError, ContractionFailure,
                     SolverFailure)
from .flow import (FlowGrid, FlowParams, FlowField, _trapezoid,
                   _sbp_first_derivative, _staggered_difference)
from .beam import BeamOperator, BeamState

__all__ = [
    "ZarembaProblem", "zaremba_solve", "coercivity_gap",
    "reconstruct_antiderivative", "ResolventData", "resolvent_solve",
]


# ---------------------------------------------------------------------------
# shared discrete pieces


class _Workspace:
    """Matrices for one (grid, params, lam) triple, factorizations cached."""

    def __init__(self, grid: FlowGrid, params: FlowParams, lam: float):
        nx, nz, hx, hz = grid.nx, grid.nz, grid.hx, grid.hz
        wx = _trapezoid(nx, hx)
        wz = _trapezoid(nz, hz)
        self.w = np.kron(wx, wz)
        self.W = sp.diags(self.w)

        gx = _staggered_difference(nx, hx)
        gz = _staggered_difference(nz, hz)
        self.GX = sp.csr_matrix(sp.kron(gx, sp.identity(nz)))
        self.GZ = sp.csr_matrix(sp.kron(sp.identity(nx), gz))
        self.pgx = np.kron(np.full(nx - 1, hx), wz)
        self.pgz = np.kron(wx, np.full(nz - 1, hz))
        self.LAPX = sp.csr_matrix(self.GX.T @ sp.diags(self.pgx) @ self.GX)
        self.LAPZ = sp.csr_matrix(self.GZ.T @ sp.diags(self.pgz) @ self.GZ)
        self.DX = sp.csr_matrix(sp.kron(_sbp_first_derivative(nx, hx),
                                        sp.identity(nz)))

        beam_nodes = grid.beam_index_range
        neu_idx = beam_nodes if grid.junction == "beam" else beam_nodes[1:-1]
        self.neumann_cols = neu_idx * nz
        if grid.junction == "beam":
            self.mb = _trapezoid(len(beam_nodes), hx)
        else:
            self.mb = np.full(len(neu_idx), hx)
        bottom = np.arange(nx) * nz
        self.kj_cols = np.setdiff1d(bottom, self.neumann_cols)
        self.free = np.setdiff1d(np.arange(nx * nz), self.kj_cols)

        U, mu = params.U, params.mu
        cross = lam * U * (self.W @ self.DX - self.DX.T @ self.W)
        self.S = sp.csr_matrix((1.0 - U * U) * self.LAPX + self.LAPZ
                               + cross + (mu + lam * lam) * self.W)

        self.grid, self.params, self.lam = grid, params, lam
        self._lu = {}

    def lu(self, name, matrix_fn):
        if name not in self._lu:
            try:
                self._lu[name] = spla.splu(sp.csc_matrix(matrix_fn()))
            except RuntimeError as exc:
                raise SolverFailure(
                    f"factorization of the {name} system failed: {exc}") from exc
        return self._lu[name]


_WORKSPACES: dict = {}


def _workspace(grid: FlowGrid, params: FlowParams, lam: float) -> _Workspace:
    key = (grid, params, lam)
    if key not in _WORKSPACES:
        if len(_WORKSPACES) >= 8:
            _WORKSPACES.pop(next(iter(_WORKSPACES)))
        _WORKSPACES[key] = _Workspace(grid, params, lam)
    return _WORKSPACES[key]


# ---------------------------------------------------------------------------
# mixed Dirichlet / Neumann solve in weak form


@dataclass
class ZarembaProblem:
    """Shifted elliptic problem on the flow box.

    g1 holds bottom-row Dirichlet values (used at off-beam nodes only) and
    must decay toward the lateral margins; g2 holds Neumann data on the beam
    footprint.  rhs_load, if given, is a pre-assembled dual vector added to
    the weak right-hand side (quadrature weights already applied).
    """

    lam: float
    grid: FlowGrid
    params: FlowParams
    rhs_F: np.ndarray | None = None
    rhs_load: np.ndarray | None = None
    g1: np.ndarray | None = None
    g2: np.ndarray | None = None

    def __post_init__(self):
        if not (np.isscalar(self.lam) and np.isfinite(self.lam) and self.lam > 0):
            raise ConfigurationError(f"shift must be positive, got {self.lam}")
        nx, nz = self.grid.nx, self.grid.nz
        if self.rhs_F is not None:
            self.rhs_F = np.asarray(self.rhs_F, dtype=float)
            if self.rhs_F.shape != (nx, nz):
                raise ShapeError(f"rhs_F has shape {self.rhs_F.shape}, "
                                 f"expected {(nx, nz)}")
        if self.rhs_load is not None:
            self.rhs_load = np.asarray(self.rhs_load, dtype=float).ravel()
            if self.rhs_load.size != nx * nz:
                raise ShapeError(f"rhs_load has {self.rhs_load.size} entries, "
                                 f"expected {nx * nz}")
        if self.g1 is not None:
            self.g1 = np.asarray(self.g1, dtype=float)
            if self.g1.shape != (nx,):
                raise ShapeError(f"g1 has shape {self.g1.shape}, expected {(nx,)}")
            scale = max(1.0, float(np.max(np.abs(self.g1))))
            edge = max(abs(self.g1[0]), abs(self.g1[-1]))
            if edge > 1e-8 * scale:
                raise ConfigurationError(
                    f"Dirichlet data does not decay at the box margin "
                    f"(edge value {edge:.2e})")
        if self.g2 is not None:
            self.g2 = np.asarray(self.g2, dtype=float)
            nb = len(self.grid.beam_index_range)
            if self.g2.shape != (nb,):
                raise ShapeError(f"g2 has shape {self.g2.shape}, expected {(nb,)}")


def _neumann_select(ws: _Workspace, g2: np.ndarray) -> np.ndarray:
    return g2 if ws.grid.junction == "beam" else g2[1:-1]


def zaremba_solve(problem: ZarembaProblem):
    """Solve the mixed problem; returns (solution on the grid, report).

    The Dirichlet rows are handled by a two-step lift: first the discrete
    harmonic-type extension of the boundary values (same form, zero load),
    then a homogeneous solve for the remainder, one factorization for both.
    """
    ws = _workspace(problem.grid, problem.params, problem.lam)
    n = ws.grid.nx * ws.grid.nz
    free, kj = ws.free, ws.kj_cols

    load = np.zeros(n)
    if problem.rhs_F is not None:
        load += ws.w * problem.rhs_F.ravel()
    if problem.rhs_load is not None:
        load += problem.rhs_load
    if problem.g2 is not None:
        load[ws.neumann_cols] -= ws.mb * _neumann_select(ws, problem.g2)

    S_ff = ws.S[free][:, free]
    S_fc = ws.S[free][:, kj]
    lu = ws.lu("zaremba", lambda: S_ff)

    g1_c = np.zeros(len(kj))
    if problem.g1 is not None:
        g1_c = problem.g1[kj // ws.grid.nz]

    lift_f = lu.solve(-(S_fc @ g1_c)) if np.any(g1_c) else np.zeros(len(free))
    hom_f = lu.solve(load[free])

    q = np.zeros(n)
    q[free] = q_f = lift_f + hom_f
    q[kj] = g1_c

    r = S_ff @ q_f + S_fc @ g1_c - load[free]
    denom = max(float(np.linalg.norm(load[free]) + np.linalg.norm(S_fc @ g1_c)),
                1e-300)
    residual = float(np.linalg.norm(r)) / denom

    # coercivity witness on the homogeneous part: the cross term is exactly
    # skew, so the form equals the weighted H1 norm to roundoff
    hom = np.zeros(n)
    hom[free] = hom_f
    nrm = _h1_norm_sq(ws, hom)
    form = float(hom @ (ws.S @ hom))
    coercivity = form / nrm if nrm > 0 else 1.0

    report = {
        "residual": residual,
        "coercivity_observed": coercivity,
        "dirichlet_nodes": int(len(kj)),
        "neumann_nodes": int(len(ws.neumann_cols)),
    }
    return q.reshape(ws.grid.nx, ws.grid.nz), report


def _h1_norm_sq(ws: _Workspace, q: np.ndarray) -> float:
    U, mu, lam = ws.params.U, ws.params.mu, ws.lam
    return float((1.0 - U * U) * np.sum(ws.pgx * (ws.GX @ q) ** 2)
                 + np.sum(ws.pgz * (ws.GZ @ q) ** 2)
                 + (mu + lam * lam) * np.sum(ws.w * q * q))


def coercivity_gap(grid: FlowGrid, params: FlowParams, lam: float,
                   zeta: np.ndarray) -> float:
    """a(zeta, zeta) minus the weighted H1 norm squared; zero to roundoff
    for every state because the advective cross term is exactly skew."""
    zeta = np.asarray(zeta, dtype=float)
    if zeta.shape != (grid.nx, grid.nz):
        raise ShapeError(f"zeta has shape {zeta.shape}, "
                         f"expected {(grid.nx, grid.nz)}")
    ws = _workspace(grid, params, lam)
    q = zeta.ravel()
    return float(q @ (ws.S @ q)) - _h1_norm_sq(ws, q)


# ---------------------------------------------------------------------------
# antiderivative along the advection direction

# cubic through four equally spaced samples, local coordinate in cell units
_STENCILS = {
    "left": np.array([0.0, 1.0, 2.0, 3.0]),
    "mid": np.array([-1.0, 0.0, 1.0, 2.0]),
    "right": np.array([-2.0, -1.0, 0.0, 1.0]),
}
_VINV = {k: np.linalg.inv(np.vander(s, 4, increasing=True))
         for k, s in _STENCILS.items()}


def _kernel_moments(a: float, h: float) -> np.ndarray:
    """m_k / h^k with m_k = integral_0^h exp(-a(h-s)) s^k ds, k = 0..3."""
    ah = a * h
    m = np.zeros(4)
    if ah <= 0.75:
        # alternating series in ah, factorially convergent
        for k in range(4):
            term = 0.0
            for nn in range(30):
                term += (-ah) ** nn / float(factorial(k + nn + 1))
            m[k] = h * float(factorial(k)) * term
    else:
        E = np.exp(-ah)
        m[0] = (1.0 - E) / a
        for k in range(1, 4):
            m[k] = (1.0 - k * m[k - 1] / h) / a
    return m


def reconstruct_antiderivative(phi_hat: np.ndarray, lam: float,
                               params: FlowParams, grid: FlowGrid,
                               mode: str = "quadrature"):
    """Invert (lam + U d/dx) along x lines; returns (phi, report).

    "quadrature" marches the exact exponential kernel against a local cubic
    per cell (fourth order, stable for any lam*h/U); "exact" solves with the
    same SBP derivative matrix the generator uses, so downstream residuals
    against the assembled operator sit at solver roundoff.  Decay of the
    data toward the lateral margins is assumed and measured.
    """
    if not (np.isscalar(lam) and np.isfinite(lam) and lam > 0):
        raise ConfigurationError(f"shift must be positive, got {lam}")
    if mode not in ("quadrature", "exact"):
        raise ConfigurationError(f"unknown mode {mode!r}")
    ph = np.asarray(phi_hat, dtype=float)
    squeeze = ph.ndim == 1
    if squeeze:
        ph = ph[:, None]
    if ph.shape[0] != grid.nx:
        raise ShapeError(f"phi_hat has {ph.shape[0]} rows, expected {grid.nx}")

    U, h = params.U, grid.hx
    scale = max(float(np.max(np.abs(ph))), 1e-300)
    data_tail = max(float(np.max(np.abs(ph[0]))),
                    float(np.max(np.abs(ph[-1])))) / scale
    if data_tail > 1e-8:
        warnings.warn(f"antiderivative data has margin tail {data_tail:.2e}; "
                      "the reconstruction assumes decay at the box edges")

    if U == 0.0:
        phi = ph / lam
        residual = 0.0
    elif mode == "exact":
        T = sp.csc_matrix(lam * sp.identity(grid.nx)
                          + U * _sbp_first_derivative(grid.nx, h))
        phi = spla.splu(T).solve(ph)
        residual = float(np.max(np.abs(T @ phi - ph))) / scale
    else:
        flip = U < 0.0
        src = ph[::-1] if flip else ph
        a = lam / abs(U)
        mhat = _kernel_moments(a, h)
        E = np.exp(-a * h)
        nx = grid.nx
        phi = np.empty_like(src)
        phi[0] = src[0] / lam
        for i in range(nx - 1):
            if i == 0:
                kind, lo = "left", 0
            elif i == nx - 2:
                kind, lo = "right", nx - 4
            else:
                kind, lo = "mid", i - 1
            coef = _VINV[kind] @ src[lo:lo + 4]
            phi[i + 1] = E * phi[i] + (mhat @ coef) / abs(U)
        if flip:
            phi = phi[::-1]
        # fourth-order check of lam*phi + U*phi_x against the data
        dphi = (phi[:-4] - 8.0 * phi[1:-3] + 8.0 * phi[3:-1] - phi[4:]) / (12.0 * h)
        residual = float(np.max(np.abs(lam * phi[2:-2] + U * dphi - ph[2:-2]))) / scale

    out_scale = max(float(np.max(np.abs(phi))), 1e-300)
    tail = max(float(np.max(np.abs(phi[0]))),
               float(np.max(np.abs(phi[-1])))) / out_scale
    report = {"ode_residual": residual, "tail": tail,
              "data_tail": data_tail, "mode": mode if U != 0.0 else "algebraic"}
    if squeeze:
        phi = phi[:, 0]
    return phi, report


# ---------------------------------------------------------------------------
# resolvent of the coupled generator


@dataclass
class ResolventData:
    """Right-hand side (f1, f2) on the flow grid and (g1, g2) on the beam."""

    f1: np.ndarray
    f2: np.ndarray
    g1_beam: np.ndarray
    g2_beam: np.ndarray

    def __post_init__(self):
        self.f1 = np.asarray(self.f1, dtype=float)
        self.f2 = np.asarray(self.f2, dtype=float)
        self.g1_beam = np.asarray(self.g1_beam, dtype=float)
        self.g2_beam = np.asarray(self.g2_beam, dtype=float)


def _check_conforming(flow_grid: FlowGrid, beam_op: BeamOperator):
    nb = len(flow_grid.beam_index_range)
    if nb != beam_op.grid.n_points or abs(flow_grid.hx - beam_op.grid.h) > 1e-12:
        raise ShapeError(
            f"flow grid beam footprint ({nb} nodes, hx={flow_grid.hx}) does "
            f"not conform to the beam grid ({beam_op.grid.n_points} nodes, "
            f"h={beam_op.grid.h})")


def resolvent_solve(lam: float, data: ResolventData, flow_grid: FlowGrid,
                    beam_op: BeamOperator, params: FlowParams,
                    relax: float = 0.5, tol: float = 1e-10,
                    maxiter: int = 200):
    """Solve (lam - generator) y = data; returns (CoupledState, report).

    The flow unknown is eliminated through psi = (lam + U d/dx) phi - f1,
    leaving a second-order solve for phi whose off-beam bottom rows carry
    the constraint psi = 0 and whose beam columns receive the flux from the
    beam velocity.  The beam velocity is updated through the clamped solve
    (lam^2 M + lam delta K + D K) w = M (g2 + lam g1 + trace psi) + delta K g1
    and the loop is under-relaxed; geometric convergence is monitored and a
    flat or growing increment sequence raises ContractionFailure.

    Domain sizing note: for U != 0 the truncated box admits a slowly
    controlled upstream mode proportional to exp(-lam x / U); accuracy (not
    the reported residuals) degrades unless the upstream margin is a few
    multiples of U / lam.  Endpoint handling follows grid.junction, and the
    wake-side convention ("flow") behaves best at the trailing edge.
    """
    from .coupled import CoupledState

    if not (np.isscalar(lam) and np.isfinite(lam) and lam > 0):
        raise ConfigurationError(f"shift must be positive, got {lam}")
    if not (0.0 < relax <= 1.0):
        raise ConfigurationError(f"relaxation factor must lie in (0, 1], got {relax}")
    _check_conforming(flow_grid, beam_op)
    nx, nz = flow_grid.nx, flow_grid.nz
    nb = beam_op.grid.n_points
    if data.f1.shape != (nx, nz) or data.f2.shape != (nx, nz):
        raise ShapeError(f"flow data must have shape {(nx, nz)}, got "
                         f"{data.f1.shape} and {data.f2.shape}")
    if data.g1_beam.shape != (nb,) or data.g2_beam.shape != (nb,):
        raise ShapeError(f"beam data must have shape {(nb,)}, got "
                         f"{data.g1_beam.shape} and {data.g2_beam.shape}")

    ws = _workspace(flow_grid, params, lam)
    n = nx * nz
    U = params.U
    D, delta = beam_op.params.D, beam_op.params.delta

    # second-order flow matrix consistent with the assembled generator:
    # W (lam + U DX)^2 + LAP + mu W, off-beam bottom rows replaced by the
    # constraint rows (lam + U DX) phi = f1
    def build_flow_matrix():
        T = lam * sp.identity(n, format="csr") + U * ws.DX
        S2 = sp.csr_matrix(ws.W @ (T @ T) + ws.LAPX + ws.LAPZ
                           + params.mu * ws.W)
        S2 = S2.tolil()
        Tl = T.tolil()
        for i in ws.kj_cols:
            S2.rows[i] = Tl.rows[i]
            S2.data[i] = Tl.data[i]
        return sp.csc_matrix(S2.tocsr())

    lu_flow = ws.lu("resolvent_flow", build_flow_matrix)
    T = sp.csr_matrix(lam * sp.identity(n) + U * ws.DX)

    f1, f2 = data.f1.ravel(), data.f2.ravel()
    rhs_flow = ws.w * (T @ f1 + f2)
    rhs_flow[ws.kj_cols] = f1[ws.kj_cols]

    if maxiter < 1:
        raise ConfigurationError(f"maxiter must be at least 1, got {maxiter}")

    # clamped beam system on active dofs
    M, K = beam_op.M, beam_op.K
    lu_beam = spla.splu(sp.csc_matrix(
        lam * lam * sp.diags(M) + (lam * delta + D) * K))
    g1a, g2a = data.g1_beam[1:], data.g2_beam[1:]

    ix0, ix1 = flow_grid.beam_index_range[0], flow_grid.beam_index_range[-1]

    def flow_solve(v_full):
        rhs = rhs_flow.copy()
        sel = v_full if flow_grid.junction == "beam" else v_full[1:-1]
        rhs[ws.neumann_cols] -= ws.mb * sel
        phi = lu_flow.solve(rhs)
        psi = T @ phi - f1
        psi[ws.kj_cols] = 0.0
        return phi, psi

    def beam_solve(psi):
        trace = psi.reshape(nx, nz)[ix0:ix1 + 1, 0]
        rhs = M * (g2a + lam * g1a + trace[1:])
        if delta:
            rhs = rhs + delta * (K @ g1a)
        w_act = lu_beam.solve(rhs)
        return w_act, trace

    v = -data.g1_beam.copy()
    scale_v = max(float(np.max(np.abs(data.g1_beam))), float(np.max(np.abs(data.g2_beam))),
                  float(np.max(np.abs(f1))), float(np.max(np.abs(f2))), 1e-300)
    increments, ratios = [], []
    converged = False
    for it in range(maxiter):
        phi, psi = flow_solve(v)
        w_act, trace = beam_solve(psi)
        v_new = np.concatenate(([0.0], lam * w_act - g1a))
        inc = float(np.max(np.abs(v_new - v))) / max(scale_v,
                                                     float(np.max(np.abs(v_new))))
        increments.append(inc)
        if len(increments) >= 2 and increments[-2] > 0:
            ratios.append(increments[-1] / increments[-2])
        if inc <= tol:
            v = v_new
            converged = True
            break
        v = v + relax * (v_new - v)
    q_est = float(np.median(ratios[-5:])) if ratios else 0.0
    if not converged:
        raise ContractionFailure(
            f"resolvent fixed point did not reach {tol:.1e} in {maxiter} "
            f"iterations (last increment {increments[-1]:.2e})",
            q_estimate=q_est)

    # final pass with the converged velocity so every row is consistent
    phi, psi = flow_solve(v)
    w_act, trace = beam_solve(psi)
    w_full = np.concatenate(([0.0], w_act))
    v_full = np.concatenate(([0.0], lam * w_act - g1a))

    report = _resolvent_report(ws, beam_op, params, lam, phi, psi, w_act,
                               v_full, data, trace)
    report["iterations"] = it + 1
    report["q_estimate"] = q_est
    report["increment"] = increments[-1]

    state = CoupledState(flow=FlowField(phi.reshape(nx, nz),
                                        psi.reshape(nx, nz)),
                         beam=BeamState(w_full, v_full))
    return state, report


def _resolvent_report(ws, beam_op, params, lam, phi, psi, w_act, v_full,
                      data, trace):
    """Per-row residuals of (lam - generator) y = data in the energy metric."""
    U, mu = params.U, params.mu
    f1, f2 = data.f1.ravel(), data.f2.ravel()
    D, delta = beam_op.params.D, beam_op.params.delta
    M, K = beam_op.M, beam_op.K

    r1 = lam * phi + U * (ws.DX @ phi) - psi - f1
    r2 = (lam * psi + U * (ws.DX @ psi)
          + (ws.LAPX @ phi + ws.LAPZ @ phi) / ws.w + mu * phi - f2)
    sel = v_full if ws.grid.junction == "beam" else v_full[1:-1]
    r2[ws.neumann_cols] += ws.mb * sel / ws.w[ws.neumann_cols]
    # constrained rows of the generator are zeroed, so their residual is
    # exactly the data placed there; consistent data vanishes off the beam
    r2[ws.kj_cols] = -f2[ws.kj_cols]
    kj_data = float(np.max(np.abs(f2[ws.kj_cols]))) if len(ws.kj_cols) else 0.0

    g1a, g2a = data.g1_beam[1:], data.g2_beam[1:]
    r3 = lam * w_act - v_full[1:] - g1a
    r4 = (lam * lam * (M * w_act) + (lam * delta + D) * (K @ w_act)
          - M * (g2a + lam * g1a + trace[1:]))
    if delta:
        r4 = r4 - delta * (K @ g1a)
    r4 = r4 / M

    def hnorm(q):
        return np.sqrt(_h1_norm_sq(ws, q))

    def wnorm(q):
        return np.sqrt(float(np.sum(ws.w * q * q)))

    def mnorm(q):
        return np.sqrt(float(np.sum(M * q * q)))

    def knorm(q):
        return np.sqrt(D * float(q @ (K @ q)))

    num = np.sqrt(hnorm(r1) ** 2 + wnorm(r2) ** 2 + knorm(r3) ** 2
                  + mnorm(r4) ** 2)
    den = np.sqrt(hnorm(f1) ** 2 + wnorm(f2) ** 2 + knorm(g1a) ** 2
                  + mnorm(g2a) ** 2)
    return {
        "residuals": {
            "row1": float(np.max(np.abs(r1))),
            "row2": float(np.max(np.abs(r2))),
            "row3": float(np.max(np.abs(r3))),
            "row4": float(np.max(np.abs(r4))),
        },
        "certificate": float(num / max(den, 1e-300)),
        "constrained_data": kj_data,
    }
