"""Clamped-free beam with the inextensibility-type quasilinear stiffness term.

The transverse deflection w(x, t) on (0, L_beam) obeys

    w_tt + d4x(D w + delta w_t) + beta F(w) = p,
    F(w) = D [ w_xx^3 + 4 w_x w_xx w_xxx + w_x^2 w_xxxx ]
         = D [ -(w_xx^2 w_x)_x + (w_x^2 w_xx)_xx ],

with w(0) = w_x(0) = 0 at the clamped end and free-end conditions
w_xx(L) = w_xxx(L) = 0.

Discretization is mimetic finite differences on a uniform grid: the bending
operator is assembled as A4 = M^{-1} D2^T Q2 D2 where D2 samples curvature
(ghost-reflection closure at the clamp, free end handled weakly by omission)
and M, Q2 are diagonal trapezoid quadratures.  This makes the discrete
integration-by-parts identity (A4 w, w)_M = ||D2 w||_Q2^2 hold to machine
precision, so energy bookkeeping in the tests is exact rather than
approximate.  The divergence ("conservative") form of F is the exact gradient
of the discrete inextensibility energy; the expanded form uses pointwise
derivative stencils and exists for cross-validation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigurationError, ShapeError, StepFailure, UsageError

_SCHEMES = ("implicit-midpoint", "newmark")


@dataclass(frozen=True)
class BeamGrid:
    """Uniform grid on [0, L_beam] with the clamp at index 0."""

    n_points: int
    L_beam: float = 1.0

    def __post_init__(self):
        if self.n_points < 8:
            raise ConfigurationError(f"beam grid needs at least 8 points, got {self.n_points}")
        if not (self.L_beam > 0):
            raise ConfigurationError(f"L_beam must be positive, got {self.L_beam}")

    @property
    def h(self) -> float:
        return self.L_beam / (self.n_points - 1)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(0.0, self.L_beam, self.n_points)


@dataclass(frozen=True)
class BeamParams:
    D: float = 1.0
    delta: float = 0.0
    beta: int = 1

    def __post_init__(self):
        if not (self.D > 0):
            raise ConfigurationError(f"stiffness D must be positive, got {self.D}")
        if self.delta < 0:
            raise ConfigurationError(f"damping delta must be nonnegative, got {self.delta}")
        if self.beta not in (0, 1):
            raise ConfigurationError(f"beta selects the nonlinearity and must be 0 or 1, got {self.beta}")


@dataclass
class BeamState:
    """Deflection and velocity samples on the full grid (clamp included)."""

    w: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        if self.w.shape != self.v.shape or self.w.ndim != 1:
            raise ShapeError(f"w and v must be 1-d arrays of equal length, got {self.w.shape} and {self.v.shape}")
        if not (np.isfinite(self.w).all() and np.isfinite(self.v).all()):
            raise ShapeError("beam state contains non-finite entries")
        if self.w[0] != 0.0 or self.v[0] != 0.0:
            raise ShapeError("clamped end requires w[0] = v[0] = 0")

    @classmethod
    def zeros(cls, grid: BeamGrid) -> "BeamState":
        return cls(np.zeros(grid.n_points), np.zeros(grid.n_points))

    def copy(self) -> "BeamState":
        return BeamState(self.w.copy(), self.v.copy())


def _pointwise_derivative_matrices(n: int, h: float):
    """Stencil matrices mapping active dofs (nodes 1..n-1) to all n nodes.

    Row 0 of D1 is identically zero: the clamp closure w_x(0) = 0 is exact by
    construction.  Rows outside the centered band use one-sided stencils of
    the same design order where a second-order formula exists (D1, D2, D3);
    the one-sided D4 rows are first order and are excluded from the
    form-equivalence comparisons.
    """
    def build(rows):
        m = sp.lil_matrix((n, n))
        for i, entries in rows.items():
            for j, c in entries:
                m[i, j] = c
        # drop the constrained column (node 0) to act on active dofs
        return sp.csr_matrix(m[:, 1:])

    d1 = {}
    for i in range(1, n - 1):
        d1[i] = [(i - 1, -0.5 / h), (i + 1, 0.5 / h)]
    d1[n - 1] = [(n - 3, 0.5 / h), (n - 2, -2.0 / h), (n - 1, 1.5 / h)]

    d2 = {0: [(1, 8.0 / (2 * h * h)), (2, -1.0 / (2 * h * h))]}
    for i in range(1, n - 1):
        d2[i] = [(i - 1, 1 / h**2), (i, -2 / h**2), (i + 1, 1 / h**2)]
    d2[n - 1] = [(n - 1, 2 / h**2), (n - 2, -5 / h**2), (n - 3, 4 / h**2), (n - 4, -1 / h**2)]

    fwd3 = [(-2.5, 9.0, -12.0, 7.0, -1.5)]
    d3 = {}
    for i in (0, 1):
        d3[i] = [(i + k, c / h**3) for k, c in enumerate(fwd3[0])]
    for i in range(2, n - 2):
        d3[i] = [(i - 2, -0.5 / h**3), (i - 1, 1 / h**3), (i + 1, -1 / h**3), (i + 2, 0.5 / h**3)]
    for i in (n - 2, n - 1):
        d3[i] = [(i - k, -c / h**3) for k, c in enumerate(fwd3[0])]

    fwd4 = (3.0, -14.0, 26.0, -24.0, 11.0, -2.0)
    d4 = {}
    for i in (0, 1):
        d4[i] = [(i + k, c / h**4) for k, c in enumerate(fwd4)]
    for i in range(2, n - 2):
        d4[i] = [(i - 2, 1 / h**4), (i - 1, -4 / h**4), (i, 6 / h**4), (i + 1, -4 / h**4), (i + 2, 1 / h**4)]
    for i in (n - 2, n - 1):
        d4[i] = [(i - k, c / h**4) for k, c in enumerate(fwd4)]

    return build(d1), build(d2), build(d3), build(d4)


@dataclass
class BeamOperator:
    """Assembled discrete operators for one (grid, params) pair."""

    grid: BeamGrid
    params: BeamParams
    D2_op: sp.csr_matrix        # curvature rows used by the bending form
    Q2: np.ndarray              # quadrature paired with D2_op rows
    K: sp.csr_matrix            # D2^T Q2 D2 on active dofs
    M: np.ndarray               # diagonal L2 quadrature on active dofs
    A4: sp.csr_matrix           # M^{-1} K
    D1p: sp.csr_matrix          # pointwise derivative samples, active -> full grid
    D2p: sp.csr_matrix
    D3p: sp.csr_matrix
    D4p: sp.csr_matrix
    q_full: np.ndarray          # full-grid trapezoid weights
    K_inf: float = 0.0          # max abs row sum of K, for roundoff floors
    D1p_one: float = 0.0        # max abs column sums of the stencil matrices
    D2p_one: float = 0.0
    closure_band: int = 4       # nodes per end affected by non-centered rows

    def active(self, full: np.ndarray) -> np.ndarray:
        return full[1:]

    def full(self, act: np.ndarray) -> np.ndarray:
        return np.concatenate(([0.0], act))

    def bending_form(self, w_full: np.ndarray) -> float:
        """w^T K w = ||D2 w||_Q2^2, the discrete integral of w_xx^2."""
        u = self.active(w_full)
        return float(u @ (self.K @ u))

    def inextensibility_energy(self, w_full: np.ndarray) -> float:
        """Discrete (1/2) * integral of (w_x w_xx)^2, without the D factor."""
        u = self.active(w_full)
        prod = (self.D1p @ u) * (self.D2p @ u)
        return 0.5 * float(self.q_full @ prod**2)

    def natural_bc_samples(self, w_full: np.ndarray):
        """One-sided samples of (w_xx, w_xxx) at the free end, for reporting."""
        u = self.active(w_full)
        return float((self.D2p @ u)[-1]), float((self.D3p @ u)[-1])


def assemble_beam_operator(grid: BeamGrid, params: BeamParams) -> BeamOperator:
    n, h = grid.n_points, grid.h
    na = n - 1

    # curvature rows at nodes 0..n-2; the free-end row is omitted (weak BC),
    # ghost-reflection closure at the clamp: w_xx(0) ~ 2 w_1 / h^2
    d2 = sp.lil_matrix((na, na))
    d2[0, 0] = 2.0 / h**2
    for i in range(1, n - 1):
        if i - 1 >= 1:
            d2[i, i - 2] = 1.0 / h**2
        d2[i, i - 1] = -2.0 / h**2
        d2[i, i] = 1.0 / h**2
    D2_op = sp.csr_matrix(d2)

    Q2 = np.full(na, h)
    Q2[0] = 0.5 * h

    K = sp.csr_matrix(D2_op.T @ sp.diags(Q2) @ D2_op)

    M = np.full(na, h)
    M[-1] = 0.5 * h

    A4 = sp.csr_matrix(sp.diags(1.0 / M) @ K)

    D1p, D2p, D3p, D4p = _pointwise_derivative_matrices(n, h)
    q_full = np.full(n, h)
    q_full[0] = q_full[-1] = 0.5 * h

    K_inf = float(np.max(np.abs(K) @ np.ones(n - 1)))
    D1p_one = float(np.max(np.abs(D1p).T @ np.ones(n)))
    D2p_one = float(np.max(np.abs(D2p).T @ np.ones(n)))

    return BeamOperator(grid, params, D2_op, Q2, K, M, A4, D1p, D2p, D3p, D4p,
                        q_full, K_inf, D1p_one, D2p_one)


def beam_nonlinearity(op: BeamOperator, w_full: np.ndarray, form: str = "expanded") -> np.ndarray:
    """Quasilinear force F(w) on the full grid.

    form="expanded" evaluates D [w_xx^3 + 4 w_x w_xx w_xxx + w_x^2 w_xxxx]
    with pointwise stencils.  form="divergence" returns the exact gradient of
    the discrete inextensibility energy divided by the mass quadrature, whose
    interior rows discretize D [-(w_xx^2 w_x)_x + (w_x^2 w_xx)_xx]; its
    constrained node carries no variational force and is reported as 0.
    """
    D = op.params.D
    u = op.active(np.asarray(w_full, dtype=float))
    if form == "expanded":
        w1 = op.D1p @ u
        w2 = op.D2p @ u
        w3 = op.D3p @ u
        w4 = op.D4p @ u
        return D * (w2**3 + 4.0 * w1 * w2 * w3 + w1**2 * w4)
    if form == "divergence":
        return op.full(_grad_vnl(op, u) / op.M)
    raise ConfigurationError(f"unknown nonlinearity form {form!r}")


def _grad_vnl(op: BeamOperator, u_act: np.ndarray) -> np.ndarray:
    """Gradient (active dofs) of V_nl = (D/2) sum q (D1 w)^2 (D2 w)^2."""
    D = op.params.D
    w1 = op.D1p @ u_act
    w2 = op.D2p @ u_act
    q = op.q_full
    return D * (op.D1p.T @ (q * w1 * w2**2) + op.D2p.T @ (q * w2 * w1**2))


def _grad_vnl_bound(op: BeamOperator, u_act: np.ndarray) -> float:
    """Sup bound on |grad V_nl| from pre-cancellation magnitudes."""
    D = op.params.D
    w1 = np.abs(op.D1p @ u_act)
    w2 = np.abs(op.D2p @ u_act)
    q = op.q_full
    return D * (op.D1p_one * float(np.max(q * w1 * w2**2))
                + op.D2p_one * float(np.max(q * w2 * w1**2)))


def _hess_vnl(op: BeamOperator, u_act: np.ndarray) -> sp.csr_matrix:
    D = op.params.D
    w1 = op.D1p @ u_act
    w2 = op.D2p @ u_act
    q = op.q_full
    t11 = op.D1p.T @ sp.diags(q * w2**2) @ op.D1p
    t22 = op.D2p.T @ sp.diags(q * w1**2) @ op.D2p
    t12 = op.D1p.T @ sp.diags(2.0 * q * w1 * w2) @ op.D2p
    return sp.csr_matrix(D * (t11 + t22 + t12 + t12.T))


def beam_accel(op: BeamOperator, w_full: np.ndarray, v_full: np.ndarray,
               p_full: np.ndarray | None = None, form: str = "divergence") -> np.ndarray:
    """w_tt = -A4(D w + delta v) - beta F(w) + p on the full grid."""
    pr = op.params
    wu = op.active(np.asarray(w_full, dtype=float))
    vu = op.active(np.asarray(v_full, dtype=float))
    acc = -(op.A4 @ (pr.D * wu + pr.delta * vu))
    if pr.beta:
        if form == "divergence":
            acc = acc - _grad_vnl(op, wu) / op.M
        else:
            acc = acc - op.active(beam_nonlinearity(op, w_full, form=form))
    out = op.full(acc)
    if p_full is not None:
        p = np.asarray(p_full, dtype=float)
        if p.shape != w_full.shape:
            raise ShapeError(f"forcing shape {p.shape} does not match grid {w_full.shape}")
        out = out + p
        out[0] = 0.0
    return out


def beam_energy(op: BeamOperator, state: BeamState, level: int = 0,
                w_tt: np.ndarray | None = None) -> float:
    """Energy hierarchy.

    level 0: (1/2)||v||^2 + (D/2)(||w_xx||^2 + beta ||w_x w_xx||^2)
    level 1: same structure one time-derivative up; needs the acceleration,
             which is not stored on the state (recompute via beam_accel).
    level 2: (1/2)(||v_xx||^2 + ||w_xxxx||^2) with the operator norms.

    The inextensibility products participate exactly when the nonlinearity
    does (beta), so the reported quantity is the one the conservative scheme
    preserves.
    """
    pr = op.params
    wu = op.active(state.w)
    vu = op.active(state.v)
    if level == 0:
        e = 0.5 * float(vu @ (op.M * vu)) + 0.5 * pr.D * op.bending_form(state.w)
        if pr.beta:
            e += pr.D * op.inextensibility_energy(state.w)
        return e
    if level == 1:
        if w_tt is None:
            raise UsageError("E1 needs the acceleration field; recompute it with beam_accel")
        a = op.active(np.asarray(w_tt, dtype=float))
        e = 0.5 * float(a @ (op.M * a)) + 0.5 * pr.D * op.bending_form(state.v)
        if pr.beta:
            w1 = op.D1p @ wu
            w2 = op.D2p @ wu
            v1 = op.D1p @ vu
            v2 = op.D2p @ vu
            e += 0.5 * pr.D * float(op.q_full @ (v1 * w2) ** 2)
            e += 0.5 * pr.D * float(op.q_full @ (w1 * v2) ** 2)
        return e
    if level == 2:
        a4w = op.A4 @ wu
        return 0.5 * op.bending_form(state.v) + 0.5 * float(a4w @ (op.M * a4w))
    raise ConfigurationError(f"energy level must be 0, 1 or 2, got {level}")


def _forcing_at(forcing, t: float, n: int) -> np.ndarray | None:
    if forcing is None:
        return None
    p = forcing(t) if callable(forcing) else forcing
    p = np.asarray(p, dtype=float)
    if p.shape != (n,):
        raise ShapeError(f"forcing has shape {p.shape}, expected ({n},)")
    return p


def step_beam(op: BeamOperator, state: BeamState, dt: float, t: float = 0.0,
              forcing=None, scheme: str = "implicit-midpoint",
              newton_tol: float = 1e-10, newton_maxiter: int = 50) -> tuple[BeamState, dict]:
    """Advance (w, v) by one step of dt.

    Stage equations are solved by damped Newton (relative tolerance
    newton_tol, at most newton_maxiter iterations) with a frozen-force
    fixed-point fallback; failure of both raises StepFailure.
    """
    if scheme not in _SCHEMES:
        raise ConfigurationError(f"scheme must be one of {_SCHEMES}, got {scheme!r}")
    if not (dt > 0) or not np.isfinite(dt):
        raise ConfigurationError(f"dt must be positive and finite, got {dt}")
    n = op.grid.n_points
    if scheme == "implicit-midpoint":
        p_mid = _forcing_at(forcing, t + 0.5 * dt, n)
        return _step_midpoint(op, state, dt, p_mid, newton_tol, newton_maxiter)
    p0 = _forcing_at(forcing, t, n)
    p1 = _forcing_at(forcing, t + dt, n)
    return _step_newmark(op, state, dt, p0, p1, newton_tol, newton_maxiter)


def _step_midpoint(op, state, dt, p_mid, tol, maxiter):
    pr = op.params
    M, K = op.M, op.K
    wn = op.active(state.w)
    vn = op.active(state.v)
    pm = op.active(p_mid) if p_mid is not None else 0.0

    eps = np.finfo(float).eps
    rt_na = np.sqrt(len(vn))

    def residual(u):
        v_mid = 0.5 * (vn + u)
        w_mid = wn + 0.25 * dt * (vn + u)
        r = M * (u - vn) + dt * (K @ (pr.D * w_mid + pr.delta * v_mid)) - dt * M * pm
        # the attainable residual is set by cancellation inside the stiff
        # products, so the floor must use pre-cancellation magnitudes
        mag = (float(np.max(M * (np.abs(u) + np.abs(vn))))
               + dt * op.K_inf * float(np.max(np.abs(pr.D * w_mid + pr.delta * v_mid)))
               + dt * float(np.max(np.abs(M * pm))))
        if pr.beta:
            r = r + dt * _grad_vnl(op, w_mid)
            mag += dt * _grad_vnl_bound(op, w_mid)
        return r, w_mid, 20 * eps * rt_na * mag

    u = vn.copy()
    r, w_mid, floor = residual(u)
    scale = float(np.linalg.norm(r)) + 1e-300
    target = max(tol * scale, floor)
    J_lin = sp.diags(M) + dt * (0.25 * dt * pr.D + 0.5 * pr.delta) * K
    info = {"newton_iterations": 0, "fallback": False}

    converged = False
    for it in range(maxiter):
        rn = float(np.linalg.norm(r))
        if rn <= target:
            converged = True
            break
        J = J_lin + 0.25 * dt**2 * _hess_vnl(op, w_mid) if pr.beta else J_lin
        du = spla.spsolve(sp.csc_matrix(J), -r)
        alpha = 1.0
        improved = False
        for _ in range(8):
            r_try, w_try, floor = residual(u + alpha * du)
            target = max(tol * scale, floor)
            if np.linalg.norm(r_try) <= max((1 - 0.25 * alpha) * rn, target):
                u = u + alpha * du
                r, w_mid = r_try, w_try
                improved = True
                break
            alpha *= 0.5
        info["newton_iterations"] = it + 1
        if not improved:
            # stalled against roundoff: accept if close to the floor estimate
            converged = rn <= 10 * target
            break

    if not converged and float(np.linalg.norm(r)) > 10 * target:
        info["fallback"] = True
        u, r = _midpoint_fixed_point(op, wn, vn, dt, pm, J_lin, residual, maxiter, tol, scale)

    if not np.isfinite(u).all():
        raise StepFailure("beam step diverged (non-finite iterate)")
    info["residual"] = float(np.linalg.norm(r))

    v_new = u
    w_new = wn + 0.5 * dt * (vn + v_new)
    return BeamState(op.full(w_new), op.full(v_new)), info


def _midpoint_fixed_point(op, wn, vn, dt, pm, J_lin, residual, maxiter, tol, scale):
    """Picard fallback: freeze the quasilinear force, solve the linear stage."""
    pr = op.params
    lu = spla.splu(sp.csc_matrix(J_lin))
    u = vn.copy()
    r, w_mid, floor = residual(u)
    best_u, best_r = u, r
    stalls = 0
    for _ in range(10 * maxiter):
        rn = float(np.linalg.norm(r))
        target = max(tol * scale, floor)
        if rn <= target:
            return u, r
        if rn < float(np.linalg.norm(best_r)):
            best_u, best_r = u, r
            stalls = 0
        else:
            stalls += 1
            if stalls >= 3:
                break
        b = op.M * vn + dt * op.M * pm - dt * (op.K @ (pr.D * (wn + 0.25 * dt * vn) + pr.delta * 0.5 * vn))
        if pr.beta:
            b = b - dt * _grad_vnl(op, w_mid)
        u = lu.solve(b)
        r, w_mid, floor = residual(u)
    best_n = float(np.linalg.norm(best_r))
    if best_n <= 10 * max(tol * scale, floor):
        return best_u, best_r
    raise StepFailure("beam fixed-point fallback did not converge", residual=best_n)


def _step_newmark(op, state, dt, p0, p1, tol, maxiter):
    """Average-acceleration Newmark step (gamma = 1/2, beta_N = 1/4)."""
    pr = op.params
    wn = op.active(state.w)
    vn = op.active(state.v)
    an = op.active(beam_accel(op, state.w, state.v, p0))

    def accel_of(w_act, v_act):
        a = -(op.A4 @ (pr.D * w_act + pr.delta * v_act))
        if pr.beta:
            a = a - _grad_vnl(op, w_act) / op.M
        if p1 is not None:
            a = a + op.active(p1)
        return a

    def residual(a_new):
        w_new = wn + dt * vn + 0.25 * dt**2 * (an + a_new)
        v_new = vn + 0.5 * dt * (an + a_new)
        return a_new - accel_of(w_new, v_new), w_new, v_new

    a = an.copy()
    r, w_new, v_new = residual(a)
    scale = float(np.linalg.norm(an)) + float(np.linalg.norm(r)) + 1e-30
    for it in range(maxiter):
        if np.linalg.norm(r) <= tol * scale:
            break
        J = sp.identity(len(a), format="csr") \
            + 0.25 * dt**2 * sp.diags(1.0 / op.M) @ (pr.D * op.K) \
            + 0.5 * dt * pr.delta * sp.diags(1.0 / op.M) @ op.K
        if pr.beta:
            J = J + 0.25 * dt**2 * sp.diags(1.0 / op.M) @ _hess_vnl(op, w_new)
        da = spla.spsolve(sp.csc_matrix(J), -r)
        a = a + da
        r, w_new, v_new = residual(a)
    else:
        raise StepFailure("newmark stage solve did not converge", residual=float(np.linalg.norm(r)))
    if not np.isfinite(a).all():
        raise StepFailure("beam step diverged (non-finite acceleration)")
    return BeamState(op.full(w_new), op.full(v_new)), {"newton_iterations": it, "fallback": False,
                                                       "residual": float(np.linalg.norm(r))}


def run_beam(op: BeamOperator, state: BeamState, dt: float, n_steps: int,
             forcing=None, scheme: str = "implicit-midpoint", observer=None) -> BeamState:
    """Convenience loop around step_beam; observer(i, t, state) after each step."""
    t = 0.0
    cur = state
    for i in range(n_steps):
        cur, _ = step_beam(op, cur, dt, t=t, forcing=forcing, scheme=scheme)
        t += dt
        if observer is not None:
            observer(i + 1, t, cur)
    return cur
