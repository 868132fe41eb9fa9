"""Convected wave equation on a truncated half-plane, first order in time.

State is the pair (phi, psi) with psi = phi_t + U phi_x, so the dynamics read

    phi_t = psi - U phi_x,
    psi_t = (Delta - mu) phi - U psi_x,

on the box (x_min, x_max) x (0, z_max).  The bottom edge carries the mixed
condition: a Neumann trace d_z phi = v + sigma U w_x over the beam footprint
and the strong constraint psi = 0 elsewhere (zero pressure off the beam and
at the trailing edge).  Remaining edges are homogeneous Neumann walls wrapped
in an absorbing layer (Rayleigh damping on psi, optional mu inflation).

The Laplacian is assembled in weak form, -W^{-1} G^T Pg G, from staggered
edge differences, which makes the discrete Green identity

    <(Delta - mu) phi, phi>_W + ||G phi||_Pg^2 + mu ||phi||_W^2 = -<flux terms>

hold to machine precision; advection uses a summation-by-parts first
derivative so that with U = 0 (and the sponge off) implicit midpoint
conserves the flow energy exactly up to linear-solver roundoff.  The Neumann
injection is weighted by the trapezoid masses of the beam grid, the exact
transpose of the pointwise trace used by the coupled system.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .beam import BeamGrid, BeamOperator, BeamState
from .errors import ConfigurationError, ShapeError, StepFailure

_JUNCTIONS = ("beam", "flow")
_FLOW_SCHEMES = ("implicit-midpoint", "rk4")


@dataclass(frozen=True)
class FlowGrid:
    """Uniform tensor grid on (x_min, x_max) x (0, z_max).

    The beam footprint [0, L_beam] must land on grid nodes; the absorbing
    layer of thickness sponge_width lines the two lateral edges and the top,
    and must leave the beam strictly inside the remaining physical window.
    """

    x_min: float
    x_max: float
    z_max: float
    nx: int
    nz: int
    sponge_width: float = 0.0
    L_beam: float = 1.0
    junction: str = "beam"

    def __post_init__(self):
        if self.nx < 8 or self.nz < 4:
            raise ConfigurationError(f"flow grid too small: nx={self.nx}, nz={self.nz}")
        if not (self.x_min < 0.0 < self.L_beam < self.x_max):
            raise ConfigurationError(
                f"need x_min < 0 < L_beam < x_max, got ({self.x_min}, {self.L_beam}, {self.x_max})")
        if not (self.z_max > 0):
            raise ConfigurationError(f"z_max must be positive, got {self.z_max}")
        if self.sponge_width < 0:
            raise ConfigurationError("sponge_width must be nonnegative")
        if self.junction not in _JUNCTIONS:
            raise ConfigurationError(f"junction must be one of {_JUNCTIONS}, got {self.junction!r}")
        hx = self.hx
        for endpoint in (0.0, self.L_beam):
            k = (endpoint - self.x_min) / hx
            if abs(k - round(k)) > 1e-9:
                raise ConfigurationError(
                    f"beam endpoint {endpoint} does not land on a grid node (hx={hx})")
        if self.sponge_width > 0:
            if not (self.x_min + self.sponge_width < 0
                    and self.x_max - self.sponge_width > self.L_beam
                    and self.sponge_width < self.z_max):
                raise ConfigurationError("sponge layers must lie strictly outside the beam window")

    @property
    def hx(self) -> float:
        return (self.x_max - self.x_min) / (self.nx - 1)

    @property
    def hz(self) -> float:
        return self.z_max / (self.nz - 1)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.nx)

    @property
    def z(self) -> np.ndarray:
        return np.linspace(0.0, self.z_max, self.nz)

    @property
    def beam_index_range(self) -> np.ndarray:
        """Bottom-row x-indices covering [0, L_beam], endpoints included."""
        i0 = int(round(-self.x_min / self.hx))
        i1 = int(round((self.L_beam - self.x_min) / self.hx))
        return np.arange(i0, i1 + 1)

    @property
    def window(self) -> tuple[float, float, float]:
        """Physical window (x_lo, x_hi, z_hi); the sponge lies outside it."""
        return (self.x_min + self.sponge_width,
                self.x_max - self.sponge_width,
                self.z_max - self.sponge_width)

    @classmethod
    def conforming(cls, beam_grid: BeamGrid, margin: float = 1.0, height: float = 1.0,
                   sponge_width: float = 0.0, junction: str = "beam") -> "FlowGrid":
        """Box whose spacing equals the beam spacing, margins rounded to cells."""
        h = beam_grid.h
        m = max(2, int(round(margin / h)))
        nzc = max(3, int(round(height / h)))
        return cls(x_min=-m * h, x_max=beam_grid.L_beam + m * h, z_max=nzc * h,
                   nx=2 * m + beam_grid.n_points, nz=nzc + 1,
                   sponge_width=sponge_width, L_beam=beam_grid.L_beam, junction=junction)


@dataclass(frozen=True)
class FlowParams:
    U: float = 0.0
    mu: float = 1.0
    sponge_strength: float = 40.0
    mu_inflation: float = 0.0

    def __post_init__(self):
        if not abs(self.U) < 1.0:
            raise ConfigurationError(f"subsonic only: |U| must be < 1, got {self.U}")
        if self.mu < 0:
            raise ConfigurationError(f"mu must be nonnegative, got {self.mu}")
        if self.sponge_strength < 0 or self.mu_inflation < 0:
            raise ConfigurationError("sponge amplitudes must be nonnegative")


@dataclass
class FlowField:
    """Potential and acceleration-potential samples, shape (nx, nz)."""

    phi: np.ndarray
    psi: np.ndarray

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=float)
        self.psi = np.asarray(self.psi, dtype=float)
        if self.phi.shape != self.psi.shape or self.phi.ndim != 2:
            raise ShapeError(f"phi and psi must be 2-d arrays of equal shape, "
                             f"got {self.phi.shape} and {self.psi.shape}")
        if not (np.isfinite(self.phi).all() and np.isfinite(self.psi).all()):
            raise ShapeError("flow field contains non-finite entries")

    @classmethod
    def zeros(cls, grid: FlowGrid) -> "FlowField":
        return cls(np.zeros((grid.nx, grid.nz)), np.zeros((grid.nx, grid.nz)))

    def copy(self) -> "FlowField":
        return FlowField(self.phi.copy(), self.psi.copy())


def _trapezoid(n: int, h: float) -> np.ndarray:
    w = np.full(n, h)
    w[0] = w[-1] = 0.5 * h
    return w


def _sbp_first_derivative(n: int, h: float) -> sp.csr_matrix:
    """Centered interior, first-order one-sided rows; satisfies
    diag(w) D + D^T diag(w) = diag(-1, 0, ..., 0, 1) with trapezoid w."""
    d = sp.lil_matrix((n, n))
    d[0, 0], d[0, 1] = -1.0 / h, 1.0 / h
    for i in range(1, n - 1):
        d[i, i - 1], d[i, i + 1] = -0.5 / h, 0.5 / h
    d[n - 1, n - 2], d[n - 1, n - 1] = -1.0 / h, 1.0 / h
    return sp.csr_matrix(d)


def _staggered_difference(n: int, h: float) -> sp.csr_matrix:
    return sp.diags([np.full(n - 1, -1.0 / h), np.full(n - 1, 1.0 / h)],
                    [0, 1], shape=(n - 1, n), format="csr")


@dataclass
class FlowOperator:
    """Assembled matrices for one (grid, params) pair.

    A is the full first-order generator on the stacked state [phi; psi]
    (x-major flattening), with the off-beam bottom rows of psi replaced by
    zero rows so the constraint survives any one-step map built from A.
    """

    grid: FlowGrid
    params: FlowParams
    w: np.ndarray                 # nodal quadrature weights, flat
    LAP: sp.csr_matrix            # G^T Pg G, symmetric positive semidefinite
    DX: sp.csr_matrix             # SBP x-derivative on nodal values
    A: sp.csr_matrix              # 2N x 2N generator with KJ rows zeroed
    neumann_cols: np.ndarray      # flat node indices receiving Neumann data
    mb: np.ndarray                # trapezoid masses paired with neumann_cols
    kj_cols: np.ndarray           # flat bottom nodes with strong psi = 0
    sponge: np.ndarray            # Rayleigh damping profile on psi, flat
    mu_field: np.ndarray          # mu plus inflation, flat
    _lu: dict = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return self.grid.nx * self.grid.nz

    def injection(self, g: np.ndarray) -> np.ndarray:
        """psi-row forcing from Neumann data g on the beam footprint: the
        weak boundary flux -W^{-1} Eb^T mb g (outward normal points down)."""
        g = np.asarray(g, dtype=float)
        beam_nodes = self.grid.beam_index_range
        if g.shape != beam_nodes.shape:
            raise ShapeError(f"neumann data has shape {g.shape}, expected {beam_nodes.shape}")
        out = np.zeros(self.n_nodes)
        sel = g if len(self.neumann_cols) == len(beam_nodes) else g[1:-1]
        out[self.neumann_cols] = -self.mb * sel / self.w[self.neumann_cols]
        return out

    def delta_mu(self, phi: np.ndarray, neumann: np.ndarray | None = None) -> np.ndarray:
        """(Delta - mu) phi on the grid, weak form, optional boundary data."""
        p = np.asarray(phi, dtype=float)
        if p.shape != (self.grid.nx, self.grid.nz):
            raise ShapeError(f"phi has shape {p.shape}, expected {(self.grid.nx, self.grid.nz)}")
        flat = p.ravel()
        out = -(self.LAP @ flat) / self.w - self.mu_field * flat
        if neumann is not None:
            out = out + self.injection(neumann)
        return out.reshape(p.shape)


def _sponge_profile(grid: FlowGrid) -> np.ndarray:
    sw = grid.sponge_width
    if sw == 0.0:
        return np.zeros(grid.nx * grid.nz)
    x_lo, x_hi, z_hi = grid.window

    def ramp(xi):
        return np.sin(0.5 * np.pi * np.clip(xi, 0.0, 1.0)) ** 2

    px = ramp((x_lo - grid.x) / sw) + ramp((grid.x - x_hi) / sw)
    pz = ramp((grid.z - z_hi) / sw)
    prof = np.clip(px[:, None] + pz[None, :], 0.0, 1.0)
    return prof.ravel()


def assemble_flow_operator(grid: FlowGrid, params: FlowParams) -> FlowOperator:
    nx, nz, hx, hz = grid.nx, grid.nz, grid.hx, grid.hz
    n = nx * nz

    wx = _trapezoid(nx, hx)
    wz = _trapezoid(nz, hz)
    w = np.kron(wx, wz)

    gx = _staggered_difference(nx, hx)
    gz = _staggered_difference(nz, hz)
    GX = sp.kron(gx, sp.identity(nz), format="csr")
    GZ = sp.kron(sp.identity(nx), gz, format="csr")
    pgx = np.kron(np.full(nx - 1, hx), wz)
    pgz = np.kron(wx, np.full(nz - 1, hz))
    LAP = sp.csr_matrix(GX.T @ sp.diags(pgx) @ GX + GZ.T @ sp.diags(pgz) @ GZ)

    DX = sp.csr_matrix(sp.kron(_sbp_first_derivative(nx, hx), sp.identity(nz)))

    beam_nodes = grid.beam_index_range
    if grid.junction == "beam":
        neu_idx = beam_nodes
    else:
        neu_idx = beam_nodes[1:-1]
    neumann_cols = neu_idx * nz
    mb = _trapezoid(len(beam_nodes), hx)
    if grid.junction == "flow":
        # the endpoint nodes moved to the KJ side; interior nodes keep the
        # uniform mass so the trace pairing with the beam stays exact
        mb = np.full(len(neu_idx), hx)

    bottom = np.arange(nx) * nz
    kj_cols = np.setdiff1d(bottom, neumann_cols)

    sponge = params.sponge_strength * _sponge_profile(grid)
    mu_field = params.mu + params.mu_inflation * _sponge_profile(grid)

    U = params.U
    I = sp.identity(n, format="csr")
    A11 = -U * DX
    A21 = sp.csr_matrix(-sp.diags(1.0 / w) @ LAP - sp.diags(mu_field))
    A22 = -U * DX - sp.diags(sponge)
    A = sp.bmat([[A11, I], [A21, A22]], format="csr")

    # strong KJ substitution: psi rows and columns at off-beam bottom nodes
    mask = np.ones(2 * n)
    mask[n + kj_cols] = 0.0
    P = sp.diags(mask)
    A = sp.csr_matrix(P @ A @ P)

    return FlowOperator(grid, params, w, LAP, DX, A, neumann_cols, mb,
                        kj_cols, sponge, mu_field)


def boundary_data(state: BeamState, beam_op: BeamOperator, sigma: int,
                  params: FlowParams, flow_grid: FlowGrid | None = None) -> np.ndarray:
    """Neumann trace v + sigma U w_x sampled on the beam nodes."""
    if sigma not in (0, 1):
        raise ConfigurationError(f"sigma must be 0 or 1, got {sigma}")
    n = beam_op.grid.n_points
    if state.w.shape != (n,):
        raise ShapeError(f"beam state has {state.w.shape[0]} nodes, operator expects {n}")
    if flow_grid is not None:
        rng = flow_grid.beam_index_range
        if len(rng) != n or abs(flow_grid.hx - beam_op.grid.h) > 1e-12 * beam_op.grid.h:
            raise ShapeError(
                f"beam grid ({n} nodes, h={beam_op.grid.h}) does not conform to the "
                f"flow footprint ({len(rng)} nodes, hx={flow_grid.hx})")
    data = state.v.copy()
    if sigma:
        data = data + params.U * (beam_op.D1p @ beam_op.active(state.w))
    return data


def _resolve_neumann(neumann, t, grid):
    if neumann is None:
        return np.zeros(len(grid.beam_index_range))
    return np.asarray(neumann(t) if callable(neumann) else neumann, dtype=float)


def step_flow(field_in: FlowField, neumann, dt: float, op: FlowOperator,
              scheme: str = "implicit-midpoint", t: float = 0.0,
              source=None) -> tuple[FlowField, dict]:
    """One step of the flow system with boundary data (array or callable of t).

    source, if given, is a callable t -> (s_phi, s_psi) of grid-shaped
    forcing arrays; used by the manufactured-solution tests.
    """
    if scheme not in _FLOW_SCHEMES:
        raise ConfigurationError(f"scheme must be one of {_FLOW_SCHEMES}, got {scheme!r}")
    if not (dt > 0) or not np.isfinite(dt):
        raise ConfigurationError(f"dt must be positive and finite, got {dt}")
    g_shape = (op.grid.nx, op.grid.nz)
    if field_in.phi.shape != g_shape:
        raise ShapeError(f"field shape {field_in.phi.shape} does not match grid {g_shape}")
    n = op.n_nodes

    y = np.concatenate([field_in.phi.ravel(), field_in.psi.ravel()])
    y[n + op.kj_cols] = 0.0

    def rhs_forcing(tm):
        b = np.zeros(2 * n)
        b[n:] = op.injection(_resolve_neumann(neumann, tm, op.grid))
        if source is not None:
            s_phi, s_psi = source(tm)
            b[:n] += np.asarray(s_phi, dtype=float).ravel()
            b[n:] += np.asarray(s_psi, dtype=float).ravel()
        b[n + op.kj_cols] = 0.0
        return b

    if scheme == "implicit-midpoint":
        key = ("im", round(float(dt), 14))
        if key not in op._lu:
            op._lu[key] = spla.splu(sp.csc_matrix(sp.identity(2 * n) - 0.5 * dt * op.A))
        lu = op._lu[key]
        rhs = y + 0.5 * dt * (op.A @ y) + dt * rhs_forcing(t + 0.5 * dt)
        y_new = lu.solve(rhs)
    else:
        hmin = min(op.grid.hx, op.grid.hz)
        mu_hat = float(np.max(op.mu_field)) + float(np.max(op.sponge))
        smax = 2.0 * np.sqrt(1.0 / op.grid.hx**2 + 1.0 / op.grid.hz**2) \
            + abs(op.params.U) / hmin + np.sqrt(mu_hat)
        dt_max = 0.9 * 2.0 * np.sqrt(2.0) / smax
        if dt > dt_max:
            raise StepFailure(f"explicit step dt={dt:.3e} exceeds stability bound {dt_max:.3e}")
        def f(tm, u):
            return op.A @ u + rhs_forcing(tm)
        k1 = f(t, y)
        k2 = f(t + 0.5 * dt, y + 0.5 * dt * k1)
        k3 = f(t + 0.5 * dt, y + 0.5 * dt * k2)
        k4 = f(t + dt, y + dt * k3)
        y_new = y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)

    kj_residual = float(np.max(np.abs(y_new[n + op.kj_cols]))) if len(op.kj_cols) else 0.0
    y_new[n + op.kj_cols] = 0.0
    if not np.isfinite(y_new).all():
        raise StepFailure("flow step diverged (non-finite field)")

    out = FlowField(y_new[:n].reshape(g_shape), y_new[n:].reshape(g_shape))
    return out, {"kj_residual": kj_residual, "scheme": scheme}


def run_flow(field: FlowField, neumann, dt: float, n_steps: int, op: FlowOperator,
             scheme: str = "implicit-midpoint", source=None, observer=None) -> FlowField:
    t = 0.0
    cur = field
    for i in range(n_steps):
        cur, _ = step_flow(cur, neumann, dt, op, scheme=scheme, t=t, source=source)
        t += dt
        if observer is not None:
            observer(i + 1, t, cur)
    return cur


def _window_indices(op: FlowOperator):
    x_lo, x_hi, z_hi = op.grid.window
    x, z = op.grid.x, op.grid.z
    ix = np.where((x >= x_lo - 1e-12) & (x <= x_hi + 1e-12))[0]
    iz = np.where(z <= z_hi + 1e-12)[0]
    return ix[0], ix[-1], iz[0], iz[-1]


def _window_energy(phi, psi, op: FlowOperator, ix0, ix1, iz0, iz1):
    grid, pr = op.grid, op.params
    hx, hz = grid.hx, grid.hz
    p = phi[ix0:ix1 + 1, iz0:iz1 + 1]
    q = psi[ix0:ix1 + 1, iz0:iz1 + 1]
    tx = _trapezoid(p.shape[0], hx)
    tz = _trapezoid(p.shape[1], hz)
    ww = tx[:, None] * tz[None, :]
    e = 0.5 * float(np.sum(ww * (q**2 + pr.mu * p**2)))
    dxp = np.diff(p, axis=0) / hx
    e += 0.5 * float(np.sum((hx * tz[None, :]) * dxp**2))
    dzp = np.diff(p, axis=1) / hz
    e += 0.5 * float(np.sum((tx[:, None] * hz) * dzp**2))
    return e


def flow_energy(field: FlowField, op: FlowOperator, window: str = "physical") -> float:
    """E_fl = (1/2)(||psi||^2 + ||grad phi||^2 + mu ||phi||^2).

    window="physical" excludes the sponge layers; window="all" integrates the
    whole box with the exact operator quadratures (the quantity implicit
    midpoint conserves when U = 0 and the sponge is off).
    """
    if field.phi.shape != (op.grid.nx, op.grid.nz):
        raise ShapeError(f"field shape {field.phi.shape} does not match grid")
    if window == "all":
        phi = field.phi.ravel()
        psi = field.psi.ravel()
        return 0.5 * float(psi @ (op.w * psi) + phi @ (op.LAP @ phi)
                           + phi @ (op.w * op.mu_field * phi))
    if window == "physical":
        return _window_energy(field.phi, field.psi, op, *_window_indices(op))
    raise ConfigurationError(f"window must be 'physical' or 'all', got {window!r}")


def flow_energy_parts(field: FlowField, op: FlowOperator) -> dict:
    """Physical-window and sponge-layer energies reported separately."""
    phys = flow_energy(field, op, window="physical")
    total = _window_energy(field.phi, field.psi, op, 0, op.grid.nx - 1, 0, op.grid.nz - 1)
    return {"physical": phys, "sponge": total - phys, "total": total}
