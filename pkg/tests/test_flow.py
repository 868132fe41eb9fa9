"""Flow discretization tests.

The weak-form Laplacian and SBP advection are built so that several
identities hold to machine precision (Green identity, constant-field
response, exact KJ enforcement, U=0 energy conservation); those are asserted
at roundoff scale.  Truncation-level behavior (plane-wave symbol, the
manufactured-solution order, sponge leakage) uses measured constants.
"""
import numpy as np
import pytest

from flowbeam.beam import BeamGrid, BeamParams, BeamState, assemble_beam_operator
from flowbeam.errors import ConfigurationError, ShapeError, StepFailure
from flowbeam.flow import (
    FlowField,
    FlowGrid,
    FlowParams,
    assemble_flow_operator,
    boundary_data,
    flow_energy,
    flow_energy_parts,
    run_flow,
    step_flow,
)
from flowbeam.util import convergence_slope


def small_grid(**kw):
    return FlowGrid(-0.75, 1.75, 1.0, nx=21, nz=9, **kw)


def compact_bump(X, Z, cx, cz, r0):
    r2 = (X - cx) ** 2 + (Z - cz) ** 2
    return np.where(r2 < r0**2, ((r0**2 - r2) / r0**2) ** 4, 0.0)


# ---------------------------------------------------------------- validation

def test_params_reject_supersonic():
    with pytest.raises(ConfigurationError, match="subsonic"):
        FlowParams(U=1.0)
    with pytest.raises(ConfigurationError):
        FlowParams(U=0.5, mu=-1.0)


def test_grid_invariants():
    with pytest.raises(ConfigurationError):
        FlowGrid(0.5, 1.75, 1.0, nx=21, nz=9)          # beam not inside box
    with pytest.raises(ConfigurationError):
        FlowGrid(-0.8, 1.75, 1.0, nx=21, nz=9)         # endpoints off-node
    with pytest.raises(ConfigurationError):
        FlowGrid(-0.75, 1.75, 1.0, nx=21, nz=9, sponge_width=0.9)
    with pytest.raises(ConfigurationError):
        FlowGrid(-0.75, 1.75, 1.0, nx=21, nz=9, junction="middle")


def test_field_validation():
    with pytest.raises(ShapeError):
        FlowField(np.zeros((4, 5)), np.zeros((5, 4)))
    bad = np.zeros((4, 5))
    bad[1, 1] = np.inf
    with pytest.raises(ShapeError):
        FlowField(bad, np.zeros((4, 5)))


def test_step_argument_validation():
    g = small_grid()
    op = assemble_flow_operator(g, FlowParams(U=0.0, mu=1.0))
    f = FlowField.zeros(g)
    with pytest.raises(ConfigurationError):
        step_flow(f, None, -1.0, op)
    with pytest.raises(ConfigurationError):
        step_flow(f, None, 1e-2, op, scheme="euler")
    with pytest.raises(ShapeError):
        step_flow(f, np.zeros(3), 1e-2, op)


def test_conforming_grid_matches_beam_spacing():
    bg = BeamGrid(33)
    fg = FlowGrid.conforming(bg, margin=0.5, height=0.75, sponge_width=0.25)
    assert abs(fg.hx - bg.h) <= 1e-15
    assert len(fg.beam_index_range) == 33
    assert fg.x[fg.beam_index_range[0]] == pytest.approx(0.0, abs=1e-12)
    assert fg.x[fg.beam_index_range[-1]] == pytest.approx(1.0, abs=1e-12)


# ----------------------------------------------------------- exact identities

def test_green_identity_is_machine_exact():
    """<(Delta-mu) phi, phi>_W + ||G phi||^2 + mu ||phi||^2 = -flux terms."""
    rng = np.random.default_rng(1)
    g = small_grid()
    op = assemble_flow_operator(g, FlowParams(U=0.3, mu=1.0))
    phi = rng.standard_normal((g.nx, g.nz))
    p = phi.ravel()
    quad = float(p @ (op.LAP @ p) + p @ (op.w * op.mu_field * p))
    lhs = float((op.delta_mu(phi).ravel() * op.w) @ p)
    assert abs(lhs + quad) <= 1e-12 * max(quad, 1.0)

    gdat = rng.standard_normal(len(g.beam_index_range))
    lhs2 = float((op.delta_mu(phi, neumann=gdat).ravel() * op.w) @ p)
    flux = float(op.mb @ (gdat * p[op.neumann_cols]))
    assert abs(lhs2 + quad + flux) <= 1e-12 * max(quad, 1.0)


def test_constant_field_response():
    op = assemble_flow_operator(small_grid(), FlowParams(U=0.0, mu=1.0))
    out = op.delta_mu(3.7 * np.ones((21, 9)))
    assert np.max(np.abs(out + 3.7)) <= 1e-12


def test_plane_wave_symbol():
    """Interior x-rows reproduce the exact difference symbol of cos(kx),
    which sits within h^2 of -k^2."""
    g = small_grid()
    op = assemble_flow_operator(g, FlowParams(U=0.0, mu=0.0))
    k = 3.0
    pw = np.cos(k * g.x)[:, None] * np.ones((1, g.nz))
    sym = 2.0 * (1 - np.cos(k * g.hx)) / g.hx**2
    out = op.delta_mu(pw)
    assert np.max(np.abs(out[1:-1, :] + sym * pw[1:-1, :])) <= 1e-12
    assert abs(sym - k**2) <= 1.01 * k**4 * g.hx**2 / 12.0


def test_advection_row_on_linear_field():
    g = small_grid()
    op = assemble_flow_operator(g, FlowParams(U=0.5, mu=1.0))
    phi = g.x[:, None] * np.ones((1, g.nz))
    y = np.concatenate([phi.ravel(), np.zeros(op.n_nodes)])
    phi_rate = (op.A @ y)[: op.n_nodes]
    assert np.max(np.abs(phi_rate + 0.5)) <= 1e-13


# -------------------------------------------------------------- boundary data

def test_boundary_data_trivial_cases():
    bg = BeamGrid(21)
    bop = assemble_beam_operator(bg, BeamParams())
    pr = FlowParams(U=0.3)
    zero = boundary_data(BeamState.zeros(bg), bop, 1, pr)
    assert np.all(zero == 0.0)
    vel = BeamState(np.zeros(21), np.concatenate(([0.0], np.ones(20))))
    for sigma in (0, 1):
        d = boundary_data(vel, bop, sigma, pr)
        assert np.max(np.abs(d[1:] - 1.0)) == 0.0


def test_boundary_data_quadratic_oracle():
    """w = x^2, v = 0, sigma = 1, U = 0.3 gives data 0.6 x."""
    bg = BeamGrid(21)
    bop = assemble_beam_operator(bg, BeamParams())
    fg = FlowGrid.conforming(bg, margin=0.5, height=0.75)
    d = boundary_data(BeamState(bg.x**2, np.zeros(21)), bop, 1,
                      FlowParams(U=0.3), flow_grid=fg)
    assert np.max(np.abs(d - 0.6 * bg.x)) <= 1e-12


def test_boundary_data_conformity_and_sigma_errors():
    bg = BeamGrid(21)
    bop = assemble_beam_operator(bg, BeamParams())
    with pytest.raises(ConfigurationError):
        boundary_data(BeamState.zeros(bg), bop, 2, FlowParams(U=0.3))
    mismatched = FlowGrid(-0.75, 1.75, 1.0, nx=31, nz=9)
    with pytest.raises(ShapeError):
        boundary_data(BeamState.zeros(bg), bop, 1, FlowParams(U=0.3),
                      flow_grid=mismatched)


# ------------------------------------------------------------- time stepping

def test_zero_field_stays_zero():
    g = small_grid()
    op = assemble_flow_operator(g, FlowParams(U=0.4, mu=1.0))
    f = run_flow(FlowField.zeros(g), None, 0.01, 5, op)
    assert np.all(f.phi == 0.0) and np.all(f.psi == 0.0)


def test_kj_condition_enforced_exactly():
    g = small_grid()
    op = assemble_flow_operator(g, FlowParams(U=0.4, mu=1.0))
    rng = np.random.default_rng(5)
    phi = rng.standard_normal((g.nx, g.nz))
    psi = rng.standard_normal((g.nx, g.nz))
    f = FlowField(phi, psi)
    gdat = rng.standard_normal(len(g.beam_index_range))
    for _ in range(3):
        f, info = step_flow(f, gdat, 0.01, op)
        assert np.max(np.abs(f.psi.ravel()[op.kj_cols])) == 0.0
        assert info["kj_residual"] <= 1e-12


def test_junction_flip_moves_endpoints_to_kj_side():
    g_beam = small_grid(junction="beam")
    g_flow = small_grid(junction="flow")
    op_b = assemble_flow_operator(g_beam, FlowParams(U=0.3, mu=1.0))
    op_f = assemble_flow_operator(g_flow, FlowParams(U=0.3, mu=1.0))
    assert len(op_f.neumann_cols) == len(op_b.neumann_cols) - 2
    ends = {g_beam.beam_index_range[0] * g_beam.nz,
            g_beam.beam_index_range[-1] * g_beam.nz}
    assert ends.isdisjoint(set(op_f.neumann_cols.tolist()))
    assert ends.issubset(set(op_f.kj_cols.tolist()))


def test_midpoint_conserves_energy_at_rest():
    """U = 0, mu > 0, no sponge, zero data: E_fl drift at solver roundoff."""
    g = FlowGrid(-0.75, 1.75, 1.0, nx=41, nz=17)
    op = assemble_flow_operator(g, FlowParams(U=0.0, mu=1.0))
    X, Z = np.meshgrid(g.x, g.z, indexing="ij")
    f = FlowField(np.exp(-30 * ((X - 0.5) ** 2 + (Z - 0.5) ** 2)), np.zeros_like(X))
    e0 = flow_energy(f, op, window="all")
    worst = 0.0
    for _ in range(50):
        f, _ = step_flow(f, None, 0.02, op)
        worst = max(worst, abs(flow_energy(f, op, window="all") - e0))
    assert worst / e0 <= 1e-12


def test_sponge_only_removes_energy():
    g = FlowGrid(-1.5, 2.5, 1.5, nx=41, nz=16, sponge_width=0.5)
    op = assemble_flow_operator(g, FlowParams(U=0.0, mu=1.0, sponge_strength=40.0))
    X, Z = np.meshgrid(g.x, g.z, indexing="ij")
    f = FlowField(compact_bump(X, Z, 0.5, 0.5, 0.3), np.zeros_like(X))
    e = flow_energy(f, op, window="all")
    e_start = e
    for _ in range(100):
        f, _ = step_flow(f, None, 0.02, op)
        en = flow_energy(f, op, window="all")
        assert en <= e + 1e-13 * e_start
        e = en
    assert e < 0.9 * e_start


def test_sponge_is_local_until_wave_arrival():
    """Sponge on/off runs agree inside the physical window while the pulse
    is separated from the layer (measured leakage 6e-12 at this gap), then
    diverge once the wave reaches it."""
    g = FlowGrid(-1.5, 2.5, 2.0, nx=81, nz=41, sponge_width=0.5)
    X, Z = np.meshgrid(g.x, g.z, indexing="ij")
    p0 = compact_bump(X, Z, 0.5, 0.35, 0.25)
    op_on = assemble_flow_operator(g, FlowParams(U=0.4, mu=1.0, sponge_strength=40.0))
    op_off = assemble_flow_operator(g, FlowParams(U=0.4, mu=1.0, sponge_strength=0.0))
    ix0, ix1 = np.searchsorted(g.x, -1.0), np.searchsorted(g.x, 2.0)
    iz1 = np.searchsorted(g.z, 1.5)
    fa = FlowField(p0.copy(), np.zeros_like(p0))
    fb = FlowField(p0.copy(), np.zeros_like(p0))
    worst = 0.0
    for k in range(150):
        fa, _ = step_flow(fa, None, 0.01, op_on)
        fb, _ = step_flow(fb, None, 0.01, op_off)
        if (k + 1) * 0.01 <= 0.5:
            d = max(np.max(np.abs((fa.phi - fb.phi)[ix0:ix1 + 1, :iz1 + 1])),
                    np.max(np.abs((fa.psi - fb.psi)[ix0:ix1 + 1, :iz1 + 1])))
            worst = max(worst, d)
    assert worst <= 1e-10
    final = np.max(np.abs((fa.phi - fb.phi)[ix0:ix1 + 1, :iz1 + 1]))
    assert final > 1e-3


def test_rk4_runs_and_guards_cfl():
    g = small_grid()
    op = assemble_flow_operator(g, FlowParams(U=0.3, mu=1.0))
    X, Z = np.meshgrid(g.x, g.z, indexing="ij")
    f = FlowField(compact_bump(X, Z, 0.5, 0.5, 0.3), np.zeros_like(X))
    f2, info = step_flow(f, None, 0.01, op, scheme="rk4")
    assert info["scheme"] == "rk4"
    assert np.isfinite(f2.phi).all()
    with pytest.raises(StepFailure):
        step_flow(f, None, 0.5, op, scheme="rk4")


# ------------------------------------------------------------------- energy

def test_window_energy_closed_forms():
    g = FlowGrid(-1.5, 2.5, 1.5, nx=41, nz=16, sponge_width=0.5)
    x_lo, x_hi, z_hi = g.window
    area = (x_hi - x_lo) * z_hi
    op = assemble_flow_operator(g, FlowParams(U=0.0, mu=1.0))
    f1 = FlowField(np.zeros((g.nx, g.nz)), np.ones((g.nx, g.nz)))
    assert abs(flow_energy(f1, op) - 0.5 * area) <= 1e-12
    op0 = assemble_flow_operator(g, FlowParams(U=0.0, mu=0.0))
    Z = np.meshgrid(g.x, g.z, indexing="ij")[1]
    f2 = FlowField(Z.copy(), np.zeros_like(Z))
    assert abs(flow_energy(f2, op0) - 0.5 * area) <= 1e-12
    with pytest.raises(ConfigurationError):
        flow_energy(f1, op, window="everything")


def test_energy_parts_sum():
    g = FlowGrid(-1.5, 2.5, 1.5, nx=41, nz=16, sponge_width=0.5)
    op = assemble_flow_operator(g, FlowParams(U=0.2, mu=1.0, sponge_strength=10.0))
    rng = np.random.default_rng(9)
    f = FlowField(rng.standard_normal((g.nx, g.nz)), rng.standard_normal((g.nx, g.nz)))
    parts = flow_energy_parts(f, op)
    assert parts["physical"] >= 0 and parts["sponge"] >= 0
    assert abs(parts["physical"] + parts["sponge"] - parts["total"]) <= 1e-12 * parts["total"]


# ----------------------------------------------------- manufactured solution

def test_manufactured_solution_second_order():
    """Compactly supported separable solution with exact Neumann forcing on
    the beam footprint; measured error ratios 3.6 and 4.2 under halving."""
    sympy = pytest.importorskip("sympy")
    x, z, t = sympy.symbols("x z t")
    U, mu, zm = 0.4, 1.0, 1.0
    a, b = 0.15, 0.85
    X = ((x - a) * (b - x)) ** 4 / (0.35 * 0.35) ** 4
    phi = sympy.cos(2 * t) * X * (1 - z / zm) ** 3
    psi = sympy.diff(phi, t) + U * sympy.diff(phi, x)
    s_psi = (sympy.diff(psi, t) + U * sympy.diff(psi, x)
             - (sympy.diff(phi, x, 2) + sympy.diff(phi, z, 2)) + mu * phi)
    g_exact = sympy.diff(phi, z).subs(z, 0)

    def lamb(expr):
        fn = sympy.lambdify((x, z, t), expr, "numpy")
        return lambda xx, zz, tt: np.asarray(fn(xx, zz, tt), dtype=float) * np.ones_like(xx)

    phi_f, psi_f, spsi_f = lamb(phi), lamb(psi), lamb(s_psi)
    g_f = sympy.lambdify((x, t), g_exact, "numpy")

    errs, hs = [], []
    for k in (2, 4, 8):
        grid = FlowGrid(-0.75, 1.75, zm, nx=10 * k + 1, nz=4 * k + 1)
        op = assemble_flow_operator(grid, FlowParams(U=U, mu=mu))
        XX, ZZ = np.meshgrid(grid.x, grid.z, indexing="ij")
        msk = ((XX > a) & (XX < b)).astype(float)
        f = FlowField(phi_f(XX, ZZ, 0.0) * msk, psi_f(XX, ZZ, 0.0) * msk)

        def source(tm, XX=XX, ZZ=ZZ, msk=msk):
            return np.zeros_like(XX), spsi_f(XX, ZZ, tm) * msk

        def neum(tm, grid=grid):
            xb = grid.x[grid.beam_index_range]
            return (np.asarray(g_f(xb, tm), dtype=float)
                    * ((xb > a) & (xb < b)).astype(float))

        f = run_flow(f, neum, 0.05 / k, 10 * k, op, source=source)
        e_phi = f.phi - phi_f(XX, ZZ, 0.5) * msk
        e_psi = f.psi - psi_f(XX, ZZ, 0.5) * msk
        errs.append(np.sqrt(float((e_phi.ravel()**2 + e_psi.ravel()**2) @ op.w)))
        hs.append(grid.hx)
    assert convergence_slope(hs, errs) >= 1.7
