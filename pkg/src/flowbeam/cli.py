"""Command-line scenarios: config parsing, named initial data, artifacts.

Configs are JSON trees.  parse_config applies defaults and validates, and
the resulting normalized echo (every field materialized, defaults included)
is what the manifest records, so a manifest plus the seed reproduces a run
byte for byte.  Output files are written atomically (temporary file in the
target directory, then rename); grid snapshots carry a small versioned
binary header ahead of raw little-endian float64 fields.

Exit codes: 0 success, 2 configuration error, 3 solver failure, 4 violated
runtime assertion.  Failures also leave a JSON error record in the manifest.
"""
import argparse
import copy
import hashlib
import json
import os
import platform
import struct
import sys
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy
from numpy.polynomial import Polynomial as P

from . import __version__
from .beam import (
    BeamGrid,
    BeamParams,
    BeamState,
    assemble_beam_operator,
    beam_accel,
    beam_energy,
    run_beam,
)
from .coupled import (
    CoupledState,
    FixedPointConfig,
    assemble_generator,
    delta_sweep,
    dissipativity_check,
    mu_sweep,
    run_coupled,
)
from .diagnostics import EnergyLedger, blowup_monitor, trace_bound_check
from .elliptic import ResolventData, reconstruct_antiderivative, resolvent_solve
from .errors import (
    AssertionFailure,
    ConfigurationError,
    ShapeError,
    SolverFailure,
    UsageError,
)
from .flow import FlowField, FlowGrid, FlowParams
from .util import convergence_slope

__all__ = [
    "EXIT_OK", "EXIT_CONFIG", "EXIT_SOLVER", "EXIT_ASSERTION", "SCENARIOS",
    "SimConfig", "parse_config", "initial_data", "write_snapshot",
    "read_snapshot", "run_scenario", "main",
]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_ASSERTION = 4

SCENARIOS = ("simulate", "beam-only", "resolvent-check", "dissipativity-check",
             "delta-sweep", "mu-sweep", "trace-diagnostic", "convergence-study")

_REQUIRED = object()

_DEFAULTS = {
    "flow": {"U": 0.3, "mu": 1.0, "sponge_strength": 40.0, "mu_inflation": 0.0},
    "beam": {"D": 1.0, "delta": 0.0, "beta": 1},
    "grid": {"beam_points": 17, "length": 1.0, "margin": 1.0, "height": 1.0,
             "sponge_width": 0.0, "junction": "beam"},
    "time": {"dt": _REQUIRED, "horizon_T": _REQUIRED},
    "scheme": "implicit-midpoint",
    "sigma": 1,
    "fixed_point": {"ball_radius": 10.0, "tol": 1e-9, "max_iters": 40,
                    "window_T": 0.25},
    "sweeps": {"deltas": [1e-1, 1e-2, 1e-3, 0.0], "mus": [2.0, 1.0, 0.5],
               "Us": [0.2, 0.5, 0.8], "amplitudes": [0.25, 0.5, 1.0]},
    "initial_data": {"name": "beam-tip-bump", "amplitude": 0.1},
    "output": {"directory": ".", "snapshot_every": 0, "formats": ["csv", "json"]},
    "seed": 0,
}


# ---------------------------------------------------------------------------
# configuration


def _merge_defaults(defaults: dict, given: dict, prefix: str = "") -> dict:
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ConfigurationError(
            f"unknown config field {prefix + unknown[0]!r}")
    out = {}
    for key, dval in defaults.items():
        if isinstance(dval, dict):
            sub = given.get(key, {})
            if not isinstance(sub, dict):
                raise ConfigurationError(
                    f"config field {prefix + key!r} must be a mapping")
            out[key] = _merge_defaults(dval, sub, prefix=f"{prefix}{key}.")
        else:
            val = given.get(key, dval)
            out[key] = val if val is _REQUIRED else copy.deepcopy(val)
    return out


def _require(tree: dict, section: str, field: str):
    if tree[section][field] is _REQUIRED:
        raise ConfigurationError(f"missing required field '{section}.{field}'")


@dataclass
class SimConfig:
    """Fully validated run configuration plus the assembled grid objects.

    `normalized` is the canonical echo: every field present, defaults
    materialized; its SHA-256 over sorted compact JSON is `config_hash`.
    """

    flow_params: FlowParams
    beam_params: BeamParams
    beam_grid: BeamGrid
    flow_grid: FlowGrid
    dt: float
    horizon_T: float
    scheme: str
    sigma: int
    fixed_point: FixedPointConfig
    sweeps: dict
    initial_name: str
    amplitude: float
    output_dir: str
    snapshot_every: int
    formats: tuple
    seed: int
    normalized: dict

    @property
    def config_hash(self) -> str:
        canon = json.dumps(self.normalized, sort_keys=True,
                           separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def n_steps(self) -> int:
        n = int(round(self.horizon_T / self.dt))
        if abs(n * self.dt - self.horizon_T) > 1e-9 * self.horizon_T:
            raise ConfigurationError(
                f"horizon_T={self.horizon_T} is not an integer number of "
                f"steps of dt={self.dt}")
        return n


def parse_config(source) -> SimConfig:
    """Build a SimConfig from a mapping, JSON text, or a JSON file path.

    Defaults are applied and documented: the returned config's `normalized`
    attribute carries every field explicitly.  Unknown fields, a missing
    `time.dt` or `time.horizon_T`, |U| >= 1, nonpositive steps or horizons,
    unknown scheme or generator names, and malformed JSON are all rejected
    with named errors.
    """
    if isinstance(source, dict):
        raw = source
    else:
        text = None
        if isinstance(source, os.PathLike):
            text = Path(source).read_text()
        elif isinstance(source, str):
            if source.lstrip()[:1] in ("{", "["):
                text = source
            else:
                path = Path(source)
                if not path.exists():
                    raise ConfigurationError(f"config file not found: {source}")
                text = path.read_text()
        else:
            raise ConfigurationError(
                f"config source must be a mapping, JSON text, or a path, "
                f"got {type(source).__name__}")
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigurationError("config JSON must be an object")

    tree = _merge_defaults(_DEFAULTS, raw)
    _require(tree, "time", "dt")
    _require(tree, "time", "horizon_T")

    U = float(tree["flow"]["U"])
    if not abs(U) < 1.0:
        raise ConfigurationError(
            f"subsonic regime required: |flow.U| must be < 1, got {U}")
    dt = float(tree["time"]["dt"])
    if not (dt > 0 and np.isfinite(dt)):
        raise ConfigurationError(f"time.dt must be positive, got {dt}")
    horizon = float(tree["time"]["horizon_T"])
    if not (horizon > 0 and np.isfinite(horizon)):
        raise ConfigurationError(
            f"time.horizon_T must be positive, got {horizon}")
    scheme = tree["scheme"]
    if scheme not in ("implicit-midpoint", "staggered", "newmark"):
        raise ConfigurationError(
            f"scheme must be 'implicit-midpoint', 'staggered', or 'newmark', "
            f"got {scheme!r}")
    sigma = tree["sigma"]
    if sigma not in (0, 1):
        raise ConfigurationError(f"sigma must be 0 or 1, got {sigma}")
    name = tree["initial_data"]["name"]
    if name not in _GENERATORS:
        raise ConfigurationError(
            f"unknown initial data {name!r}; available: "
            f"{', '.join(sorted(_GENERATORS))}")
    formats = tree["output"]["formats"]
    bad = sorted(set(formats) - {"csv", "json"})
    if bad:
        raise ConfigurationError(
            f"unknown output format {bad[0]!r} (csv and json are supported)")
    every = tree["output"]["snapshot_every"]
    if not (isinstance(every, int) and every >= 0):
        raise ConfigurationError(
            f"output.snapshot_every must be a nonnegative integer, got {every}")
    seed = tree["seed"]
    if not isinstance(seed, int):
        raise ConfigurationError(f"seed must be an integer, got {seed!r}")
    for key in ("deltas", "mus", "Us", "amplitudes"):
        if not isinstance(tree["sweeps"][key], list):
            raise ConfigurationError(f"sweeps.{key} must be a list")

    g = tree["grid"]
    beam_grid = BeamGrid(int(g["beam_points"]), float(g["length"]))
    flow_grid = FlowGrid.conforming(
        beam_grid, margin=float(g["margin"]), height=float(g["height"]),
        sponge_width=float(g["sponge_width"]), junction=g["junction"])
    flow_params = FlowParams(U=U, mu=float(tree["flow"]["mu"]),
                             sponge_strength=float(tree["flow"]["sponge_strength"]),
                             mu_inflation=float(tree["flow"]["mu_inflation"]))
    beam_params = BeamParams(D=float(tree["beam"]["D"]),
                             delta=float(tree["beam"]["delta"]),
                             beta=int(tree["beam"]["beta"]))
    fp = tree["fixed_point"]
    fixed_point = FixedPointConfig(ball_radius=float(fp["ball_radius"]),
                                   tol=float(fp["tol"]),
                                   max_iters=int(fp["max_iters"]),
                                   window_T=float(fp["window_T"]))

    return SimConfig(
        flow_params=flow_params, beam_params=beam_params,
        beam_grid=beam_grid, flow_grid=flow_grid,
        dt=dt, horizon_T=horizon, scheme=scheme, sigma=sigma,
        fixed_point=fixed_point, sweeps=tree["sweeps"],
        initial_name=name, amplitude=float(tree["initial_data"]["amplitude"]),
        output_dir=str(tree["output"]["directory"]),
        snapshot_every=every, formats=tuple(formats), seed=seed,
        normalized=tree,
    )


# ---------------------------------------------------------------------------
# named initial data


def _data_zero(amp, flow_grid, beam_grid):
    nb = beam_grid.n_points
    return CoupledState(FlowField.zeros(flow_grid),
                        BeamState(np.zeros(nb), np.zeros(nb)))


def _data_tip_bump(amp, flow_grid, beam_grid):
    # uniform-load shape: clamped at 0, zero curvature and shear at the tip
    s = beam_grid.x / beam_grid.L_beam
    w = amp * (6 * s**2 - 4 * s**3 + s**4) / 3.0
    return CoupledState(FlowField.zeros(flow_grid),
                        BeamState(w, np.zeros_like(w)))


def _data_flow_pulse(amp, flow_grid, beam_grid):
    state = _data_zero(amp, flow_grid, beam_grid)
    X, Z = np.meshgrid(flow_grid.x, flow_grid.z, indexing="ij")
    xc = 0.5 * beam_grid.L_beam
    zc = 0.5 * flow_grid.z_max
    r = flow_grid.z_max / 3.0
    state.flow.phi[:] = amp * np.exp(-((X - xc) ** 2 + (Z - zc) ** 2) / r**2)
    return state


_GENERATORS = {
    "zero": _data_zero,
    "beam-tip-bump": _data_tip_bump,
    "flow-pulse": _data_flow_pulse,
    # frequency-domain data, consumed by their scenarios rather than
    # instantiated as a time-domain state
    "manufactured-resolvent": None,
    "manufactured-ode": None,
}


def initial_data(name: str, amplitude: float, flow_grid: FlowGrid,
                 beam_grid: BeamGrid) -> CoupledState:
    """Instantiate a named generator on the given grids."""
    if name not in _GENERATORS:
        raise ConfigurationError(
            f"unknown initial data {name!r}; available: "
            f"{', '.join(sorted(_GENERATORS))}")
    builder = _GENERATORS[name]
    if builder is None:
        raise UsageError(
            f"{name} is frequency-domain data; use the resolvent-check or "
            f"convergence-study scenario")
    return builder(amplitude, flow_grid, beam_grid)


# ---------------------------------------------------------------------------
# artifact output


def _atomic_bytes(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_json(path: Path, obj) -> None:
    _atomic_bytes(path, (json.dumps(obj, sort_keys=True, indent=2,
                                    default=_jsonable) + "\n").encode())


def _jsonable(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


def _write_ledger(ledger: EnergyLedger, path: Path) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    os.close(fd)
    try:
        ledger.to_csv(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


_SNAP_MAGIC = b"FBSNAP01"


def write_snapshot(path, state: CoupledState) -> None:
    """Binary state dump: 8-byte version magic, (nx, nz, nb, t) header,
    then phi, psi, w, v as little-endian float64."""
    phi = np.ascontiguousarray(state.flow.phi, dtype="<f8")
    psi = np.ascontiguousarray(state.flow.psi, dtype="<f8")
    w = np.ascontiguousarray(state.beam.w, dtype="<f8")
    v = np.ascontiguousarray(state.beam.v, dtype="<f8")
    nx, nz = phi.shape
    header = struct.pack("<IIId", nx, nz, w.shape[0], float(state.t))
    _atomic_bytes(Path(path), _SNAP_MAGIC + header + phi.tobytes()
                  + psi.tobytes() + w.tobytes() + v.tobytes())


def read_snapshot(path) -> dict:
    """Inverse of write_snapshot; returns arrays keyed phi, psi, w, v, t."""
    blob = Path(path).read_bytes()
    if blob[:8] != _SNAP_MAGIC:
        raise ConfigurationError(
            f"{path} is not a recognized snapshot (bad or unsupported header)")
    nx, nz, nb, t = struct.unpack_from("<IIId", blob, 8)
    need = 8 + struct.calcsize("<IIId") + 8 * (2 * nx * nz + 2 * nb)
    if len(blob) != need:
        raise ShapeError(f"snapshot {path} is truncated or padded "
                         f"({len(blob)} bytes, expected {need})")
    off = 8 + struct.calcsize("<IIId")
    flat = np.frombuffer(blob, dtype="<f8", offset=off)
    k = nx * nz
    return {"t": t,
            "phi": flat[:k].reshape(nx, nz).copy(),
            "psi": flat[k:2 * k].reshape(nx, nz).copy(),
            "w": flat[2 * k:2 * k + nb].copy(),
            "v": flat[2 * k + nb:].copy()}


# ---------------------------------------------------------------------------
# scenarios


def _assemble(cfg: SimConfig):
    return assemble_generator(cfg.flow_grid, cfg.flow_params, cfg.beam_grid,
                              cfg.beam_params, sigma=cfg.sigma)


def _initial(cfg: SimConfig) -> CoupledState:
    return initial_data(cfg.initial_name, cfg.amplitude, cfg.flow_grid,
                        cfg.beam_grid)


def _coupled_scheme(cfg: SimConfig) -> str:
    if cfg.scheme == "newmark":
        raise ConfigurationError(
            "newmark integrates the beam alone; coupled scenarios take "
            "implicit-midpoint or staggered")
    return cfg.scheme


def _beam_scheme(cfg: SimConfig) -> str:
    if cfg.scheme == "staggered":
        raise ConfigurationError(
            "staggered splits the coupled system; beam-only takes "
            "implicit-midpoint or newmark")
    return cfg.scheme


def _scenario_simulate(cfg: SimConfig, outdir: Path) -> list:
    scheme = _coupled_scheme(cfg)
    op = _assemble(cfg)
    state = _initial(cfg)
    ledger = EnergyLedger(op, cfg.dt)
    ledger.update(state)
    artifacts = []

    def observer(i, s):
        ledger.update(s)
        if cfg.snapshot_every and i % cfg.snapshot_every == 0:
            name = f"snapshot_{i:06d}.bin"
            write_snapshot(outdir / name, s)
            artifacts.append(name)

    if cfg.snapshot_every:
        write_snapshot(outdir / "snapshot_000000.bin", state)
        artifacts.append("snapshot_000000.bin")
    run_coupled(op, state, cfg.dt, cfg.n_steps(), observer=observer,
                scheme=scheme)

    if "csv" in cfg.formats:
        _write_ledger(ledger, outdir / "ledger.csv")
        artifacts.append("ledger.csv")
    if "json" in cfg.formats:
        res0 = ledger.column("balance_residual_level0")
        summary = {
            "n_steps": cfg.n_steps(),
            "final": ledger.rows[-1],
            "sup_balance_residual_level0": float(np.max(np.abs(res0))),
            "blowup": {k: v for k, v in blowup_monitor(ledger).items()
                       if k != "M1"},
        }
        _write_json(outdir / "summary.json", summary)
        artifacts.append("summary.json")
    return artifacts


def _scenario_beam_only(cfg: SimConfig, outdir: Path) -> list:
    bop = assemble_beam_operator(cfg.beam_grid, cfg.beam_params)
    state = _initial(cfg).beam
    rows = []

    def record(t, s):
        w_tt = beam_accel(bop, s.w, s.v)
        rows.append({
            "t": t,
            "E0": beam_energy(bop, s, level=0),
            "E1": beam_energy(bop, s, level=1, w_tt=w_tt),
            "E2": beam_energy(bop, s, level=2),
            "V": bop.params.D * bop.inextensibility_energy(s.w),
        })

    record(0.0, state)
    run_beam(bop, state, cfg.dt, cfg.n_steps(), scheme=_beam_scheme(cfg),
             observer=lambda i, t, s: record(t, s))

    names = list(rows[0])
    buf = [",".join(names)]
    for row in rows:
        buf.append(",".join(repr(row[k]) for k in names))
    _atomic_bytes(outdir / "beam_ledger.csv", ("\n".join(buf) + "\n").encode())
    return ["beam_ledger.csv"]


def _scenario_dissipativity(cfg: SimConfig, outdir: Path) -> list:
    op = _assemble(cfg)
    report = dissipativity_check(op, n_samples=128, seed=cfg.seed)
    _write_json(outdir / "dissipativity_report.json", report)
    if cfg.sigma == 0 and report["max_ratio"] > 1e-12:
        raise AssertionFailure(
            f"generator form is not skew at sigma=0: max ratio "
            f"{report['max_ratio']:.3e} exceeds 1e-12")
    return ["dissipativity_report.json"]


def _scenario_delta_sweep(cfg: SimConfig, outdir: Path) -> list:
    state = _initial(cfg)
    picard = cfg.fixed_point if cfg.beam_params.beta else None
    report = delta_sweep(state, cfg.sweeps["deltas"], cfg.horizon_T, cfg.dt,
                         cfg.flow_grid, cfg.flow_params, cfg.beam_grid,
                         cfg.beam_params, config=picard, sigma=cfg.sigma)
    slim = {
        "deltas": report["deltas"], "dt": report["dt"],
        "horizon_T": report["horizon_T"], "monotone": report["monotone"],
        "distances": report["distances"],
        "runs": {repr(d): {k: v for k, v in entry.items() if k != "trajectory"}
                 for d, entry in report["runs"].items()},
    }
    _write_json(outdir / "delta_sweep_report.json", slim)
    failed = [repr(d) for d, entry in report["runs"].items()
              if "error" in entry]
    if failed:
        raise AssertionFailure(
            f"delta sweep members failed: {', '.join(failed)}")
    if not report["monotone"]:
        raise AssertionFailure(
            "consecutive-run distances do not decrease down the delta ladder")
    return ["delta_sweep_report.json"]


def _scenario_mu_sweep(cfg: SimConfig, outdir: Path) -> list:
    state = _initial(cfg)
    report = mu_sweep(state, cfg.sweeps["mus"], cfg.horizon_T, cfg.dt,
                      cfg.flow_grid, cfg.flow_params, cfg.beam_grid,
                      cfg.beam_params, sigma=cfg.sigma)
    slim = {repr(m): {k: v for k, v in entry.items() if k != "trajectory"}
            for m, entry in report["runs"].items()}
    _write_json(outdir / "mu_sweep_report.json", {"runs": slim})
    worst = min(entry["ftc_margin_min"] for entry in report["runs"].values())
    if worst < -1e-10:
        raise AssertionFailure(
            f"fundamental-theorem margin went negative: {worst:.3e}")
    return ["mu_sweep_report.json"]


def _scenario_trace_diagnostic(cfg: SimConfig, outdir: Path) -> list:
    # linear battery: the estimate under test concerns the sigma = 1
    # semigroup without the quasilinear force or damping
    nb = cfg.beam_grid.n_points
    g = cfg.normalized["grid"]
    rows = []
    for U in cfg.sweeps["Us"]:
        cs = []
        for n in (nb, 2 * (nb - 1) + 1):
            bg = BeamGrid(n, cfg.beam_grid.L_beam)
            fg = FlowGrid.conforming(bg, margin=g["margin"], height=g["height"],
                                     sponge_width=g["sponge_width"],
                                     junction=g["junction"])
            op = assemble_generator(
                fg, FlowParams(U=U, mu=cfg.flow_params.mu), bg,
                BeamParams(D=cfg.beam_params.D, delta=0.0, beta=0), sigma=1)
            state = initial_data(cfg.initial_name, cfg.amplitude, fg, bg)
            traj = run_coupled(op, state, cfg.dt, cfg.n_steps(), store=True)
            rep = trace_bound_check(op, traj, cfg.dt)
            if not rep["satisfied"]:
                raise AssertionFailure(
                    f"trace bound report not satisfied at U={U}, nb={n}")
            cs.append(rep["c_emp"])
        ratio = cs[1] / cs[0] if cs[0] > 0 else 1.0
        rows.append({"U": U, "c_emp_coarse": cs[0], "c_emp_fine": cs[1],
                     "ratio": ratio})
        if not 0.5 <= ratio <= 2.0:
            _write_json(outdir / "trace_report.json", {"battery": rows})
            raise AssertionFailure(
                f"empirical trace constant moved {ratio:.3f}x under "
                f"refinement at U={U}")
    _write_json(outdir / "trace_report.json", {"battery": rows})
    return ["trace_report.json"]


# smooth compatible resolvent data: a beam-trace-matched potential bump, a
# second field vanishing on the bottom edge off the beam, and a polynomial
# deflection with clamped and free-end conditions built in
_RZ = 1.5
_RA1, _RB1 = -8 / 5, 21 / 10
_RA2, _RB2 = -6 / 5, 9 / 5
_RPHI = P([0, 0, 1]) * (P([-_RA1, 1]) * P([_RB1, -1])) ** 5 / 120
_RPSI = (P([-_RA2, 1]) * P([_RB2, -1])) ** 5 / 800
_RCZ = P([0, 1]) * P([1, 0, -1 / _RZ**2]) ** 2
_RZZ = P([0, 0, 1 / _RZ**2])
_RW = P([0, 0, 5 / 2, -5 / 2, 5 / 4, -1 / 4])


def _resolvent_case(m: int, lam: float, U: float):
    fg = FlowGrid(-6.0, 3.0, _RZ, nx=18 * m + 1, nz=3 * m + 1, junction="flow")
    bg = BeamGrid(2 * m + 1)
    bop = assemble_beam_operator(bg, BeamParams(D=1.0, delta=0.0, beta=0))
    X, Z = np.meshgrid(fg.x, fg.z, indexing="ij")
    m1 = ((fg.x > _RA1) & (fg.x < _RB1))[:, None]
    m2 = ((fg.x > _RA2) & (fg.x < _RB2))[:, None]
    phi_e = np.where(m1, _RPHI(X) * _RCZ(Z), 0.0)
    psi_e = np.where(m2, _RPSI(X) * _RZZ(Z), 0.0)
    f1 = lam * phi_e + U * np.where(m1, _RPHI.deriv()(X) * _RCZ(Z), 0.0) - psi_e
    f2 = (lam * psi_e + U * np.where(m2, _RPSI.deriv()(X) * _RZZ(Z), 0.0)
          - np.where(m1, _RPHI.deriv(2)(X) * _RCZ(Z)
                     + _RPHI(X) * _RCZ.deriv(2)(Z), 0.0)
          + phi_e)
    w_e = _RW(bg.x)
    ib = fg.beam_index_range
    v_e = _RPHI(fg.x[ib[0]:ib[-1] + 1])
    data = ResolventData(f1, f2, lam * w_e - v_e,
                         lam * v_e + _RW.deriv(4)(bg.x))
    st, rep = resolvent_solve(lam, data, fg, bop, FlowParams(U=U, mu=1.0))

    wx = np.full(fg.nx, fg.hx)
    wx[0] /= 2
    wx[-1] /= 2
    wz = np.full(fg.nz, fg.hz)
    wz[0] /= 2
    wz[-1] /= 2
    ww = np.outer(wx, wz)
    err = st.flow.phi - phi_e
    phi_err = float(np.sqrt(np.sum(ww * err**2) / np.sum(ww * phi_e**2)))
    tip_err = float(np.max(np.abs(st.beam.w - w_e)) / np.max(np.abs(w_e)))
    return phi_err, tip_err, rep["certificate"]


def _scenario_resolvent_check(cfg: SimConfig, outdir: Path) -> list:
    m0 = max(4, (cfg.beam_grid.n_points - 1) // 2)
    levels = [m0, 2 * m0, 4 * m0]
    us = [float(u) for u in cfg.sweeps["Us"] if abs(u) < 1.0]
    cases = []
    for lam in (0.5, 1.0, 2.0):
        for U in us:
            phi_errs, tip_errs, certs = zip(
                *[_resolvent_case(m, lam, U) for m in levels])
            hs = [1.0 / m for m in levels]
            case = {"lam": lam, "U": U, "levels": levels,
                    "phi_errors": list(phi_errs), "tip_errors": list(tip_errs),
                    "certificates": list(certs),
                    "phi_slope": convergence_slope(hs, phi_errs),
                    "tip_slope": convergence_slope(hs, tip_errs)}
            cases.append(case)
    _write_json(outdir / "resolvent_report.json", {"cases": cases})
    for case in cases:
        if max(case["certificates"]) > 1e-8:
            raise AssertionFailure(
                f"resolvent algebraic residual {max(case['certificates']):.3e} "
                f"exceeds 1e-8 at lam={case['lam']}, U={case['U']}")
        if min(case["phi_slope"], case["tip_slope"]) < 1.7:
            raise AssertionFailure(
                f"resolvent recovery below design order at lam={case['lam']}, "
                f"U={case['U']}: slopes {case['phi_slope']:.2f}/"
                f"{case['tip_slope']:.2f}")
    return ["resolvent_report.json"]


def _scenario_convergence_study(cfg: SimConfig, outdir: Path) -> list:
    if cfg.initial_name == "manufactured-ode":
        return _ode_study(cfg, outdir)
    scheme = _coupled_scheme(cfg)
    sups = []
    dts = [cfg.dt / 2**k for k in range(3)]
    op = _assemble(cfg)
    state = _initial(cfg)
    for dt in dts:
        ledger = EnergyLedger(op, dt)
        ledger.update(state)
        run_coupled(op, state, dt, int(round(cfg.horizon_T / dt)),
                    observer=lambda i, s: ledger.update(s), scheme=scheme)
        sups.append(float(np.max(np.abs(
            ledger.column("balance_residual_level0")))))
    slope = convergence_slope(dts, sups)
    report = {"mode": "balance-dt", "dts": dts, "sup_residuals": sups,
              "slope": slope}
    _write_json(outdir / "convergence_report.json", report)
    if slope < 1.5:
        raise AssertionFailure(
            f"balance residual decays at slope {slope:.2f}, below 1.5")
    return ["convergence_report.json"]


def _ode_study(cfg: SimConfig, outdir: Path) -> list:
    # transport antiderivative on a Gaussian: exact solution exp(-x^2) with
    # data (1 - 2 U x) exp(-x^2) under the shift lam = 1
    U = cfg.flow_params.U
    if U == 0.0:
        raise ConfigurationError(
            "manufactured-ode needs U != 0 (the U = 0 branch is algebraic)")
    def solve(fg):
        phi_star = np.exp(-fg.x**2)
        data = (1.0 - 2.0 * U * fg.x) * phi_star
        phi, rep = reconstruct_antiderivative(data, 1.0, cfg.flow_params, fg)
        return float(np.max(np.abs(phi - phi_star))), rep

    # halving ladder whose nodes keep hitting x = 0 and x = 1 exactly
    nxs = [131, 261, 521]
    errs = [solve(FlowGrid(-6.0, 7.0, 1.0, nx=nx, nz=4))[0] for nx in nxs]
    slope = convergence_slope([1.0 / n for n in nxs], errs)
    err512, rep = solve(FlowGrid(-6.0, 6.775, 1.0, nx=512, nz=4))
    report = {"mode": "manufactured-ode", "nx": nxs, "sup_errors": errs,
              "slope": slope, "sup_error_512": err512, "tail": rep["tail"],
              "data_tail": rep["data_tail"]}
    _write_json(outdir / "convergence_report.json", report)
    if err512 > 1e-6:
        raise AssertionFailure(
            f"reconstruction error {err512:.3e} exceeds 1e-6 at nx=512")
    if rep["tail"] > 1e-8:
        raise AssertionFailure(
            f"far-field tail {rep['tail']:.3e} exceeds 1e-8 at the box margin")
    return ["convergence_report.json"]


_DISPATCH = {
    "simulate": _scenario_simulate,
    "beam-only": _scenario_beam_only,
    "resolvent-check": _scenario_dissipativity,  # replaced below
    "dissipativity-check": _scenario_dissipativity,
    "delta-sweep": _scenario_delta_sweep,
    "mu-sweep": _scenario_mu_sweep,
    "trace-diagnostic": _scenario_trace_diagnostic,
    "convergence-study": _scenario_convergence_study,
}
_DISPATCH["resolvent-check"] = _scenario_resolvent_check


def run_scenario(cfg: SimConfig, scenario: str) -> int:
    """Execute one scenario; returns the process exit code.

    Artifacts land in cfg.output_dir together with manifest.json (normalized
    config, its hash, package and library versions, wall time, artifact
    list, and the error record when the run failed).
    """
    if scenario not in SCENARIOS:
        raise ConfigurationError(
            f"unknown scenario {scenario!r}; available: {', '.join(SCENARIOS)}")
    outdir = Path(cfg.output_dir)
    try:
        outdir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigurationError(
            f"output directory {outdir} is not writable: {exc}") from exc

    start = time.perf_counter()
    artifacts: list = []
    error = None
    code = EXIT_OK
    try:
        artifacts = _DISPATCH[scenario](cfg, outdir)
    except AssertionFailure as exc:
        code, error = EXIT_ASSERTION, exc
    except SolverFailure as exc:
        code, error = EXIT_SOLVER, exc
    except (ConfigurationError, UsageError) as exc:
        code, error = EXIT_CONFIG, exc

    manifest = {
        "scenario": scenario,
        "config": cfg.normalized,
        "config_hash": cfg.config_hash,
        "seed": cfg.seed,
        "versions": {
            "flowbeam": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "wall_time_s": time.perf_counter() - start,
        "artifacts": sorted(artifacts),
        "exit_code": code,
        "error": None if error is None else {
            "type": type(error).__name__,
            "message": str(error),
            "exit_code": code,
        },
    }
    _write_json(outdir / "manifest.json", manifest)
    return code


# ---------------------------------------------------------------------------
# entry point


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="flowbeam",
        description="Run coupled flow-beam scenarios from a JSON config.")
    parser.add_argument("scenario", choices=SCENARIOS)
    parser.add_argument("config", help="path to a JSON config file")
    parser.add_argument("--output-dir", default=None,
                        help="override output.directory")
    parser.add_argument("--scheme", default=None,
                        choices=("implicit-midpoint", "staggered", "newmark"),
                        help="override the time-stepping scheme")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the run seed")
    parser.add_argument("--echo-config", action="store_true",
                        help="print the normalized config and exit")
    args = parser.parse_args(argv)

    try:
        path = Path(args.config)
        if not path.exists():
            raise ConfigurationError(f"config file not found: {args.config}")
        raw = json.loads(path.read_text())
        if not isinstance(raw, dict):
            raise ConfigurationError("config JSON must be an object")
        if args.output_dir is not None:
            raw.setdefault("output", {})["directory"] = args.output_dir
        if args.scheme is not None:
            raw["scheme"] = args.scheme
        if args.seed is not None:
            raw["seed"] = args.seed
        cfg = parse_config(raw)
    except json.JSONDecodeError as exc:
        print(json.dumps({"error": {"type": "ConfigurationError",
                                    "message": f"config is not valid JSON: {exc}",
                                    "exit_code": EXIT_CONFIG}}),
              file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigurationError, UsageError) as exc:
        print(json.dumps({"error": {"type": type(exc).__name__,
                                    "message": str(exc),
                                    "exit_code": EXIT_CONFIG}}),
              file=sys.stderr)
        return EXIT_CONFIG

    if args.echo_config:
        print(json.dumps(cfg.normalized, sort_keys=True, indent=2))
        return EXIT_OK
    return run_scenario(cfg, args.scenario)


if __name__ == "__main__":
    sys.exit(main())
