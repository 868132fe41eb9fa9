"""Config parsing, named initial data, scenario artifacts, and exit codes.

Scenario-level thresholds (balance residual scale, recovery slopes, the
512-point reconstruction error) reuse constants frozen in the module test
suites; here the focus is wiring: defaults documented in the normalized
echo, deterministic artifact bytes, the exit-code contract, and the
versioned snapshot format.
"""
import json

import numpy as np
import pytest

from flowbeam import cli
from flowbeam.cli import (
    EXIT_ASSERTION,
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_SOLVER,
    initial_data,
    main,
    parse_config,
    read_snapshot,
    run_scenario,
    write_snapshot,
)
from flowbeam.errors import ConfigurationError, ShapeError, UsageError

MINIMAL = {"time": {"dt": 0.02, "horizon_T": 0.1}}


def make_config(tmp_path, name="out", **overrides):
    tree = {"time": {"dt": 0.02, "horizon_T": 0.1},
            "output": {"directory": str(tmp_path / name)}}
    for key, val in overrides.items():
        if isinstance(val, dict):
            tree.setdefault(key, {}).update(val)
        else:
            tree[key] = val
    return parse_config(tree)


def read_manifest(tmp_path, name="out"):
    return json.loads((tmp_path / name / "manifest.json").read_text())


# ------------------------------------------------------------- configuration

def test_defaults_documented_in_normalized_echo():
    cfg = parse_config(MINIMAL)
    echo = cfg.normalized
    assert echo["flow"] == {"U": 0.3, "mu": 1.0, "sponge_strength": 40.0,
                            "mu_inflation": 0.0}
    assert echo["beam"] == {"D": 1.0, "delta": 0.0, "beta": 1}
    assert echo["grid"]["beam_points"] == 17
    assert echo["scheme"] == "implicit-midpoint"
    assert echo["sigma"] == 1
    assert echo["initial_data"] == {"name": "beam-tip-bump", "amplitude": 0.1}
    assert echo["output"]["formats"] == ["csv", "json"]
    assert echo["seed"] == 0
    assert echo["fixed_point"]["window_T"] == 0.25
    assert cfg.n_steps() == 5
    assert len(cfg.config_hash) == 64
    assert set(cfg.config_hash) <= set("0123456789abcdef")


def test_config_hash_tracks_values_not_key_order():
    a = parse_config({"time": {"dt": 0.02, "horizon_T": 0.1},
                      "flow": {"U": 0.4}})
    b = parse_config({"flow": {"U": 0.4},
                      "time": {"horizon_T": 0.1, "dt": 0.02}})
    c = parse_config({"time": {"dt": 0.01, "horizon_T": 0.1},
                      "flow": {"U": 0.4}})
    assert a.config_hash == b.config_hash
    assert a.config_hash != c.config_hash


def test_parse_accepts_json_text_and_path(tmp_path):
    text = json.dumps(MINIMAL)
    assert parse_config(text).dt == 0.02
    path = tmp_path / "cfg.json"
    path.write_text(text)
    assert parse_config(path).dt == 0.02
    assert parse_config(str(path)).dt == 0.02


def test_rejects_supersonic_velocity():
    for u in (1.0, 1.2, -1.0):
        with pytest.raises(ConfigurationError, match="subsonic regime required"):
            parse_config({"time": {"dt": 0.02, "horizon_T": 0.1},
                          "flow": {"U": u}})


def test_rejects_nonpositive_times():
    with pytest.raises(ConfigurationError, match="time.dt"):
        parse_config({"time": {"dt": 0.0, "horizon_T": 0.1}})
    with pytest.raises(ConfigurationError, match="time.dt"):
        parse_config({"time": {"dt": -0.1, "horizon_T": 0.1}})
    with pytest.raises(ConfigurationError, match="horizon_T"):
        parse_config({"time": {"dt": 0.1, "horizon_T": 0.0}})


def test_missing_required_field_is_named():
    with pytest.raises(ConfigurationError, match="'time.dt'"):
        parse_config({"time": {"horizon_T": 0.1}})
    with pytest.raises(ConfigurationError, match="'time.horizon_T'"):
        parse_config({"time": {"dt": 0.02}})


def test_unknown_field_is_named():
    with pytest.raises(ConfigurationError, match="'turbo'"):
        parse_config({"time": {"dt": 0.02, "horizon_T": 0.1}, "turbo": 1})
    with pytest.raises(ConfigurationError, match="'flow.warp'"):
        parse_config({"time": {"dt": 0.02, "horizon_T": 0.1},
                      "flow": {"warp": 9}})


def test_rejects_malformed_values():
    def cfg(**kw):
        tree = {"time": {"dt": 0.02, "horizon_T": 0.1}}
        tree.update(kw)
        return tree

    with pytest.raises(ConfigurationError, match="JSON"):
        parse_config("{not json")
    with pytest.raises(ConfigurationError, match="object"):
        parse_config("[1, 2]")
    with pytest.raises(ConfigurationError, match="scheme"):
        parse_config(cfg(scheme="leapfrog"))
    with pytest.raises(ConfigurationError, match="sigma"):
        parse_config(cfg(sigma=2))
    with pytest.raises(ConfigurationError, match="format"):
        parse_config(cfg(output={"formats": ["xml"]}))
    with pytest.raises(ConfigurationError, match="snapshot_every"):
        parse_config(cfg(output={"snapshot_every": -1}))
    with pytest.raises(ConfigurationError, match="seed"):
        parse_config(cfg(seed=0.5))
    with pytest.raises(ConfigurationError, match="sweeps.deltas"):
        parse_config(cfg(sweeps={"deltas": 0.1}))
    with pytest.raises(ConfigurationError, match="initial data"):
        parse_config(cfg(initial_data={"name": "vortex"}))
    with pytest.raises(ConfigurationError, match="mapping"):
        parse_config(cfg(flow=3))


def test_inconsistent_grid_is_rejected():
    with pytest.raises(ConfigurationError, match="at least 8"):
        parse_config({"time": {"dt": 0.02, "horizon_T": 0.1},
                      "grid": {"beam_points": 3}})


def test_horizon_must_be_whole_number_of_steps():
    cfg = parse_config({"time": {"dt": 0.03, "horizon_T": 0.1}})
    with pytest.raises(ConfigurationError, match="integer number of steps"):
        cfg.n_steps()


# -------------------------------------------------------------- initial data

def test_zero_and_tip_bump_generators():
    cfg = parse_config(MINIMAL)
    zero = initial_data("zero", 0.5, cfg.flow_grid, cfg.beam_grid)
    assert not zero.flow.phi.any() and not zero.beam.w.any()

    amp = 0.25
    bump = initial_data("beam-tip-bump", amp, cfg.flow_grid, cfg.beam_grid)
    w = bump.beam.w
    assert w.shape == (17,)
    assert w[0] == 0.0
    assert w[-1] == pytest.approx(amp)
    assert np.all(np.diff(w) > 0)
    assert not bump.flow.phi.any() and not bump.beam.v.any()
    double = initial_data("beam-tip-bump", 2 * amp, cfg.flow_grid, cfg.beam_grid)
    assert np.allclose(double.beam.w, 2 * w)


def test_flow_pulse_generator():
    cfg = parse_config(MINIMAL)
    amp = 0.7
    st = initial_data("flow-pulse", amp, cfg.flow_grid, cfg.beam_grid)
    assert 0.9 * amp <= st.flow.phi.max() <= amp
    assert not st.flow.psi.any() and not st.beam.w.any()


def test_frequency_domain_names_are_reserved():
    cfg = parse_config(MINIMAL)
    for name in ("manufactured-resolvent", "manufactured-ode"):
        with pytest.raises(UsageError, match="scenario"):
            initial_data(name, 1.0, cfg.flow_grid, cfg.beam_grid)
    with pytest.raises(ConfigurationError, match="vortex"):
        initial_data("vortex", 1.0, cfg.flow_grid, cfg.beam_grid)


# ----------------------------------------------------------------- snapshots

def test_snapshot_round_trip(tmp_path):
    cfg = parse_config(MINIMAL)
    st = initial_data("flow-pulse", 1.0, cfg.flow_grid, cfg.beam_grid)
    st.beam.w[:] = np.linspace(0, 1, 17)
    st.t = 0.375
    path = tmp_path / "state.bin"
    write_snapshot(path, st)
    back = read_snapshot(path)
    assert back["t"] == 0.375
    assert np.array_equal(back["phi"], st.flow.phi)
    assert np.array_equal(back["psi"], st.flow.psi)
    assert np.array_equal(back["w"], st.beam.w)
    assert np.array_equal(back["v"], st.beam.v)


def test_snapshot_rejects_foreign_bytes(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"GIF89a" + b"\x00" * 64)
    with pytest.raises(ConfigurationError, match="header"):
        read_snapshot(bad)

    cfg = parse_config(MINIMAL)
    st = initial_data("zero", 0.0, cfg.flow_grid, cfg.beam_grid)
    path = tmp_path / "state.bin"
    write_snapshot(path, st)
    path.write_bytes(path.read_bytes()[:-16])
    with pytest.raises(ShapeError, match="truncated"):
        read_snapshot(path)


# ----------------------------------------------------------------- scenarios

def test_simulate_writes_ledger_manifest_snapshots(tmp_path):
    cfg = make_config(tmp_path, flow={"U": 0.0}, beam={"beta": 0},
                      output={"snapshot_every": 5})
    assert run_scenario(cfg, "simulate") == EXIT_OK
    out = tmp_path / "out"
    names = sorted(p.name for p in out.iterdir())
    assert names == ["ledger.csv", "manifest.json", "snapshot_000000.bin",
                     "snapshot_000005.bin", "summary.json"]
    man = read_manifest(tmp_path)
    assert man["exit_code"] == EXIT_OK and man["error"] is None
    assert man["config_hash"] == cfg.config_hash
    assert man["scenario"] == "simulate"
    assert set(man["versions"]) == {"flowbeam", "python", "numpy", "scipy"}
    assert man["wall_time_s"] > 0
    assert man["artifacts"] == [n for n in names if n != "manifest.json"]

    summary = json.loads((out / "summary.json").read_text())
    assert summary["n_steps"] == 5
    assert summary["sup_balance_residual_level0"] <= 1e-12
    snap = read_snapshot(out / "snapshot_000005.bin")
    assert snap["t"] == pytest.approx(0.1)

    header = (out / "ledger.csv").read_text().splitlines()[0]
    assert header.startswith("t,")


def test_simulate_artifacts_are_byte_deterministic(tmp_path):
    blobs = []
    for name in ("a", "b"):
        cfg = make_config(tmp_path, name=name, flow={"U": 0.4})
        assert run_scenario(cfg, "simulate") == EXIT_OK
        blobs.append(((tmp_path / name / "ledger.csv").read_bytes(),
                      (tmp_path / name / "summary.json").read_bytes()))
    assert blobs[0] == blobs[1]


def test_simulate_staggered_scheme(tmp_path):
    cfg = make_config(tmp_path, scheme="staggered", beam={"beta": 0})
    assert run_scenario(cfg, "simulate") == EXIT_OK


def test_scheme_applicability_is_checked(tmp_path):
    cfg = make_config(tmp_path, name="a", scheme="newmark", beam={"beta": 0})
    assert run_scenario(cfg, "simulate") == EXIT_CONFIG
    assert read_manifest(tmp_path, "a")["error"]["type"] == "ConfigurationError"
    cfg = make_config(tmp_path, name="b", scheme="staggered")
    assert run_scenario(cfg, "beam-only") == EXIT_CONFIG


def test_beam_only_writes_energy_history(tmp_path):
    cfg = make_config(tmp_path, beam={"beta": 0})
    assert run_scenario(cfg, "beam-only") == EXIT_OK
    lines = (tmp_path / "out" / "beam_ledger.csv").read_text().splitlines()
    assert lines[0] == "t,E0,E1,E2,V"
    rows = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    assert rows.shape == (cfg.n_steps() + 1, 5)
    e0 = rows[:, 1]
    assert abs(e0[-1] - e0[0]) <= 1e-10 * e0[0]
    assert np.all(rows[:, 4] >= 0.0)


def test_dissipativity_scenario(tmp_path):
    cfg = make_config(tmp_path, sigma=0, beam={"beta": 0})
    assert run_scenario(cfg, "dissipativity-check") == EXIT_OK
    rep = json.loads((tmp_path / "out" / "dissipativity_report.json").read_text())
    assert rep["max_ratio"] <= 1e-12
    assert rep["n_samples"] >= 100


def test_delta_sweep_scenario_monotone(tmp_path):
    cfg = make_config(tmp_path, flow={"U": 0.3}, beam={"beta": 0},
                      time={"dt": 0.05, "horizon_T": 0.5},
                      sweeps={"deltas": [1e-1, 1e-2, 0.0]})
    assert run_scenario(cfg, "delta-sweep") == EXIT_OK
    rep = json.loads((tmp_path / "out" / "delta_sweep_report.json").read_text())
    assert rep["monotone"] is True
    dists = [p["distance"] for p in rep["distances"]]
    assert dists == sorted(dists, reverse=True)
    assert "trajectory" not in next(iter(rep["runs"].values()))


def test_delta_sweep_equal_gaps_fail_the_assertion(tmp_path):
    # consecutive distances track the gap size, so an equal-gap ladder has
    # no decrease to offer and the monotonicity invariant trips
    cfg = make_config(tmp_path, flow={"U": 0.3}, beam={"beta": 0},
                      time={"dt": 0.05, "horizon_T": 0.5},
                      sweeps={"deltas": [2e-2, 1e-2, 0.0]})
    assert run_scenario(cfg, "delta-sweep") == EXIT_ASSERTION
    man = read_manifest(tmp_path)
    assert man["error"]["type"] == "AssertionFailure"
    assert man["exit_code"] == EXIT_ASSERTION


def test_mu_sweep_scenario(tmp_path):
    cfg = make_config(tmp_path, flow={"U": 0.3}, beam={"beta": 0},
                      time={"dt": 0.05, "horizon_T": 0.5})
    assert run_scenario(cfg, "mu-sweep") == EXIT_OK
    rep = json.loads((tmp_path / "out" / "mu_sweep_report.json").read_text())
    assert len(rep["runs"]) == 3
    for entry in rep["runs"].values():
        assert entry["ftc_margin_min"] >= -1e-10


def test_trace_diagnostic_scenario(tmp_path):
    cfg = make_config(tmp_path, grid={"beam_points": 9},
                      time={"dt": 0.05, "horizon_T": 0.5},
                      sweeps={"Us": [0.2, 0.5]})
    assert run_scenario(cfg, "trace-diagnostic") == EXIT_OK
    rep = json.loads((tmp_path / "out" / "trace_report.json").read_text())
    assert [row["U"] for row in rep["battery"]] == [0.2, 0.5]
    for row in rep["battery"]:
        assert 0.5 <= row["ratio"] <= 2.0


def test_resolvent_check_scenario(tmp_path):
    cfg = make_config(tmp_path, grid={"beam_points": 9},
                      sweeps={"Us": [0.5]})
    assert run_scenario(cfg, "resolvent-check") == EXIT_OK
    rep = json.loads((tmp_path / "out" / "resolvent_report.json").read_text())
    assert len(rep["cases"]) == 3
    for case in rep["cases"]:
        assert case["levels"] == [4, 8, 16]
        assert min(case["phi_slope"], case["tip_slope"]) >= 1.7
        assert max(case["certificates"]) <= 1e-8


def test_convergence_study_dt_mode(tmp_path):
    cfg = make_config(tmp_path, flow={"U": 0.4}, beam={"beta": 0},
                      time={"dt": 0.04, "horizon_T": 0.2})
    assert run_scenario(cfg, "convergence-study") == EXIT_OK
    rep = json.loads((tmp_path / "out" / "convergence_report.json").read_text())
    assert rep["mode"] == "balance-dt"
    assert rep["slope"] >= 1.5


def test_convergence_study_ode_mode(tmp_path):
    cfg = make_config(tmp_path, flow={"U": 0.5},
                      initial_data={"name": "manufactured-ode"})
    assert run_scenario(cfg, "convergence-study") == EXIT_OK
    rep = json.loads((tmp_path / "out" / "convergence_report.json").read_text())
    assert rep["mode"] == "manufactured-ode"
    assert rep["sup_error_512"] <= 1e-6
    assert rep["tail"] <= 1e-8
    assert 3.5 <= rep["slope"] <= 4.5


def test_unknown_scenario_is_rejected(tmp_path):
    cfg = make_config(tmp_path)
    with pytest.raises(ConfigurationError, match="steer"):
        run_scenario(cfg, "steer")


def test_solver_failure_maps_to_exit_3(tmp_path):
    cfg = make_config(tmp_path, time={"dt": 0.1, "horizon_T": 1.0},
                      flow={"U": 0.0},
                      initial_data={"name": "beam-tip-bump", "amplitude": 3.0})
    assert run_scenario(cfg, "simulate") == EXIT_SOLVER
    man = read_manifest(tmp_path)
    assert man["error"]["type"] == "StepFailure"
    assert man["exit_code"] == EXIT_SOLVER


def test_frequency_data_in_time_scenario_maps_to_exit_2(tmp_path):
    cfg = make_config(tmp_path,
                      initial_data={"name": "manufactured-resolvent"})
    assert run_scenario(cfg, "simulate") == EXIT_CONFIG
    assert read_manifest(tmp_path)["error"]["type"] == "UsageError"


# --------------------------------------------------------------- entry point

def test_main_runs_simulate_end_to_end(tmp_path):
    cfgfile = tmp_path / "run.json"
    cfgfile.write_text(json.dumps({
        "time": {"dt": 0.02, "horizon_T": 0.1},
        "flow": {"U": 0.0}, "beam": {"beta": 0},
        "output": {"directory": str(tmp_path / "out")}}))
    assert main(["simulate", str(cfgfile)]) == EXIT_OK
    assert (tmp_path / "out" / "ledger.csv").exists()
    assert main(["simulate", str(cfgfile),
                 "--output-dir", str(tmp_path / "out2")]) == EXIT_OK
    assert (tmp_path / "out2" / "manifest.json").exists()


def test_main_echo_config(tmp_path, capsys):
    cfgfile = tmp_path / "run.json"
    cfgfile.write_text(json.dumps(MINIMAL))
    assert main(["simulate", str(cfgfile), "--echo-config",
                 "--seed", "7"]) == EXIT_OK
    echo = json.loads(capsys.readouterr().out)
    assert echo["seed"] == 7
    assert echo["flow"]["U"] == 0.3
    assert echo["time"] == {"dt": 0.02, "horizon_T": 0.1}


def test_main_reports_config_errors_on_stderr(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"time": {"dt": 0.02, "horizon_T": 0.1},
                               "flow": {"U": 1.5}}))
    assert main(["simulate", str(bad)]) == EXIT_CONFIG
    rec = json.loads(capsys.readouterr().err)
    assert rec["error"]["type"] == "ConfigurationError"
    assert "subsonic" in rec["error"]["message"]

    assert main(["simulate", str(tmp_path / "nope.json")]) == EXIT_CONFIG
    rec = json.loads(capsys.readouterr().err)
    assert "not found" in rec["error"]["message"]

    garbled = tmp_path / "garbled.json"
    garbled.write_text("{broken")
    assert main(["simulate", str(garbled)]) == EXIT_CONFIG
