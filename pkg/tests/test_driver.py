import json
import math

import numpy as np
import pytest
from click.testing import CliRunner

from artifact import cif3
from artifact.driver import (
    DiagnosticsReport,
    EulerReynoldsState,
    PreconditionError,
    RunConfig,
    admissible_index,
    bifurcate,
    cli,
    compatibility_window,
    dump_state,
    initial_checks,
    initial_tuple,
    iterate,
    l2_distance,
    load_config,
    load_state,
    report,
    step_checks,
)
from artifact.spectral_core import divergence_values
from artifact.timefields import ConstantField, ZeroField

GRID = 32


@pytest.fixture(scope="module")
def state32():
    return initial_tuple(RunConfig(grid=GRID))


@pytest.fixture(scope="module")
def stage32(state32):
    return iterate(state32)


# configuration ---------------------------------------------------------------


def test_config_rejects_unknown_keys():
    with pytest.raises(PreconditionError, match="unknown config keys"):
        RunConfig.from_dict({"lambda_0": 5})


def test_config_round_trip_and_tolerance_merge():
    cfg = RunConfig.from_dict({"grid": 32, "tolerances": {"residual": 1e-3}})
    assert cfg.tolerances["residual"] == 1e-3
    assert set(RunConfig().tolerances) <= set(cfg.tolerances)
    again = RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg


def test_load_config_overrides(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"grid": 48, "lambda0": 6.0}))
    cfg = load_config(p, grid=32, b=None)
    assert cfg.grid == 32 and cfg.lambda0 == 6.0 and cfg.b == 1.5


def test_bad_schedule_is_a_precondition_failure():
    with pytest.raises(PreconditionError):
        RunConfig(b=0.5).schedule()


# initial tuple ----------------------------------------------------------------


def test_initial_tuple_checks(state32):
    chk = initial_checks(state32)
    assert chk["ok"]
    for row in chk["rows"]:
        assert row["relative_mass"] <= 1e-10
        assert row["relative_momentum"] <= 1e-8
        assert row["mass_identity"] <= 1e-12
        assert row["rho_min"] >= 0.75


def test_initial_density_floor_over_window(state32):
    ts = np.linspace(*state32.window, 41)
    assert min(float(np.asarray(state32.rho.value(t)).min()) for t in ts) >= 0.75
    assert not np.any(state32.u.value(0.0)) and not np.any(state32.p.value(0.0))
    assert state32.meta["initial"]["profile_floor_used"] >= 0.5


def test_initial_mass_identity_closed_form(state32):
    cfg, sch = state32.config, state32.schedule
    rate = min(math.sqrt(sch.delta(0)), cfg.clamp)
    d1 = sch.delta(1)
    t = 0.7
    # chi^2 = 1 - 2 rate - d1 (1 - exp(-rate t)) so chi' = -d1 rate exp(-rate t) / (2 chi)
    chi = math.sqrt(1 - 2 * rate - d1 * (1 - math.exp(-rate * t)))
    dchi = -d1 * rate * math.exp(-rate * t) / (2 * chi)
    x3 = 2 * np.pi * np.arange(GRID) / GRID
    expect = -0.25 * np.cos(cfg.lambda_bar * x3) * dchi
    got = np.asarray(state32.rho.deriv(t))[0]
    assert np.abs(got - expect[None, None, :]).max() <= 1e-12
    assert np.abs(got + divergence_values(np.asarray(state32.R.value(t)))).max() <= 1e-12


def test_positivity_identity_holds_for_large_base_frequency():
    # the lower bound 1 - 2 delta_0^{1/2} + e(t) >= 1/2 needs delta_0 small
    for lam0 in (1e7, 1e8):
        sch = RunConfig(lambda0=lam0).schedule()
        assert 1 - 2 * math.sqrt(sch.delta(0)) - sch.delta(1) >= 0.5


def test_compatibility_window_contains_default():
    sch = RunConfig().schedule()
    lo, hi = compatibility_window(sch, 1.0)
    assert lo <= 4 <= hi


def test_lambda_bar_outside_window():
    with pytest.raises(PreconditionError, match=r"must be an integer in \["):
        initial_tuple(RunConfig(grid=16, lambda_bar=40))


def test_empty_window_names_both_bounds():
    with pytest.raises(PreconditionError, match="lower bound .* exceeds upper bound"):
        initial_tuple(RunConfig(grid=16, compat_constant=100.0))


# one step ---------------------------------------------------------------------


def test_step_hard_checks(stage32):
    chk = step_checks(stage32)
    assert chk["hard"] == {"divergence": True, "mass": True, "pressure": True, "positivity": True}
    assert chk["residual_ok"] and chk["ok"]


def test_step_conserves_mass_and_updates_pressure(stage32, state32):
    new = stage32.result
    delta1 = state32.schedule.delta(1)
    for t in (0.0, 0.5 * state32.schedule.horizon):
        assert abs(np.mean(new.rho.value(t)) - np.mean(state32.rho.value(t))) <= 1e-12
        dp = np.asarray(new.p.value(t)) - np.asarray(state32.p.value(t))
        assert np.abs(dp - delta1 * np.asarray(state32.rho.value(t))).max() <= 1e-15


def test_degenerate_step_from_rest():
    cfg = RunConfig(grid=GRID)
    base = initial_tuple(cfg)
    N = GRID
    rest = EulerReynoldsState(
        q=0, window=base.window, N=N, schedule=base.schedule,
        rho=ConstantField("scalar", np.ones((1, N, N, N))), u=ZeroField("vector", N), p=ZeroField("scalar", N),
        R=ZeroField("vector", N), Phi=ZeroField("symmetric_tensor", N), S=ZeroField("symmetric_tensor", N),
        config=cfg,
    )
    stage = iterate(rest)
    for t in rest.check_times():
        rel = stage.result.residual(float(t)).relative()
        assert max(rel.values()) <= 1e-4


# bifurcation ------------------------------------------------------------------


def test_bifurcation_interval_too_short(state32):
    tau = state32.schedule.tau(0)
    with pytest.raises(PreconditionError, match="interval too short"):
        admissible_index(state32.schedule, 0, (0.0, 2.0 * tau))
    with pytest.raises(PreconditionError, match="interval too short"):
        bifurcate(state32, (0.0, 2.0 * tau))


def test_admissible_index_support_inside(state32):
    tau = state32.schedule.tau(0)
    p0 = admissible_index(state32.schedule, 0, (0.0, 3.0 * tau))
    assert p0 == 1


def test_l2_distance_is_the_unnormalised_integral():
    N = 8
    a = np.ones((3, N, N, N))
    assert l2_distance(a, np.zeros_like(a)) == pytest.approx(math.sqrt(3 * (2 * math.pi) ** 3), rel=1e-14)


# reports and dumps --------------------------------------------------------------


def test_report_round_trips(state32):
    rep = report(state32)
    back = DiagnosticsReport.from_json(rep.to_json())
    assert back.canonical_json() == rep.canonical_json()
    assert report(state32).canonical_json() == rep.canonical_json()
    rows = DiagnosticsReport.rows_from_csv(rep.to_csv())
    table = rep.stages[0]["inductive"]
    assert len(rows) == len(table)
    for r, t in zip(rows, table):
        assert r["quantity"] == t["quantity"] and r["measured"] == t["measured"] and r["status"] == t["status"]


def test_report_groups(state32):
    groups = {r["group"] for r in report(state32).stages[0]["inductive"]}
    assert {"amplitude", "derivatives", "flux_error", "current_error", "stress_error"} <= groups


def test_dumps_are_deterministic(tmp_path):
    cfg = RunConfig(grid=16)
    a, b = tmp_path / "a.cif3", tmp_path / "b.cif3"
    dump_state(a, initial_tuple(cfg))
    dump_state(b, initial_tuple(cfg))
    assert a.read_bytes() == b.read_bytes()
    assert cif3.sidecar_path(a).read_text() == cif3.sidecar_path(b).read_text()


def test_load_replays_recipe(tmp_path, state32):
    path = tmp_path / "s.cif3"
    dump_state(path, state32)
    back = load_state(path)
    assert back.recipe == [{"op": "init"}] and back.N == GRID
    assert np.array_equal(np.asarray(back.S.value(0.1)), np.asarray(state32.S.value(0.1)))


def test_load_without_recipe_interpolates(tmp_path):
    cfg = RunConfig(grid=8)
    st = initial_tuple(cfg)
    path = tmp_path / "f.cif3"
    dump_state(path, st, times=np.linspace(0.0, 0.4, 6))
    meta = json.loads(cif3.sidecar_path(path).read_text())
    meta["recipe"] = []
    cif3.write_sidecar(path, meta)
    back = load_state(path)
    assert back.meta["interpolated_frames"]
    assert np.abs(np.asarray(back.rho.value(0.24)) - np.asarray(st.rho.value(0.24))).max() <= 1e-8
    dump_state(path, st, times=np.linspace(0.0, 0.4, 3))
    cif3.write_sidecar(path, meta)
    with pytest.raises(PreconditionError, match="four frames"):
        load_state(path)


def test_missing_state_file(tmp_path):
    with pytest.raises(PreconditionError, match="no such state file"):
        load_state(tmp_path / "absent.cif3")


# command line -------------------------------------------------------------------


@pytest.fixture(scope="module")
def cli_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


def test_cli_init(cli_dir):
    res = CliRunner().invoke(cli, ["init", "--grid", str(GRID), "--out", str(cli_dir / "s0.cif3")])
    assert res.exit_code == 0, res.output
    out = json.loads(res.output)
    assert out["checks"]["ok"] and out["initial"]["rate_clamped"]
    assert (cli_dir / "s0.cif3").exists() and cif3.sidecar_path(cli_dir / "s0.cif3").exists()


def test_cli_init_precondition_failures(cli_dir, tmp_path):
    r = CliRunner().invoke(cli, ["init", "--grid", "16", "--lambdabar", "40", "--out", str(tmp_path / "x.cif3")])
    assert r.exit_code == 3
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"no_such_key": 1}))
    r = CliRunner().invoke(cli, ["init", "--config", str(cfg), "--out", str(tmp_path / "x.cif3")])
    assert r.exit_code == 3


def test_cli_step_and_report(cli_dir):
    runner = CliRunner()
    res = runner.invoke(
        cli, ["step", "--in", str(cli_dir / "s0.cif3"), "--out", str(cli_dir / "s1.cif3"), "--report", str(cli_dir / "r.json")]
    )
    assert res.exit_code == 0, res.output
    assert json.loads(res.output)["checks"]["ok"]
    rep = DiagnosticsReport.from_json((cli_dir / "r.json").read_text())
    assert [s["q"] for s in rep.stages] == [0, 1]
    assert rep.stages[1]["error_ratio"]["informational"]
    res = runner.invoke(cli, ["report", "--in", str(cli_dir / "r.json"), "--csv", str(cli_dir / "n.csv")])
    assert res.exit_code == 0
    rows = DiagnosticsReport.rows_from_csv((cli_dir / "n.csv").read_text())
    assert {r["stage"] for r in rows} == {0, 1}


def test_cli_step_missing_input(tmp_path):
    r = CliRunner().invoke(cli, ["step", "--in", str(tmp_path / "none.cif3"), "--out", str(tmp_path / "o.cif3")])
    assert r.exit_code == 3


def test_cli_bifurcate_short_interval(cli_dir):
    r = CliRunner().invoke(
        cli,
        ["bifurcate", "--in", str(cli_dir / "s0.cif3"), "--interval", "0,1e-6",
         "--out-a", str(cli_dir / "a.cif3"), "--out-b", str(cli_dir / "b.cif3")],
    )
    assert r.exit_code == 3
    assert "interval too short" in r.output + (r.stderr if r.stderr_bytes is not None else "")


def test_cli_verify_geometry():
    r = CliRunner().invoke(cli, ["verify", "--suite", "geometry"])
    assert r.exit_code == 0, r.output
    assert json.loads(r.output)["geometry"]["ok"]
