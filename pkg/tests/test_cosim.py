import math

import pytest

from gridfall.benchmark import build_cigre_mv
from gridfall.cosim import (
    ConfigError,
    ControlCase,
    OpfCache,
    SimConfig,
    SimulationDiverged,
    check_conservation,
    compare_cases,
    default_failure_window,
    retraining_experiment,
    run_simulation,
    write_run,
)
from gridfall.grid import (Branch, Bus, BusKind, Der, DerKind, GridModel, apply_scenario,
                           bundled_profile_path, load_profiles, write_profile)
from gridfall.ied import read_decision_log
from gridfall.opf import ORIGINAL_PARAMS, RETRAIN_PARAMS, run_sweep
from gridfall.powerflow import Dispatch, solve_pf
from gridfall.training import train_from_sweep

HORIZON = 240  # two hours of the bundled profile


@pytest.fixture(scope="module")
def grid():
    return build_cigre_mv()


@pytest.fixture(scope="module")
def profile():
    return load_profiles(bundled_profile_path())


@pytest.fixture(scope="module")
def mini(grid, profile):
    """OPF sweep over the scenarios of the first HORIZON steps, plus models trained on it."""
    scenarios = sorted({profile.scenario(k) for k in range(HORIZON)})
    sweep = run_sweep(grid, ORIGINAL_PARAMS, scenarios=scenarios)
    out = train_from_sweep(grid, sweep)
    cache = OpfCache()
    cache.seed_from_sweep(sweep)
    return sweep, out, cache


def cfg(**kw):
    base = dict(horizon_steps=HORIZON, case=ControlCase.OPF_REGRESSION,
                failure_windows=[(1800.0, 4500.0)])
    base.update(kw)
    return SimConfig(**base)


def run(config, mini, grid, profile, buckets=None):
    _, out, cache = mini
    return run_simulation(config, out.model_sets, buckets, grid, profile, cache)


def test_case_parse():
    assert ControlCase.parse("3") is ControlCase.OPF_REGRESSION
    assert ControlCase.parse(4) is ControlCase.OPF_QV
    assert ControlCase.parse("NoControl").number == 1
    with pytest.raises(ConfigError):
        ControlCase.parse("9")


def test_config_validation():
    with pytest.raises(ConfigError, match="overlap"):
        SimConfig(failure_windows=[(0, 100), (50, 200)])
    with pytest.raises(ConfigError):
        SimConfig(failure_windows=[(100, 50)])
    with pytest.raises(ConfigError, match="unknown"):
        SimConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        SimConfig(timestep_s=0)


def test_config_roundtrip():
    c = cfg(training_params=RETRAIN_PARAMS, seed=7)
    assert SimConfig.from_dict(c.to_dict()) == c


def test_default_window_covers_a_third():
    a, b = default_failure_window(960, 30.0)
    assert (a, b) == (8640.0, 18720.0)
    assert (b - a) / (960 * 30.0) >= 0.3


def test_window_past_horizon_rejected(mini, grid, profile):
    with pytest.raises(ConfigError, match="horizon"):
        run(cfg(failure_windows=[(0, 1e6)]), mini, grid, profile)


def test_regression_case_needs_models(grid, profile):
    with pytest.raises(ConfigError, match="models"):
        run_simulation(cfg(), None, None, grid, profile)


def test_central_opf_matches_sweep_cost(mini, grid, profile):
    sweep, _, _ = mini
    by_scenario = {r.scenario: r.cost for r in sweep.results}
    c = cfg(case=ControlCase.CENTRAL_OPF, evaluation_params=ORIGINAL_PARAMS, failure_windows=())
    res = run(c, mini, grid, profile)
    for rec in res.records:
        assert rec.cost == pytest.approx(by_scenario[rec.scenario], abs=1e-6)


def test_no_control_in_band_costs_nothing(grid, tmp_path):
    n = 20
    path = tmp_path / "flat.csv"
    write_profile(([0.5] * n, [0.3] * n, [0.3] * n), path)
    c = SimConfig(case=ControlCase.NO_CONTROL, profile=str(path), evaluation_params=ORIGINAL_PARAMS)
    res = run_simulation(c, grid=grid)
    assert res.mean_cost == 0.0
    assert res.report.violations == 0


def test_regression_case_state_machine(mini, grid, profile):
    res = run(cfg(), mini, grid, profile)
    for i, log in res.decision_logs.items():
        modes = {t: m for t, _, m, *_ in log}
        # last delivered message at 1770 s; strictly more than 60 s old from 1860 s
        assert all(modes[t] == "Remote" for t in range(0, 1860, 30))
        assert all(modes[t] in ("Fallback", "Emergency") for t in range(1860, 4500, 30))
        assert [modes[t] for t in range(4500, 4650, 30)] == ["Transition"] * 5
        assert all(modes[t] == "Remote" for t in range(4650, HORIZON * 30, 30))
        fb = [r for r in log if r[2] == "Fallback"]
        assert fb[0][6] == "regression-ramp1"
    assert all(v > 0 for v in res.report.fallback_steps.values())


def test_whole_horizon_window(mini, grid, profile):
    res = run(cfg(failure_windows=[(0.0, HORIZON * 30.0)]), mini, grid, profile)
    for log in res.decision_logs.values():
        modes = [m for _, _, m, *_ in log]
        assert modes[:3] == ["Remote"] * 3  # 0, 30 and 60 s
        assert all(m in ("Fallback", "Emergency") for m in modes[3:])


def test_zero_length_window_has_no_effect(mini, grid, profile):
    a = run(cfg(failure_windows=()), mini, grid, profile)
    b = run(cfg(failure_windows=[(3000.0, 3000.0)]), mini, grid, profile)
    assert a.mean_cost == b.mean_cost
    assert a.decision_logs == b.decision_logs


def test_short_window_never_trips(mini, grid, profile):
    res = run(cfg(failure_windows=[(3000.0, 3060.0)]), mini, grid, profile)
    assert res.report.fallback_steps == {i: 0 for i in grid.controllable}
    assert any(not r.comm_ok for r in res.records)


def test_central_and_regression_agree_without_failures(mini, grid, profile):
    a = run(cfg(case=2, failure_windows=()), mini, grid, profile)
    b = run(cfg(case=3, failure_windows=()), mini, grid, profile)
    assert [r.commands for r in a.records] == [r.commands for r in b.records]
    assert a.mean_cost == b.mean_cost


def test_central_opf_ignores_failure_windows(mini, grid, profile):
    a = run(cfg(case=2, failure_windows=()), mini, grid, profile)
    b = run(cfg(case=2), mini, grid, profile)
    assert a.mean_cost == b.mean_cost


def test_runs_are_deterministic(mini, grid, profile, tmp_path):
    for k in range(2):
        res = run(cfg(), mini, grid, profile)
        write_run(res, tmp_path / str(k), grid.n_bus)
    for name in ("steps.csv", "report.json", "decisions_der0.csv", "decisions_der1.csv"):
        assert (tmp_path / "0" / name).read_bytes() == (tmp_path / "1" / name).read_bytes()
    rows = read_decision_log(tmp_path / "0" / "decisions_der0.csv")
    assert len(rows) == HORIZON


def test_seed_changes_noise_only(mini, grid, profile):
    a = run(cfg(seed=1), mini, grid, profile)
    b = run(cfg(seed=2), mini, grid, profile)
    c = run(cfg(seed=1, meas_noise_pu=0.0), mini, grid, profile)
    d = run(cfg(seed=2, meas_noise_pu=0.0), mini, grid, profile)
    assert a.mean_cost != b.mean_cost
    assert c.mean_cost == d.mean_cost


def test_online_setpoints_reach_buckets(mini, grid, profile):
    _, out, _ = mini
    buckets = {i: b.copy() for i, b in out.buckets.items()}
    before = {i: len(b) for i, b in buckets.items()}
    run(cfg(failure_windows=()), mini, grid, profile, buckets)
    for i in buckets:
        assert len(buckets[i]) > before[i]
    assert len(out.buckets[0]) == before[0]  # originals untouched


def test_commands_feasible_in_all_cases(mini, grid, profile):
    tan = math.tan(math.acos(0.9))
    for case in ControlCase:
        res = run(cfg(case=case), mini, grid, profile)
        for rec in res.records:
            sg = apply_scenario(grid, rec.scenario)
            for i, p, q in rec.commands:
                assert -1e-9 <= p <= sg.available_pct(i) + 1e-9
                assert abs(q) <= p * tan + 1e-9
                assert p * p + q * q <= 1e4 + 1e-9


def test_conservation_helper(grid):
    sg = apply_scenario(grid, (0.7, 0.9, 0.4))
    disp = Dispatch.full_feed_in(sg)
    assert check_conservation(sg, disp, solve_pf(sg, disp)) < 1e-9


def test_divergence_raises(tmp_path):
    g = GridModel([Bus(1, BusKind.SLACK, 20.0), Bus(2, BusKind.PQ, 20.0, 30.0, 0.0)],
                  [Branch(1, 2, 0.0, 0.05)], [Der(2, DerKind.PV, 1.0, 1.0, False)])
    path = tmp_path / "p.csv"
    write_profile(([1.0] * 3, [0.0] * 3, [0.0] * 3), path)
    with pytest.raises(SimulationDiverged, match="diverged"):
        run_simulation(SimConfig(case=1, profile=str(path)), grid=g)


def test_compare_rows_and_parallel(mini, grid, profile):
    _, out, cache = mini
    c = cfg()
    serial = compare_cases(c, model_sets=out.model_sets, jobs=1, opf_cache=cache)
    rows = serial.rows()
    assert [r["case"] for r in rows] == [1, 2, 3, 4]
    m = serial.mean_costs()
    assert rows[2]["diff_to_case2_pct"] == pytest.approx(100 * (m[ControlCase.OPF_REGRESSION] / m[ControlCase.CENTRAL_OPF] - 1))
    sub = compare_cases(c, cases=[1, 2], model_sets=out.model_sets, jobs=2)
    assert [r["case"] for r in sub.rows()] == [1, 2]
    assert sub.mean_costs()[ControlCase.CENTRAL_OPF] == m[ControlCase.CENTRAL_OPF]


def test_retraining_null_experiment(mini, grid, profile):
    _, out, cache = mini
    c = cfg(meas_noise_pu=0.0)
    res = retraining_experiment(c, out.model_sets, out.buckets, new_params=ORIGINAL_PARAMS,
                                opf_cache=cache)
    assert res.stale.mean_cost == res.retrained.mean_cost
    assert res.central.mean_cost <= res.stale.mean_cost
