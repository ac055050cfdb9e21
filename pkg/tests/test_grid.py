import json

import pytest
from hypothesis import given, strategies as st

from gridfall.benchmark import build_cigre_mv, synthetic_profile
from gridfall.grid import (
    LATTICE_PCT,
    Branch,
    Bus,
    BusKind,
    DerKind,
    GridError,
    GridModel,
    Scenario,
    all_scenarios,
    apply_scenario,
    bundled_grid_path,
    bundled_profile_path,
    dump_grid,
    grid_from_dict,
    grid_to_dict,
    load_grid,
    load_profiles,
    quantize_down,
    write_profile,
)


def two_bus_dict():
    return {
        "buses": [
            {"id": 1, "kind": "Slack", "base_voltage_kv": 20.0},
            {"id": 2, "kind": "PQ", "base_voltage_kv": 20.0, "load_p_mw": 0.1, "load_q_mvar": 0.02},
        ],
        "branches": [{"from_bus": 1, "to_bus": 2, "r_pu": 0.01, "x_pu": 0.02}],
    }


def test_bundled_grid_shape():
    grid = load_grid(bundled_grid_path())
    assert grid.n_bus == 15
    assert len(grid.branches) == 14  # radial
    ctrl = [grid.ders[i] for i in grid.controllable]
    assert sorted(d.bus - 1 for d in ctrl) == [5, 10]  # benchmark nodes 6 and 11
    assert grid.buses[0].kind is BusKind.SLACK


def test_bundled_grid_matches_builder():
    on_disk = json.loads(bundled_grid_path().read_text())
    assert on_disk == grid_to_dict(build_cigre_mv())


def test_bundled_profile_matches_builder(tmp_path):
    out = tmp_path / "p.csv"
    write_profile(synthetic_profile(), out)
    assert out.read_bytes() == bundled_profile_path().read_bytes()


def test_bundled_profile_is_eight_hours_at_30s():
    prof = load_profiles(bundled_profile_path())
    assert len(prof) == 960
    assert prof.timestep_s == 30.0
    assert len(prof) * prof.timestep_s == 8 * 3600


def test_two_bus_grid_is_valid():
    grid = grid_from_dict(two_bus_dict())
    assert grid.n_bus == 2 and grid.ders == ()


def test_two_slacks_rejected():
    d = two_bus_dict()
    d["buses"][1]["kind"] = "Slack"
    with pytest.raises(GridError, match="Slack"):
        grid_from_dict(d)


@pytest.mark.parametrize("mutate, match", [
    (lambda d: d["branches"].clear(), "disconnected"),
    (lambda d: d["branches"][0].update(r_pu=0.0, x_pu=0.0), "zero impedance"),
    (lambda d: d["branches"][0].update(to_bus=1), "self loop"),
    (lambda d: d["branches"][0].update(to_bus=7), "unknown bus"),
    (lambda d: d["buses"][1].update(id=3), "contiguous"),
    (lambda d: d.update(ders=[{"bus": 2, "kind": "PV", "s_max_mva": 1, "p_max_mw": 2}]), "p_max_mw"),
    (lambda d: d.update(ders=[{"bus": 9, "kind": "PV", "s_max_mva": 1, "p_max_mw": 1}]), "unknown bus"),
    (lambda d: d["buses"][0].pop("kind"), "malformed"),
])
def test_invalid_grids(mutate, match):
    d = two_bus_dict()
    mutate(d)
    with pytest.raises(GridError, match=match):
        grid_from_dict(d)


def test_load_grid_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(GridError, match="JSON"):
        load_grid(bad)
    bad.write_text("[1, 2]")
    with pytest.raises(GridError, match="object"):
        load_grid(bad)


def test_grid_roundtrip(tmp_path):
    grid = build_cigre_mv()
    dump_grid(grid, tmp_path / "g.json")
    assert load_grid(tmp_path / "g.json") == grid


def test_lattice_size():
    assert len(LATTICE_PCT) == 21
    scen = all_scenarios()
    assert len(scen) == 21 ** 3 == 9261
    assert len(set(scen)) == 9261


def test_identity_scaling():
    grid = build_cigre_mv()
    sg = apply_scenario(grid, (1.0, 1.0, 1.0))
    assert list(sg.load_p_mw) == [b.load_p_mw for b in grid.buses]
    assert list(sg.p_avail_mw) == [d.p_max_mw for d in grid.ders]


def test_half_load_no_pv_full_wind():
    grid = build_cigre_mv()
    sg = apply_scenario(grid, (0.5, 0.0, 1.0))
    assert list(sg.load_p_mw) == [0.5 * b.load_p_mw for b in grid.buses]
    for d, p in zip(grid.ders, sg.p_avail_mw):
        assert p == (0.0 if d.kind is DerKind.PV else d.p_max_mw)


def test_off_lattice_scenario_rejected():
    with pytest.raises(GridError, match="lattice"):
        Scenario.from_factors(0.33, 0.5, 0.5)
    with pytest.raises(GridError):
        Scenario(33, 50, 50)


def test_profile_rounds_down(tmp_path):
    p = tmp_path / "p.csv"
    p.write_text("t,load,pv,wind\n0,0.47,0.82,0.13\n30,1.0,0.0,0.05\n")
    prof = load_profiles(p)
    assert (prof.load[0], prof.pv[0], prof.wind[0]) == (0.45, 0.80, 0.10)
    assert prof.scenario(0) == Scenario(45, 80, 10)
    assert prof.scenario(1) == Scenario(100, 0, 5)


@pytest.mark.parametrize("text, match", [
    ("", "empty"),
    ("t,load,pv,wind\n", "no profile rows"),
    ("t,load,pv\n0,1,1\n", "header"),
    ("t,load,pv,wind\n0,1.2,0,0\n", "outside"),
    ("t,load,pv,wind\n0,x,0,0\n", ":2"),
])
def test_profile_errors(tmp_path, text, match):
    p = tmp_path / "p.csv"
    p.write_text(text)
    with pytest.raises(GridError, match=match):
        load_profiles(p)


@given(st.floats(0.0, 1.0))
def test_quantize_down_law(x):
    q = quantize_down(x)
    assert q in LATTICE_PCT
    assert q <= x * 100 + 1e-6
    assert x * 100 - q < 5 + 1e-6


@pytest.mark.parametrize("pct", LATTICE_PCT)
def test_quantize_down_fixed_points(pct):
    assert quantize_down(pct / 100.0) == pct


def test_direct_construction_validates():
    with pytest.raises(GridError):
        GridModel([Bus(1, BusKind.PQ, 20.0)], [], [])
    g = GridModel([Bus(1, BusKind.SLACK, 20.0), Bus(2, BusKind.PQ, 20.0)],
                  [Branch(1, 2, 0.0, 0.1)], [])
    assert g.ybus.shape == (2, 2)
