import json

import pytest

from gridfall import cli, training
from gridfall.grid import Scenario, bundled_profile_path, load_profiles, write_profile
from gridfall.regression import ModelKind, load_model_sets

SHORT = ["--set", "horizon_steps=240", "--set", "failure_windows=[[1800, 4500]]"]


def subset():
    prof = load_profiles(bundled_profile_path())
    return sorted({prof.scenario(k) for k in range(240)})


@pytest.fixture
def small_train(monkeypatch):
    """Route ``train`` through a sweep over the scenarios of the first two profile hours."""
    scen = subset()

    def fake(*args, **kw):
        return training.train(*args, scenarios=scen, **kw)

    monkeypatch.setattr(cli, "train", fake)
    return scen


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("trained")
    mp = pytest.MonkeyPatch()
    scen = subset()
    mp.setattr(cli, "train", lambda *a, **kw: training.train(*a, scenarios=scen, **kw))
    try:
        assert cli.main(["train", "--out", str(out), "--jobs", "1"]) == 0
    finally:
        mp.undo()
    return out


def heavy_grid(path):
    path.write_text(json.dumps({
        "buses": [{"id": 1, "kind": "Slack", "base_voltage_kv": 20.0},
                  {"id": 2, "kind": "PQ", "base_voltage_kv": 20.0, "load_p_mw": 12.0}],
        "branches": [{"from_bus": 1, "to_bus": 2, "r_pu": 0.0, "x_pu": 0.05}],
        "ders": [{"bus": 2, "kind": "PV", "s_max_mva": 1.0, "p_max_mw": 1.0, "controllable": True}],
    }))
    return path


def files(d):
    return {p.relative_to(d): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


@pytest.mark.parametrize("verb", ["train", "simulate", "compare", "retrain-experiment",
                                  "export-models", "validate-grid"])
def test_help_for_every_verb(verb, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main([verb, "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for flag in ("--config", "--seed", "--jobs", "--set"):
        assert flag in text


def test_unknown_verb(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_validate_bundled_grid(capsys):
    assert cli.main(["validate-grid"]) == 0
    assert "15 buses" in capsys.readouterr().out


def test_missing_grid_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert cli.main(["train", "--out", str(tmp_path / "o"), "--grid", str(missing)]) == 2
    assert str(missing) in capsys.readouterr().err
    assert cli.main(["validate-grid", "--grid", str(missing)]) == 2


def test_bad_override_and_config(tmp_path):
    assert cli.main(["simulate", "--out", str(tmp_path), "--case", "1", "--set", "bogus=1"]) == 2
    assert cli.main(["simulate", "--out", str(tmp_path), "--case", "1", "--set", "novalue"]) == 2
    assert cli.main(["simulate", "--out", str(tmp_path), "--config", str(tmp_path / "x.json")]) == 2
    assert cli.main(["simulate", "--out", str(tmp_path), "--case", "7"]) == 2


def test_train_outputs(trained):
    report = json.loads((trained / "sweep_report.json").read_text())
    n = len(subset())
    assert report["opf_solves"] == report["scenarios"] == n
    assert report["models_per_der"] == {"0": 42, "1": 42}
    assert "wall_clock_s" not in report
    sets = load_model_sets(trained / "models")
    assert sorted(sets) == [0, 1]
    assert all(len(ms.models) == 42 for ms in sets.values())
    assert sorted(p.name for p in (trained / "training").iterdir()) == ["der_0.csv", "der_1.csv"]


def test_train_auto_learner(small_train, tmp_path):
    assert cli.main(["train", "--out", str(tmp_path), "--learner", "auto"]) == 0
    kinds = set()
    for ms in load_model_sets(tmp_path / "models").values():
        kinds |= ms.kinds()
    assert ModelKind.NNR not in kinds
    assert kinds <= {ModelKind.LINEAR, ModelKind.PIECEWISE}


def test_train_sweep_failure_exit(monkeypatch, tmp_path, capsys):
    scen = [Scenario(l, 100, 0) for l in (0, 50, 100)]
    monkeypatch.setattr(cli, "train", lambda *a, **kw: training.train(*a, scenarios=scen, **kw))
    grid = heavy_grid(tmp_path / "heavy.json")
    assert cli.main(["train", "--out", str(tmp_path / "o"), "--grid", str(grid)]) == 3
    assert "failed" in capsys.readouterr().err


def test_regression_without_models(tmp_path, capsys):
    assert cli.main(["simulate", "--out", str(tmp_path), "--case", "regression"]) == 2
    assert "--models" in capsys.readouterr().err


def test_simulate_divergence_exit(tmp_path):
    grid = heavy_grid(tmp_path / "heavy.json")
    prof = tmp_path / "p.csv"
    write_profile(([1.0] * 4, [0.0] * 4, [0.0] * 4), prof)
    args = ["simulate", "--out", str(tmp_path / "o"), "--case", "1", "--grid", str(grid),
            "--profile", str(prof), "--set", "failure_windows=[]"]
    assert cli.main(args) == 4


def test_simulate_is_byte_identical(trained, tmp_path, capsys):
    for k in range(2):
        assert cli.main(["simulate", "--out", str(tmp_path / str(k)), "--case", "3",
                         "--models", str(trained)] + SHORT) == 0
    assert "mean cost" in capsys.readouterr().out
    assert files(tmp_path / "0") == files(tmp_path / "1")
    assert len(files(tmp_path / "0")) == 4


def test_compare_subset_and_jobs(trained, tmp_path, capsys):
    assert cli.main(["compare", "--out", str(tmp_path / "a"), "--cases", "1,2", "--jobs", "1"] + SHORT) == 0
    table = capsys.readouterr().out.strip().splitlines()
    assert len(table) == 3 and table[1].split()[:2] == ["1", "NoControl"]
    assert cli.main(["compare", "--out", str(tmp_path / "b"), "--cases", "1,2", "--jobs", "2"] + SHORT) == 0
    assert files(tmp_path / "a") == files(tmp_path / "b")


def test_compare_all_cases_order(trained, tmp_path, capsys):
    assert cli.main(["compare", "--out", str(tmp_path), "--models", str(trained)] + SHORT) == 0
    rows = [ln.split()[1] for ln in capsys.readouterr().out.strip().splitlines()[1:]]
    assert rows == ["NoControl", "CentralOpf", "OpfPlusRegression", "OpfPlusQv"]


def test_compare_warns_without_windows(trained, tmp_path, caplog):
    args = ["compare", "--out", str(tmp_path), "--cases", "4", "--set", "horizon_steps=20",
            "--set", "failure_windows=[]"]
    assert cli.main(args) == 0
    assert "never" in caplog.text


def test_retrain_and_export(trained, tmp_path):
    for k in range(2):
        assert cli.main(["retrain-experiment", "--out", str(tmp_path / f"r{k}"),
                         "--models", str(trained / "models")] + SHORT) == 0
        assert cli.main(["export-models", "--out", str(tmp_path / f"e{k}"), "--models", str(trained)]) == 0
    assert files(tmp_path / "r0") == files(tmp_path / "r1")
    assert files(tmp_path / "e0") == files(tmp_path / "e1")
    retrained = load_model_sets(tmp_path / "r0" / "retrained_models")
    assert all(ms.version == 2 for ms in retrained.values())
    header = (tmp_path / "e0" / "der_0_tables.csv").read_text().splitlines()[0]
    assert header == "channel,op_pct,kind,x,y"


def test_retrain_needs_training_data(trained, tmp_path):
    lonely = tmp_path / "models"
    lonely.mkdir()
    for p in (trained / "models").iterdir():
        (lonely / p.name).write_bytes(p.read_bytes())
    assert cli.main(["retrain-experiment", "--out", str(tmp_path / "o"), "--models", str(lonely)] + SHORT) == 2
