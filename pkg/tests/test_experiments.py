from pathlib import Path

import pytest

from app.errors import InputError
from app.services.synth import DriftConfig
from app.tools.diagnostics_tool import (
    CLTConfig,
    ConcentrationConfig,
    ConsistencyConfig,
    expected_closer_fraction,
    run_clt_check,
    run_concentration_check,
    run_consistency_check,
)
from app.tools.experiment_tool import (
    DriftExperiment,
    ExperimentCell,
    ExperimentGrid,
    ResultRow,
    ResultTable,
    load_grid,
    run_drift,
    run_power,
    run_type1,
)

ROOT = Path(__file__).resolve().parents[1]


def tiny_grid(**kw):
    cell = ExperimentCell(K=2, d=2, m=8, n=8)
    return ExperimentGrid(**{"cells": [cell], "replications": 3, "B_k": 5, "B": 30, "seed": 1, **kw})


def test_single_replication_rate_is_zero_or_one():
    table = run_type1(tiny_grid(replications=1))
    (row,) = table.rows
    assert row.rejection_rate in (0.0, 1.0)
    assert row.replications == 1
    assert row.wall_time is None


def test_worker_count_does_not_change_results():
    serial = run_type1(tiny_grid(replications=4))
    parallel = run_type1(tiny_grid(replications=4, workers=2))
    assert serial == parallel


def test_timings_are_opt_in():
    table = run_type1(tiny_grid(replications=1, timings=True))
    assert table.rows[0].wall_time >= 0


def test_grid_model_checks():
    with pytest.raises(InputError):
        run_type1(ExperimentGrid(cells=[ExperimentCell(model="C")]))
    with pytest.raises(InputError):
        run_power(ExperimentGrid(cells=[ExperimentCell(model="A")]))


def test_power_run_with_strong_shift_rejects():
    cell = ExperimentCell(model="C", K=2, d=2, m=30, n=30, shift_sd=3.0, min_rate=0.5)
    table = run_power(ExperimentGrid(cells=[cell], replications=3, B_k=10, B=50, seed=2))
    assert table.rows[0].rejection_rate >= 0.5
    assert table.passed


def test_acceptance_bounds_gate_the_table():
    cell = ExperimentCell(K=2, d=2, m=8, n=8, min_rate=0.5, max_rate=0.5)
    table = run_type1(ExperimentGrid(cells=[cell], replications=1, B_k=5, B=30))
    assert table.rows[0].passed is False
    assert not table.passed


def table_fixture():
    rows = [
        ResultRow(label="A-normal-K5-d2", model="A", dist="normal", K=5, d=2, m=100, n=100,
                  rejection_rate=0.035, replications=200, passed=True),
        ResultRow(label="c0", model="drift", dist="normal", K=1, d=2, m=100, n=100,
                  rejection_rate=1 / 3, replications=3, wall_time=1.25),
    ]
    return ResultTable(rows=rows, metadata={"seed": 7, "version": "0.1.0"})


def test_table_csv_round_trip(tmp_path):
    table = table_fixture()
    path = table.to_csv(tmp_path / "t.csv")
    assert ResultTable.from_csv(path, metadata=table.metadata) == table


def test_table_json_round_trip(tmp_path):
    table = table_fixture()
    assert ResultTable.from_json(table.to_json(tmp_path / "t.json")) == table


def test_table_render():
    text = table_fixture().render()
    lines = text.splitlines()
    assert "rejection_rate" in lines[0]
    assert "0.333" in text


def test_load_grid_resolves_presets(monkeypatch):
    monkeypatch.chdir(ROOT)
    assert load_grid("type1.json") == load_grid("type1")
    grid = load_grid("type1")
    assert [(c.K, c.d) for c in grid.cells] == [(1, 2), (5, 2), (10, 10)]
    with pytest.raises(FileNotFoundError):
        load_grid("no-such-grid")


def test_invalid_grid_file(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(InputError):
        load_grid(path)


def drift(K, epsilon, reps=3):
    return DriftExperiment(drift=DriftConfig(K=K, epsilon=epsilon, m=12, d=2), replications=reps,
                           B_k=5, B=30, seed=3)


def test_drift_table_layout():
    table = run_drift(drift(K=3, epsilon=0.5))
    assert [row.label for row in table.rows] == ["c0", "c1", "c2", "ITD"]
    assert table.rows[-1].K == 3
    assert table.rows[-1].passed is not None


def test_drift_single_client_itd_equals_client_column():
    table = run_drift(drift(K=1, epsilon=0.3, reps=4))
    client, itd = table.rows
    assert client.rejection_rate == itd.rejection_rate


def test_no_drift_is_not_gated():
    table = run_drift(drift(K=2, epsilon=1.0))
    assert table.rows[-1].passed is None


def test_clt_check_skips_single_client():
    report = run_clt_check(CLTConfig(K_values=[1, 20], replications=50))
    skipped, checked = report.rows
    assert skipped["passed"] is None and "skipped" in skipped["note"]
    assert checked["ks_distance"] is not None


def test_clt_check_at_acceptance_scale():
    report = run_clt_check(CLTConfig(K_values=[500], replications=500))
    row = report.rows[0]
    assert row["ks_distance"] <= 0.10
    assert 0.7 <= row["variance_ratio"] <= 1.3
    assert report.passed


def test_concentration_check_small():
    report = run_concentration_check(ConcentrationConfig(K=3, m=10, n=10, replications=40,
                                                         t_values=[0.0, 0.1]))
    assert report.rows[0]["bound"] == 1.0
    assert report.rows[0]["passed"]
    assert report.passed


def test_concentration_rejects_unbounded_support():
    with pytest.raises(InputError):
        run_concentration_check(ConcentrationConfig(dist="normal"))


@pytest.mark.slow
def test_concentration_check_at_acceptance_scale():
    assert run_concentration_check(ConcentrationConfig()).passed


def test_consistency_check():
    report = run_consistency_check(ConsistencyConfig())
    row = report.rows[0]
    assert row["expected"] == pytest.approx(expected_closer_fraction(50, 2000))
    assert row["mean_error_large"] < row["mean_error_small"]
    assert report.passed
    with pytest.raises(InputError):
        run_consistency_check(ConsistencyConfig(K_small=10, K_large=10))


@pytest.mark.slow
def test_drift_itd_power_beats_every_client():
    table = run_drift(DriftExperiment(drift=DriftConfig(K=10, epsilon=0.8), replications=200, workers=4))
    assert table.passed


@pytest.mark.slow
def test_type1_preset():
    assert run_type1(load_grid(ROOT / "data" / "grids" / "type1.json")).passed


@pytest.mark.slow
def test_power_preset():
    assert run_power(load_grid(ROOT / "data" / "grids" / "power.json")).passed


@pytest.mark.slow
def test_power_grows_with_the_shift():
    cells = [ExperimentCell(model="C", K=2, d=2, m=50, n=50, shift_sd=sd) for sd in (0.1, 0.25, 0.5)]
    table = run_power(ExperimentGrid(cells=cells, replications=200, B_k=30, B=200, seed=5, workers=4))
    rates = [row.rejection_rate for row in table.rows]
    for previous, current in zip(rates, rates[1:]):
        assert current >= previous - 0.05
    assert rates[-1] > rates[0]
