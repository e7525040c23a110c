import math

import numpy as np
import pytest

from anonmatch.experiments import (
    CSV_COLUMNS,
    BudgetError,
    CellResult,
    SweepGrid,
    classify,
    classify_cells,
    export,
    import_csv,
    odd_transition_error_correlation,
    run_phase_cell,
    run_phase_sweep,
)

# gamma this large puts a_n below 1e-9, i.e. effectively noiseless.
NOISELESS = 30.0


def _cell(n, success, mi=0.0, trials=100, eta=1.0, gamma=0.5):
    return CellResult("iid-2", 2, n, eta, gamma, 1.0, 1.0, trials, 0, success, 0.0, 0.1, mi, 0.01)


def test_noiseless_two_users_are_matched():
    grid = SweepGrid([2], [0.0], [NOISELESS], c=2000, trials=50, seed=3)
    res = run_phase_cell(grid.cell(2, 0.0, NOISELESS))
    assert res.success_rate >= 0.9
    assert res.pe < 0.05
    assert res.trials == 50


def test_success_grows_with_observations():
    rates = []
    for c in (0.2, 16.0):
        grid = SweepGrid([5], [2.0], [NOISELESS], c=c, trials=80, seed=3)
        rates.append(run_phase_cell(grid.cell(5, 2.0, NOISELESS)).success_rate)
    assert rates[1] > rates[0]


def test_empty_inputs_rejected():
    with pytest.raises(ValueError):
        SweepGrid([], [1.0], [0.5])
    with pytest.raises(ValueError):
        SweepGrid([10], [1.0], [0.5], trials=0)
    with pytest.raises(ValueError):
        classify([])


def test_single_cell_sweep():
    grid = SweepGrid([2], [0.0], [NOISELESS], c=2000, trials=20, seed=1)
    diagram = run_phase_sweep(grid)
    assert len(diagram.cells) == 1
    assert list(diagram.classification) == [(0.0, NOISELESS)]
    assert diagram.errors == []


def test_budget_exceeded_is_reported_not_run():
    grid = SweepGrid([10, 20], [2.0], [0.5], trials=10, budget=50_000)
    # m*n*trials = 10_000 for n=10 and 80_000 for n=20
    diagram = run_phase_sweep(grid)
    assert [c.n for c in diagram.cells] == [10]
    assert diagram.errors[0]["n"] == 20
    assert diagram.errors[0]["needed"] == 80_000
    with pytest.raises(BudgetError):
        run_phase_cell(grid.cell(20, 2.0, 0.5))


def test_csv_export_round_trip(tmp_path):
    grid = SweepGrid([4], [1.5], [0.5], trials=15, seed=7)
    diagram = run_phase_sweep(grid)
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    export(diagram, p1)
    lines = p1.read_text().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert len(lines) == 2
    back = import_csv(p1)
    assert back == diagram.cells
    export(back, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert (tmp_path / "a.csv.meta.json").exists()


def test_record_export(tmp_path):
    import json

    diagram = run_phase_sweep(SweepGrid([3], [1.0], [0.5], trials=5, seed=2))
    export(diagram, tmp_path / "r.json", "record")
    rec = json.loads((tmp_path / "r.json").read_text())
    assert rec["grid"]["seed"] == 2
    assert rec["classification"][0]["label"] in ("privacy-trend", "no-privacy-trend", "inconclusive")


def test_import_rejects_wrong_columns(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("n,eta\n1,2\n")
    with pytest.raises(ValueError):
        import_csv(p)


def test_same_seed_same_cells_different_seed_differs():
    a = run_phase_cell(SweepGrid([6], [1.5], [0.5], trials=20, seed=11).cell(6, 1.5, 0.5))
    b = run_phase_cell(SweepGrid([6], [1.5], [0.5], trials=20, seed=11).cell(6, 1.5, 0.5))
    c = run_phase_cell(SweepGrid([6], [1.5], [0.5], trials=20, seed=12).cell(6, 1.5, 0.5))
    assert a.row() == b.row()
    assert a.row() != c.row()


def test_threaded_run_matches_serial(monkeypatch):
    cfg = SweepGrid([5], [1.5], [0.5], trials=12, seed=4).cell(5, 1.5, 0.5)
    serial = run_phase_cell(cfg)
    monkeypatch.setenv("ANONMATCH_THREADS", "3")
    assert run_phase_cell(cfg).row() == serial.row()


def test_classification_labels():
    assert classify([_cell(20, 0.5), _cell(100, 0.95)]) == "no-privacy-trend"
    # high but not improving
    assert classify([_cell(20, 0.97), _cell(100, 0.95)]) == "inconclusive"
    assert classify([_cell(20, 0.05, mi=0.01), _cell(100, 0.01, mi=0.01)]) == "privacy-trend"
    # chance-level success but informative estimates
    assert classify([_cell(20, 0.05, mi=0.2), _cell(100, 0.01, mi=0.2)]) == "inconclusive"


def test_classification_is_a_function_of_imported_cells(tmp_path):
    grid = SweepGrid([3, 6], [1.0, 2.0], [0.5], trials=10, seed=5)
    diagram = run_phase_sweep(grid)
    export(diagram, tmp_path / "s.csv")
    assert classify_cells(import_csv(tmp_path / "s.csv")) == diagram.classification


def test_alpha_from_dimension():
    grid = SweepGrid([10], [2.2, 1.0], [1.1])
    assert math.isclose(grid.cell(10, 2.2, 1.1).alpha, 0.2)
    assert grid.cell(10, 1.0, 1.1).alpha == 0.2
    markov = SweepGrid([10], [2 / 3 + 0.3], [0.5], model="markov")
    assert markov.dim == 3
    assert math.isclose(markov.cell(10, 2 / 3 + 0.3, 0.5).alpha, 0.3)


def test_odd_transitions_decorrelate_errors():
    grid = SweepGrid([20], [2 / 3 + 0.3], [1 / 3 + 0.1], c=50, model="markov", trials=5, seed=0)
    cfg = grid.cell(20, 2 / 3 + 0.3, 1 / 3 + 0.1)
    assert abs(odd_transition_error_correlation(cfg, stride=2)) < 0.05
    assert odd_transition_error_correlation(cfg, stride=1) > 0.2


@pytest.mark.slow
def test_strong_noise_column_reaches_chance():
    """With few samples and a_n ~ n**-0.5 the attack should do no better than guessing."""
    grid = SweepGrid([100], [1.0], [0.5], trials=100, seed=0)
    res = run_phase_cell(grid.cell(100, 1.0, 0.5))
    sigma = math.sqrt(0.01 * 0.99 / 100)
    assert abs(res.success_rate - 0.01) <= 3 * sigma
    assert res.mi_lb < 0.05


@pytest.mark.slow
def test_example_sweep_labels():
    grid = SweepGrid([20, 50, 100], [1.0, 2.2], [0.5, 1.1], trials=100, seed=0)
    labels = run_phase_sweep(grid).classification
    assert labels[(2.2, 1.1)] == "no-privacy-trend"
    assert labels[(1.0, 0.5)] == "privacy-trend"
