import glob
import os

import pytest

from errors import CalibrationError, ConfigError
from harness import (MEASUREMENT_HEADER, SUMMARY_HEADER, SweepPoint, execute_cell, experiment_from_dict,
                     fit_calibration, load_experiment, pick_best, ratio_grid, run_experiment, sweep_ratio,
                     write_measurements)
from tier_model import TIERS, export_calibration
from tests.conftest import EXPERIMENTS_DIR


@pytest.fixture
def calibration_file(tmp_path, small_calibration):
    path = tmp_path / "calibration.yaml"
    export_calibration(small_calibration, str(path))
    return str(path)


@pytest.fixture
def experiment_data(calibration_file):
    """Two policies, two seeds and one small workload on 16 FAST and 64 SLOW pages of 4 MiB."""
    return {
        "schema_version": 1,
        "name": "tiny",
        "horizon": 20,
        "page_scale": 1024,
        "tiers": {"FAST": {"capacity_gib": 0.0625}, "SLOW": {"capacity_gib": 0.25}},
        "calibration": calibration_file,
        "seeds": [0, 1],
        "baseline": "admdefault",
        "policies": ["admdefault", {"name": "weighted_interleave", "params": {"ratio": 0.5}}],
        "workloads": [{"name": "w", "regions": [{"name": "a", "pages": 8, "demand": 1.0}]}],
    }


def test_cells_cover_workloads_policies_and_seeds(experiment_data):
    exp = experiment_from_dict(experiment_data)
    cells = exp.cells()
    assert [c.cell_id for c in cells] == [
        "000-w-admdefault-s0", "001-w-admdefault-s1",
        "002-w-weighted_interleave-s0", "003-w-weighted_interleave-s1",
    ]
    assert cells[2].params == {"ratio": 0.5}
    assert [c.seed for c in exp.cells([7])] == [7, 7]


def test_validate_resolves_every_cell(experiment_data):
    assert len(experiment_from_dict(experiment_data).validate()) == 4


def test_experiment_errors(experiment_data):
    with pytest.raises(ConfigError):
        experiment_from_dict({**experiment_data, "schema_version": 2})
    with pytest.raises(ConfigError):
        experiment_from_dict({**experiment_data, "policies": ["autonuma"]})
    with pytest.raises(ConfigError):
        experiment_from_dict({**experiment_data, "kind": "grid"})
    with pytest.raises(ConfigError):
        experiment_from_dict({**experiment_data, "workloads": []})
    with pytest.raises(ConfigError):
        load_experiment("/nonexistent/tiny.exp")


@pytest.mark.parametrize("path", sorted(glob.glob(os.path.join(EXPERIMENTS_DIR, "*.exp"))))
def test_shipped_experiments_load(path):
    exp = load_experiment(path)
    assert exp.name == os.path.splitext(os.path.basename(path))[0]
    if exp.kind == "matrix":
        assert exp.cells()


def test_npb_matrix_cell_count():
    exp = load_experiment(os.path.join(EXPERIMENTS_DIR, "npb_matrix.exp"))
    assert len(exp.cells()) == 12 * 6 * 3
    assert exp.cells()[0].cell_id == "000-BT-SMALL-admdefault-s0"


def test_run_experiment_writes_result_files(experiment_data, tmp_path):
    exp = experiment_from_dict(experiment_data)
    result = run_experiment(exp, str(tmp_path / "out"), timestamp=False)
    assert not result.aborted
    assert len(result.averaged) == 2
    assert all(s.seeds == 2 for s in result.averaged)

    rows = {r.policy: r for r in result.comparison}
    assert rows["admdefault"].speedup == 1.0
    assert result.geomean["admdefault"] == 1.0

    with open(result.files["summary"]) as fh:
        lines = fh.read().splitlines()
    assert lines[0] == SUMMARY_HEADER
    assert len(lines) == 5
    assert set(result.files) == {"summary", "regions", "comparison"}
    cells_dir = tmp_path / "out" / "tiny" / "cells"
    assert (cells_dir / "000-w-admdefault-s0.metrics.csv").exists()
    assert (cells_dir / "003-w-weighted_interleave-s1.events.log").exists()


def test_result_files_carry_a_timestamp_header(experiment_data, tmp_path):
    exp = experiment_from_dict(experiment_data)
    result = run_experiment(exp, str(tmp_path), seeds=[0])
    with open(result.files["comparison"]) as fh:
        assert fh.readline().startswith("# generated")


def test_runtime_failure_aborts_only_the_cell(experiment_data, tmp_path):
    # 100 pages cannot fit in 80 pages of memory
    experiment_data["workloads"] = [{"name": "huge", "regions": [{"name": "a", "pages": 100, "demand": 10000}]}]
    exp = experiment_from_dict(experiment_data)
    outcome = execute_cell(exp, exp.cells([0])[0], str(tmp_path))
    assert outcome.aborted
    assert outcome.error

    result = run_experiment(exp, str(tmp_path), seeds=[0], timestamp=False)
    assert len(result.aborted) == 2
    assert result.comparison == []


def test_ratio_grid():
    assert ratio_grid(0.25) == [1.0, 0.75, 0.5, 0.25, 0.0]
    assert ratio_grid(grid=[0.5, 1.0, 0.5]) == [1.0, 0.5]
    with pytest.raises(ConfigError):
        ratio_grid(grid=[])
    with pytest.raises(ConfigError):
        ratio_grid(grid=[1.5])


def test_pick_best_breaks_ties_on_latency():
    points = [SweepPoint(100, 1.0, 100.0, 200.0), SweepPoint(100, 0.5, 100.0, 150.0),
              SweepPoint(100, 0.25, 90.0, 100.0)]
    assert pick_best(points).ratio == 0.5
    tied = [SweepPoint(100, 0.5, 100.0, 150.0), SweepPoint(100, 0.75, 100.0, 150.0)]
    assert pick_best(tied).ratio == 0.75


def test_sweep_with_fast_only_grid_has_no_gain(experiment_data):
    experiment_data.update(kind="ratio_sweep", sweep={"pages": 8, "read_fraction": 1.0, "demands": [1.0, 2.0]})
    levels = sweep_ratio(experiment_from_dict(experiment_data), grid=[1.0])
    assert [level.demand for level in levels] == [1.0, 2.0]
    assert all(level.best.ratio == 1.0 and level.gain == 1.0 for level in levels)


def test_sweep_needs_demand_levels(experiment_data):
    experiment_data.update(kind="ratio_sweep", sweep={"pages": 8})
    with pytest.raises(ConfigError):
        sweep_ratio(experiment_from_dict(experiment_data))


def test_fit_calibration_round_trips_measurements(tmp_path, small_calibration):
    path = write_measurements(str(tmp_path / "m.csv"), small_calibration)
    fitted = fit_calibration(path, small_calibration)
    for t in TIERS:
        assert fitted.models[t].anchors == small_calibration.models[t].anchors
    assert fitted.capacity_bytes == small_calibration.capacity_bytes


def test_fit_calibration_rejects_bad_measurements(tmp_path, small_calibration):
    header = ",".join(MEASUREMENT_HEADER)
    path = tmp_path / "bad.csv"
    # latency falls as demand grows
    path.write_text(header + "\n" + "\n".join(
        f"{tier},{rf},{demand},{latency},{demand / 2}"
        for tier in ("FAST", "SLOW") for rf in (0.0, 1.0)
        for demand, latency in ((0, 300), (100, 200), (200, 100))
    ) + "\n")
    with pytest.raises(CalibrationError) as err:
        fit_calibration(str(path), small_calibration)
    assert err.value.rows

    path.write_text(header + "\nFAST,1.0,0,100,0\n")
    with pytest.raises(CalibrationError):
        fit_calibration(str(path), small_calibration)

    path.write_text(header + "\nHBM,1.0,0,100,0\n")
    with pytest.raises(ConfigError):
        fit_calibration(str(path), small_calibration)


def test_bare_names_resolve_against_the_experiments_directory():
    assert load_experiment("observation2").name == "observation2"
    assert load_experiment("overhead_small.exp").kind == "matrix"


def test_inline_workloads_can_scale_demand(experiment_data, small_calibration):
    experiment_data["workloads"][0]["demand_scale"] = 2.5
    exp = experiment_from_dict(experiment_data)
    spec = exp.build_workload(0, small_calibration)
    assert spec.regions[0].demand == 2.5
