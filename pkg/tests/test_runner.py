import json
from dataclasses import replace

import pytest

from aerocine.errors import ConfigError
from aerocine.runner import (
    CSV_COLUMNS, RunMode, aggregate, bench_map, compare_modes, read_records_csv, run_scenario,
    weighted_increase,
)
from aerocine.scenario import load_scenario

CYCLES = 12


@pytest.fixture(scope="module")
def field_scn():
    return load_scenario("open-field")


@pytest.fixture(scope="module")
def online_run(field_scn, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return run_scenario(field_scn, RunMode(), out, cycles=CYCLES), out


# -- modes --------------------------------------------------------------------------

@pytest.mark.parametrize("label", ["online/gt", "gt-map/gt", "online/kf", "gt-map/noisy:1", "online/noisy:0.5"])
def test_mode_label_roundtrip(label):
    assert RunMode.from_label(label).label == label


@pytest.mark.parametrize("args", [("sky", "gt"), ("online", "noisy:x"), ("online", "oracle")])
def test_mode_parse_errors(args):
    with pytest.raises(ConfigError):
        RunMode.parse(*args)


def test_mode_amplitude_only_for_noisy():
    with pytest.raises(ConfigError):
        RunMode("online", "ground_truth", 1.0)


# -- runs -----------------------------------------------------------------------------

def test_run_writes_outputs(online_run):
    report, out = online_run
    assert len(report.records) == CYCLES
    names = {p.name for p in out.iterdir()}
    assert {"report.json", "cycles.csv", "diagnostics.jsonl", "trajectory.csv", "timings.csv"} <= names
    header = (out / "cycles.csv").read_text().splitlines()[0]
    assert header.split(",") == list(CSV_COLUMNS)


def test_same_seed_byte_identical(field_scn, online_run, tmp_path):
    report, out = online_run
    run_scenario(field_scn, RunMode(), tmp_path, cycles=CYCLES)
    for name in ("cycles.csv", "trajectory.csv"):
        assert (tmp_path / name).read_bytes() == (out / name).read_bytes()


def test_aggregates_recomputable_from_csv(online_run):
    report, out = online_run
    stored = json.loads((out / "report.json").read_text())["aggregates"]
    assert aggregate(read_records_csv(out / "cycles.csv")) == stored


def test_zero_duration(field_scn, tmp_path):
    report = run_scenario(replace(field_scn, duration=0.0), RunMode(), tmp_path)
    assert report.records == []
    agg = report.aggregates
    assert agg["cycles"] == 0
    assert all(v == 0.0 for k, v in agg.items() if k != "cycles")
    assert (tmp_path / "cycles.csv").read_text().count("\n") == 1


def test_two_lane_matches_single_lane(field_scn, online_run):
    report, _ = online_run
    two = run_scenario(field_scn, RunMode(), cycles=CYCLES, two_lane=True)
    assert two.csv_text() == report.csv_text()


def test_seed_changes_noisy_actor(field_scn):
    mode = RunMode.from_label("gt-map/noisy:1")
    a = run_scenario(field_scn, mode, cycles=4)
    b = run_scenario(field_scn, mode, cycles=4, seed=field_scn.seed + 1)
    assert a.csv_text() != b.csv_text()


def test_planner_stays_clear_of_obstacles(online_run):
    report, _ = online_run
    for r in report.records:
        if r["init_min_sd"] > 0:
            assert r["min_sd"] > 0


def test_timings_kept_out_of_cycle_records(online_run):
    report, _ = online_run
    assert not any(k.endswith("_ms") for k in report.records[0])
    assert report.timing_summary["budget_ms"] == 200.0


# -- comparison -------------------------------------------------------------------------

def test_identical_modes_compare(field_scn, tmp_path):
    m = RunMode("ground_truth", "ground_truth")
    s = compare_modes(field_scn, m, m, tmp_path, cycles=6)
    assert s["cost_ratio"] == 1.0 and s["planner_cost_ratio"] == 1.0
    assert s["rms_divergence"] == 0.0
    assert all(v == 0.0 for v in s["weighted_increase"].values())
    assert (tmp_path / "a_cycles.csv").read_bytes() == (tmp_path / "b_cycles.csv").read_bytes()
    assert json.loads((tmp_path / "comparison.json").read_text())["a"] == "gt-map/gt"


def test_weighted_increase_uses_weights():
    ga = {f"avg_{k}": 1.0 for k in ("smooth", "shot", "obs", "occ")}
    gb = {f"avg_{k}": 3.0 for k in ("smooth", "shot", "obs", "occ")}
    w = load_scenario("corridor").planner
    d = weighted_increase(ga, gb, w, "")
    assert d == {"smooth": 2.0, "shot": 2 * w.lambda1, "obs": 2 * w.lambda2, "occ": 2 * w.lambda3}


# -- map benchmark -----------------------------------------------------------------------

def test_bench_static_settles(field_scn, tmp_path):
    s = bench_map(field_scn, tmp_path, scans=20, checkpoint_every=5, static=True)
    rows = s["rows"]
    assert rows[0]["voxels_updated"] > 0
    assert all(r["changes"] == 0 and r["voxels_updated"] == 0 for r in rows[-10:])
    assert s["checkpoint_mismatches"] == 0
    assert (tmp_path / "map_bench.csv").exists() and (tmp_path / "map_bench.json").exists()


def test_bench_checkpoints_agree(field_scn):
    s = bench_map(field_scn, scans=30, checkpoint_every=3)
    assert s["checkpoints"] == 10 and s["checkpoint_mismatches"] == 0
