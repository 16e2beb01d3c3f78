"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict that is printed in the pytest terminal
summary. Full-length closed-loop runs are shared through a session cache.
"""
import time

import numpy as np
import pytest

from aerocine.itsdt import SignedDistanceField, apply_changes, batch_recompute
from aerocine.planner import PlannerConfig, ShotSpec, Trajectory, plan
from aerocine.forecast import ActorForecast
from aerocine.runner import CYCLE_BUDGET_MS, RunMode, bench_map, run_scenario, weighted_increase
from aerocine.scenario import BUNDLED, load_scenario
from aerocine.voxel_world import OccupancyGrid, integrate_scan
from map_cases import random_scans
from planner_cases import FIELD, QUADRATIC, gradient_error, random_instance

pytestmark = pytest.mark.acceptance

GT, ONLINE, NOISY = "gt-map/gt", "online/gt", "gt-map/noisy:1"


@pytest.fixture(scope="session")
def runs():
    cache = {}

    def get(name, label):
        if (name, label) not in cache:
            cache[name, label] = run_scenario(load_scenario(name), RunMode.from_label(label))
        return cache[name, label]
    return get


def test_criterion_1_incremental_field_equals_batch(verdict):
    t0 = time.perf_counter()
    bad = 0
    worst = 0.0
    for seed in range(200):
        cfg, scans = random_scans(seed)
        grid = OccupancyGrid(cfg)
        sdf = SignedDistanceField(cfg)
        for scan in scans:
            apply_changes(sdf, grid, integrate_scan(grid, scan))
            ref = batch_recompute(grid, sdf.config)
            same = (np.array_equal(sdf.border, ref.border)
                    and np.array_equal(np.sign(sdf.signed(grid)), np.sign(ref.signed(grid))))
            worst = max(worst, float(np.abs(sdf.distance - ref.distance).max()))
            bad += not same
    elapsed = time.perf_counter() - t0
    ok = bad == 0 and worst <= 1e-9 and elapsed < 60.0
    verdict(1, ok, f"200 sequences, {bad} sign/border mismatches, max |dd| {worst:.1e}, {elapsed:.1f} s")
    assert ok


def test_criterion_2_gradient_suite(verdict):
    rng = np.random.default_rng(2024)
    worst = {name: max(gradient_error(name, rng) for _ in range(50)) for name in QUADRATIC + FIELD}
    ok = all(worst[n] < 1e-6 for n in QUADRATIC) and all(worst[n] < 1e-4 for n in FIELD)
    verdict(2, ok, "max rel error " + ", ".join(f"{n} {e:.1e}" for n, e in worst.items()))
    assert ok


def test_criterion_3_newton_one_step(verdict):
    cfg = PlannerConfig(lambda2=0.0, lambda3=0.0, eta=1.0, max_iterations=1)
    rng = np.random.default_rng(3)
    norms = []
    for _ in range(50):
        traj, actor, view = random_instance(rng, n=cfg.n_waypoints)
        t = np.linspace(0, cfg.horizon, cfg.n_waypoints)
        traj = Trajectory(traj.waypoints, cfg.horizon)
        actor = ActorForecast(t, actor.positions, actor.headings)
        _, diag = plan(traj, actor, ShotSpec(), view, cfg)
        assert diag.iterations == 1
        norms.append(diag.grad_norm)
    ok = max(norms) < 1e-8
    verdict(3, ok, f"50 instances, max preconditioned-gradient norm after one step {max(norms):.1e}")
    assert ok


def test_criterion_4_ablation_ordering(runs, verdict):
    scn = load_scenario("corridor")
    gt, online, noisy = (runs("corridor", m).aggregates for m in (GT, ONLINE, NOISY))
    ratio = online["avg_true_cost"] / gt["avg_true_cost"]
    inc = weighted_increase(gt, noisy, scn.planner, "true_")
    total = noisy["avg_true_cost"] - gt["avg_true_cost"]
    ok = 1.0 <= ratio <= 1.3 and total > 0 and inc["shot"] > 0.5 * total
    verdict(4, ok, f"online/gt-map cost ratio {ratio:.3f}; noisy {gt['avg_true_cost']:.3f} -> "
                   f"{noisy['avg_true_cost']:.3f}, shot share {inc['shot'] / total:.0%} of +{total:.3f}")
    assert ok


def test_criterion_5_cycle_budget(runs, verdict):
    report = runs("corridor", ONLINE)
    cyc = [t["cycle_ms"] for t in report.timings]
    iters = max(r["iters"] for r in report.records)
    ok = len(cyc) == 700 and max(cyc) < CYCLE_BUDGET_MS
    verdict(5, ok, f"{len(cyc)} cycles, avg {np.mean(cyc):.1f} ms, max {max(cyc):.1f} ms, "
                   f"up to {iters} iterations")
    assert ok


def test_criterion_6_map_update_decay(verdict):
    s = bench_map("corridor", checkpoint_every=50)
    ok = s["decay_ratio"] is not None and s["decay_ratio"] < 0.5 and s["checkpoint_mismatches"] == 0
    verdict(6, ok, f"first update {s['first_update_ms']:.1f} ms, median after 30 s "
                   f"{s['median_update_after_30s_ms']:.1f} ms (ratio {s['decay_ratio']:.2f})")
    assert ok


def test_criterion_7_safety(runs, verdict):
    checked = violations = 0
    closest = np.inf
    for name in BUNDLED:
        labels = (GT, ONLINE, NOISY) if name == "corridor" else (ONLINE, GT)
        for label in labels:
            for r in runs(name, label).records:
                if r["init_min_sd"] > 0:
                    checked += 1
                    closest = min(closest, r["min_sd"])
                    violations += r["min_sd"] <= 0
    ok = violations == 0 and checked > 0
    verdict(7, ok, f"{checked} feasible cycles over {len(BUNDLED)} scenarios, {violations} violations, "
                   f"closest min signed distance {closest:.2f} m")
    assert ok


def test_criterion_8_determinism(runs, verdict):
    same = []
    for name in BUNDLED:
        first = runs(name, ONLINE)
        again = run_scenario(load_scenario(name), RunMode.from_label(ONLINE))
        same.append(first.csv_text() == again.csv_text())
    ok = all(same)
    verdict(8, ok, "online re-runs byte-identical: " + ", ".join(f"{n} {s}" for n, s in zip(BUNDLED, same)))
    assert ok
