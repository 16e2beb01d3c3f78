"""Closed-loop scenario runner, mode comparison and map-update benchmark.

A cycle at time t_k:

1. freeze the field (all scans up to t_{k-1}) into a read-only view,
2. build the actor forecast for the selected actor source,
3. plan from the previous solution shifted by one cycle,
4. integrate the scan taken at the drone pose at t_k.

Steps 3 and 4 are independent, so the optional two-lane mode runs them
concurrently and produces identical outputs.
"""
from __future__ import annotations

import csv
import io
import json
import math
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, NoIntersectionError
from .forecast import (ActorFilter, ActorForecast, ActorObservation, CameraModel, forecast, kf_step,
                       make_filter, project_pixel_to_ground)
from .itsdt import FieldView, SignedDistanceField, apply_changes, batch_recompute
from .planner import (Trajectory, cost_breakdown, heading_towards, plan, shift_trajectory,
                      straight_initialization)
from .scenario import Scenario, load_scenario
from .sim import SensorPose, actor_path_samples, actor_pose_at, ground_truth_grid, perturb_positions, simulate_scan
from .voxel_world import OccupancyGrid, integrate_scan

CYCLE_BUDGET_MS = 200.0
SEGMENT_SAMPLES = 4

CSV_COLUMNS = (
    "cycle", "t", "drone_x", "drone_y", "drone_z", "drone_psi", "actor_x", "actor_y", "actor_z",
    "J", "J_smooth", "J_shot", "J_obs", "J_occ", "iters", "converged", "grad_norm",
    "T", "T_smooth", "T_shot", "T_obs", "T_occ",
    "min_sd", "init_min_sd", "min_clearance", "map_changes",
)
# J*: the planner's own objective on its own map and actor estimate.
# T*: the same trajectory and actor forecast scored on the ground-truth map.


@dataclass(frozen=True)
class RunMode:
    map_source: str = "online"
    actor_source: str = "ground_truth"
    amplitude: float = 0.0

    def __post_init__(self):
        if self.map_source not in ("online", "ground_truth"):
            raise ConfigError(f"unknown map source {self.map_source!r}")
        if self.actor_source not in ("ground_truth", "noisy", "filtered"):
            raise ConfigError(f"unknown actor source {self.actor_source!r}")
        if self.amplitude < 0 or (self.actor_source != "noisy" and self.amplitude):
            raise ConfigError("amplitude applies to the noisy actor source only and must be >= 0")

    @classmethod
    def parse(cls, map_flag: str = "online", actor_flag: str = "gt") -> "RunMode":
        maps = {"online": "online", "gt-map": "ground_truth", "gt": "ground_truth"}
        if map_flag not in maps:
            raise ConfigError(f"--mode must be online or gt-map, got {map_flag!r}")
        if actor_flag == "gt":
            return cls(maps[map_flag], "ground_truth")
        if actor_flag == "kf":
            return cls(maps[map_flag], "filtered")
        if actor_flag.startswith("noisy:"):
            try:
                amp = float(actor_flag.split(":", 1)[1])
            except ValueError:
                raise ConfigError(f"bad noise amplitude in {actor_flag!r}") from None
            return cls(maps[map_flag], "noisy", amp)
        raise ConfigError(f"--actor must be gt, noisy:<amp> or kf, got {actor_flag!r}")

    @classmethod
    def from_label(cls, label: str) -> "RunMode":
        """``online``, ``gt-map``, optionally followed by ``/gt``, ``/noisy:1`` or ``/kf``."""
        m, _, a = label.partition("/")
        return cls.parse(m, a or "gt")

    @property
    def label(self) -> str:
        m = "online" if self.map_source == "online" else "gt-map"
        a = {"ground_truth": "gt", "filtered": "kf"}.get(self.actor_source, f"noisy:{self.amplitude:g}")
        return f"{m}/{a}"


@dataclass
class RunReport:
    scenario: str
    mode: RunMode
    seed: int
    records: list[dict] = field(default_factory=list)
    timings: list[dict] = field(default_factory=list)
    trajectory: list[dict] = field(default_factory=list)
    bootstrap_ms: float = 0.0

    @property
    def aggregates(self) -> dict:
        return aggregate(self.records)

    @property
    def timing_summary(self) -> dict:
        return timing_summary(self.timings)

    def to_json(self) -> dict:
        return {
            "scenario": self.scenario, "mode": self.mode.label, "seed": self.seed,
            "cycles": len(self.records), "aggregates": self.aggregates,
            "timing": {**self.timing_summary, "bootstrap_ms": self.bootstrap_ms},
        }

    def csv_text(self) -> str:
        return records_csv(self.records)


def aggregate(records: list[dict]) -> dict:
    out = {"cycles": len(records)}
    for prefix, tag in (("J", ""), ("T", "true_")):
        for part, name in (("", "cost"), ("_smooth", "smooth"), ("_shot", "shot"),
                           ("_obs", "obs"), ("_occ", "occ")):
            vals = [r[prefix + part] for r in records]
            out[f"avg_{tag}{name}"] = math.fsum(vals) / len(vals) if vals else 0.0
        costs = [r[prefix] for r in records]
        out[f"median_{tag}cost"] = statistics.median(costs) if costs else 0.0
    iters = [r["iters"] for r in records]
    out["avg_iters"] = math.fsum(iters) / len(iters) if iters else 0.0
    return out


def timing_summary(timings: list[dict]) -> dict:
    out = {}
    for key in ("plan_ms", "map_ms", "cycle_ms"):
        vals = [t[key] for t in timings]
        out[f"avg_{key}"] = math.fsum(vals) / len(vals) if vals else 0.0
        out[f"max_{key}"] = max(vals) if vals else 0.0
    cyc = [t["cycle_ms"] for t in timings]
    out["p99_cycle_ms"] = float(np.percentile(cyc, 99)) if cyc else 0.0
    out["budget_ms"] = CYCLE_BUDGET_MS
    out["budget_overruns"] = sum(c > CYCLE_BUDGET_MS for c in cyc)
    return out


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def records_csv(records: list[dict], columns=CSV_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in records:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def read_records_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    ints = {"cycle", "iters", "converged", "map_changes"}
    return [{k: (int(v) if k in ints else float(v)) for k, v in row.items()} for row in rows]


# -- closed loop -----------------------------------------------------------------

def _sample_along(X: np.ndarray, per_segment: int = SEGMENT_SAMPLES) -> np.ndarray:
    u = np.arange(per_segment) / per_segment
    pts = X[:-1, None, :] + u[None, :, None] * (X[1:] - X[:-1])[:, None, :]
    return np.vstack([pts.reshape(-1, 3), X[-1:]])


class ClosedLoop:
    def __init__(self, scn: Scenario, mode: RunMode, *, two_lane: bool = False):
        self.scn = scn
        self.mode = mode
        self.two_lane = two_lane
        cfg = scn.planner
        self.n = cfg.n_waypoints
        self.t_f = cfg.horizon
        self.dt_wp = self.t_f / (self.n - 1)
        self.filter: ActorFilter | None = None
        self.grid: OccupancyGrid | None = None
        self.sdf: SignedDistanceField | None = None
        self.view: FieldView | None = None
        self.prev: Trajectory | None = None
        self.lidar_rng = np.random.default_rng([scn.seed, 7])

        gt = ground_truth_grid(scn.world, scn.grid)
        self.truth_view = batch_recompute(gt, scn.sdf).snapshot(gt)
        if mode.map_source == "ground_truth":
            self.view = self.truth_view
        else:
            self.grid = OccupancyGrid(scn.grid)
            self.sdf = SignedDistanceField(scn.grid, scn.sdf)

        a0 = self._actor_truth(np.array([0.0]))
        start = scn.start
        if start is None:
            from .planner import shot_offsets
            start = a0[0][0] + shot_offsets(a0[1], scn.shot)[0]
        self.position = np.asarray(start, dtype=float)
        self.yaw = float(heading_towards(self.position[None], a0[0])[0])
        self.travel_yaw = self.yaw

    # actor ---------------------------------------------------------------------
    def _actor_truth(self, times: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        pos, head = actor_path_samples(self.scn.actor, times)
        pos = pos.copy()
        pos[:, 2] += self.scn.aim_height
        return pos, head

    def actor_forecast(self, k: int, t: float) -> ActorForecast:
        times = t + np.arange(self.n) * self.dt_wp
        rel = times - t
        if self.mode.actor_source == "ground_truth":
            pos, head = self._actor_truth(times)
            return ActorForecast(rel, pos, head)
        if self.mode.actor_source == "noisy":
            pos, head = self._actor_truth(times)
            rng = np.random.default_rng([self.scn.seed, k, 1])
            return ActorForecast(rel, perturb_positions(pos, self.mode.amplitude, rng), head)
        obs = self._camera_observation(k, t)
        if self.filter is None:
            if obs is None:
                truth = actor_pose_at(self.scn.actor, t)
                obs = truth
            self.filter = make_filter(self.scn.actor.kind, obs)
        else:
            self.filter = kf_step(self.filter, self.scn.cycle_dt, obs)
        fc = forecast(self.filter, self.t_f, self.dt_wp)
        return fc.lifted(self.scn.aim_height)

    def _camera_observation(self, k: int, t: float) -> ActorObservation | None:
        truth = actor_pose_at(self.scn.actor, t)
        ground = np.asarray(truth.world_position)
        aim = ground + np.array([0.0, 0.0, self.scn.aim_height])
        cam = CameraModel.aimed_at(self.position, aim)
        try:
            px = cam.project(ground)
        except ValueError:
            return None
        rng = np.random.default_rng([self.scn.seed, k, 2])
        px = px + rng.normal(0.0, self.scn.pixel_noise, 2)
        if not (0 <= px[0] <= cam.width and 0 <= px[1] <= cam.height):
            return None
        try:
            p = project_pixel_to_ground(cam, px, self.scn.world.ground_z)
        except NoIntersectionError:
            return None
        return ActorObservation(t, tuple(p), truth.heading)

    # map -------------------------------------------------------------------------
    def sensor_pose(self, t: float) -> SensorPose:
        yaw = self.yaw if self.scn.sensor_yaw == "heading" else self.travel_yaw
        return SensorPose(tuple(self.position), yaw, t)

    def integrate(self, t: float) -> tuple[int, float]:
        if self.grid is None:
            return 0, 0.0
        t0 = time.perf_counter()
        scan = simulate_scan(self.scn.world, self.sensor_pose(t), self.scn.lidar, self.lidar_rng)
        changes = integrate_scan(self.grid, scan)
        apply_changes(self.sdf, self.grid, changes)
        return len(changes), (time.perf_counter() - t0) * 1e3

    def bootstrap(self) -> float:
        """Pre-flight sweep: scans from the start pose at evenly spaced yaws."""
        if self.grid is None:
            return 0.0
        m = self.scn.bootstrap_yaws
        t0 = time.perf_counter()
        base = self.yaw if self.scn.sensor_yaw == "heading" else self.travel_yaw
        for j in range(m):
            pose = SensorPose(tuple(self.position), base + 2 * math.pi * j / m, 0.0)
            scan = simulate_scan(self.scn.world, pose, self.scn.lidar, self.lidar_rng)
            apply_changes(self.sdf, self.grid, integrate_scan(self.grid, scan))
        return (time.perf_counter() - t0) * 1e3

    # cycle -----------------------------------------------------------------------
    def cycle(self, k: int, pool: ThreadPoolExecutor | None = None) -> tuple[dict, dict, dict]:
        scn = self.scn
        t = k * scn.cycle_dt
        c0 = time.perf_counter()
        view = self.view if self.grid is None else self.sdf.snapshot(self.grid)

        fut = pool.submit(self.integrate, t) if pool is not None else None

        actor = self.actor_forecast(k, t)
        if self.prev is None:
            init = straight_initialization(self.position, actor, scn.shot, self.t_f)
        else:
            init = shift_trajectory(self.prev, scn.cycle_dt, self.position)
        init.headings = heading_towards(init.waypoints, actor.positions, init.headings)
        init_sd = float(np.min(view.value(_sample_along(init.waypoints))))
        traj, diag = plan(init, actor, scn.shot, view, scn.planner)

        if fut is not None:
            changes, map_ms = fut.result()
        else:
            changes, map_ms = self.integrate(t)
        cycle_ms = (time.perf_counter() - c0) * 1e3

        # evaluation only, outside the timed cycle
        true_cost = cost_breakdown(traj, actor, scn.shot, self.truth_view, scn.planner)
        along = _sample_along(traj.waypoints)
        min_sd = float(np.min(view.value(along)))
        clearance = float(np.min(scn.world.clearance(along)))

        costs = diag.costs
        a_now = actor.positions[0]
        rec = {
            "cycle": k, "t": t,
            "drone_x": float(self.position[0]), "drone_y": float(self.position[1]),
            "drone_z": float(self.position[2]), "drone_psi": float(traj.headings[0]),
            "actor_x": float(a_now[0]), "actor_y": float(a_now[1]), "actor_z": float(a_now[2]),
            "J": costs.total, "J_smooth": costs.smooth, "J_shot": costs.shot,
            "J_obs": costs.obs, "J_occ": costs.occ, "iters": diag.iterations,
            "converged": diag.converged, "grad_norm": diag.grad_norm,
            "T": true_cost.total, "T_smooth": true_cost.smooth, "T_shot": true_cost.shot,
            "T_obs": true_cost.obs, "T_occ": true_cost.occ,
            "min_sd": min_sd, "init_min_sd": init_sd, "min_clearance": clearance, "map_changes": changes,
        }
        timing = {"cycle": k, "plan_ms": diag.wall_ms, "map_ms": map_ms, "cycle_ms": cycle_ms}
        dj = diag.record(t)
        dj["map_ms"] = map_ms

        # advance: the drone tracks the plan perfectly for one cycle
        tt = traj.times
        nxt = np.array([np.interp(scn.cycle_dt, tt, traj.waypoints[:, j]) for j in range(3)])
        step = nxt - self.position
        if np.linalg.norm(step[:2]) > 1e-6:
            self.travel_yaw = math.atan2(step[1], step[0])
        self.position = nxt
        self.yaw = float(np.interp(scn.cycle_dt, tt, np.unwrap(traj.headings)))
        self.prev = traj
        return rec, timing, dj


def run_scenario(scenario, mode: RunMode, out=None, *, seed: int | None = None,
                 two_lane: bool = False, cycles: int | None = None) -> RunReport:
    scn = scenario if isinstance(scenario, Scenario) else load_scenario(scenario, seed=seed)
    if seed is not None and isinstance(scenario, Scenario):
        scn = _reseeded(scn, seed)
    loop = ClosedLoop(scn, mode, two_lane=two_lane)
    report = RunReport(scn.name, mode, scn.seed)
    total = scn.n_cycles if cycles is None else min(cycles, scn.n_cycles)
    diagnostics = []
    if total:
        report.bootstrap_ms = loop.bootstrap()
    pool = ThreadPoolExecutor(max_workers=1) if two_lane else None
    try:
        for k in range(total):
            rec, timing, dj = loop.cycle(k, pool)
            report.records.append(rec)
            report.timings.append(timing)
            diagnostics.append(dj)
    finally:
        if pool is not None:
            pool.shutdown()
    if out is not None:
        write_run(report, diagnostics, out)
    return report


def _reseeded(scn: Scenario, seed: int) -> Scenario:
    from dataclasses import replace
    return replace(scn, seed=seed)


TRAJ_COLUMNS = ("t", "drone_x", "drone_y", "drone_z", "drone_psi", "actor_x", "actor_y", "actor_z")
TIMING_COLUMNS = ("cycle", "plan_ms", "map_ms", "cycle_ms")


def write_run(report: RunReport, diagnostics: list[dict], out, prefix: str = "") -> list[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / f"{prefix}report.json", out / f"{prefix}cycles.csv",
             out / f"{prefix}diagnostics.jsonl", out / f"{prefix}trajectory.csv"]
    paths[0].write_text(json.dumps(report.to_json(), indent=2) + "\n")
    paths[1].write_text(report.csv_text())
    with open(paths[2], "w") as fh:
        for d in diagnostics:
            fh.write(json.dumps(d) + "\n")
    paths[3].write_text(records_csv(report.records, TRAJ_COLUMNS))
    # wall-clock data is kept apart so the cycle CSVs stay reproducible
    paths.append(out / f"{prefix}timings.csv")
    paths[4].write_text(records_csv(report.timings, TIMING_COLUMNS))
    return paths


# -- comparison and benchmark ------------------------------------------------------

def compare_modes(scenario, mode_a: RunMode, mode_b: RunMode, out=None, *,
                  seed: int | None = None, cycles: int | None = None) -> dict:
    scn = scenario if isinstance(scenario, Scenario) else load_scenario(scenario, seed=seed)
    ra = run_scenario(scn, mode_a, cycles=cycles)
    rb = run_scenario(scn, mode_b, cycles=cycles)
    ga, gb = ra.aggregates, rb.aggregates
    pa = np.array([[r["drone_x"], r["drone_y"], r["drone_z"]] for r in ra.records]).reshape(-1, 3)
    pb = np.array([[r["drone_x"], r["drone_y"], r["drone_z"]] for r in rb.records]).reshape(-1, 3)
    rms = float(np.sqrt(np.mean(np.sum((pa - pb) ** 2, axis=1)))) if len(pa) else 0.0
    w = scn.planner
    summary = {
        "scenario": scn.name, "seed": scn.seed, "a": mode_a.label, "b": mode_b.label,
        "aggregates_a": ga, "aggregates_b": gb,
        "cost_ratio": _ratio(gb["avg_true_cost"], ga["avg_true_cost"]),
        "planner_cost_ratio": _ratio(gb["avg_cost"], ga["avg_cost"]),
        "rms_divergence": rms,
        "weighted_increase": weighted_increase(ga, gb, w, "true_"),
        "planner_weighted_increase": weighted_increase(ga, gb, w, ""),
        "timing_a": ra.timing_summary, "timing_b": rb.timing_summary,
    }
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.json").write_text(json.dumps(summary, indent=2) + "\n")
        (out / "a_cycles.csv").write_text(ra.csv_text())
        (out / "b_cycles.csv").write_text(rb.csv_text())
        (out / "a_trajectory.csv").write_text(records_csv(ra.records, TRAJ_COLUMNS))
        (out / "b_trajectory.csv").write_text(records_csv(rb.records, TRAJ_COLUMNS))
    return summary


def _ratio(b: float, a: float) -> float:
    if a:
        return b / a
    return 1.0 if b == 0 else math.inf


def weighted_increase(ga: dict, gb: dict, w, tag: str = "true_") -> dict:
    """Per-component change of the weighted average cost from run a to run b."""
    d = {k: gb[f"avg_{tag}{k}"] - ga[f"avg_{tag}{k}"] for k in ("smooth", "shot", "obs", "occ")}
    return {"smooth": d["smooth"], "shot": w.lambda1 * d["shot"],
            "obs": w.lambda2 * d["obs"], "occ": w.lambda3 * d["occ"]}


BENCH_COLUMNS = ("scan", "t", "rays", "changes", "voxels_updated", "integrate_ms", "field_ms", "batch_ms")


def bench_map(scenario, out=None, *, seed: int | None = None, checkpoint_every: int = 25,
              scans: int | None = None, verify: bool = True, static: bool = False) -> dict:
    """Per-scan incremental field update times along the ideal shot path.

    With ``static`` the drone and actor stay at their starting poses, so every
    scan repeats the first one.

    At every ``checkpoint_every``-th scan the batch transform is timed on the
    same grid and, with ``verify``, checked against the incremental field.
    """
    scn = scenario if isinstance(scenario, Scenario) else load_scenario(scenario, seed=seed)
    from .planner import shot_offsets
    grid = OccupancyGrid(scn.grid)
    sdf = SignedDistanceField(scn.grid, scn.sdf)
    total = scn.n_cycles + 1 if scans is None else scans
    rng = np.random.default_rng([scn.seed, 7])
    lo = np.asarray(scn.world.bounds[0]) + scn.grid.resolution
    hi = np.asarray(scn.world.bounds[1]) - scn.grid.resolution
    rows = []
    mismatches = 0
    for s in range(total):
        t = s * scn.cycle_dt
        obs = actor_pose_at(scn.actor, 0.0 if static else t)
        a = np.asarray(obs.world_position) + np.array([0, 0, scn.aim_height])
        p = np.clip(a + shot_offsets(np.array([obs.heading]), scn.shot)[0], lo, hi)
        p[2] = max(p[2], scn.world.ground_z + 1.0)
        yaw = math.atan2(a[1] - p[1], a[0] - p[0])
        scan = simulate_scan(scn.world, SensorPose(tuple(p), yaw, t), scn.lidar, rng)
        t0 = time.perf_counter()
        changes = integrate_scan(grid, scan)
        t1 = time.perf_counter()
        updated = apply_changes(sdf, grid, changes)
        t2 = time.perf_counter()
        batch_ms = ""
        if checkpoint_every and s % checkpoint_every == 0:
            b0 = time.perf_counter()
            ref = batch_recompute(grid, scn.sdf)
            batch_ms = (time.perf_counter() - b0) * 1e3
            if verify and not (np.array_equal(ref.border, sdf.border)
                               and np.array_equal(ref.distance, sdf.distance)):
                mismatches += 1
        rows.append({"scan": s, "t": t, "rays": len(scan), "changes": len(changes),
                     "voxels_updated": updated, "integrate_ms": (t1 - t0) * 1e3,
                     "field_ms": (t2 - t1) * 1e3, "batch_ms": batch_ms})
    upd = [r["integrate_ms"] + r["field_ms"] for r in rows]
    late = [u for r, u in zip(rows, upd) if r["t"] >= 30.0]
    batch = [r["batch_ms"] for r in rows if r["batch_ms"] != ""]
    summary = {
        "scenario": scn.name, "scans": len(rows),
        "first_update_ms": upd[0] if upd else 0.0,
        "median_update_after_30s_ms": statistics.median(late) if late else None,
        "decay_ratio": (statistics.median(late) / upd[0]) if late and upd[0] else None,
        "incremental_total_ms": math.fsum(upd),
        "batch_mean_ms": math.fsum(batch) / len(batch) if batch else None,
        "batch_equivalent_total_ms": (math.fsum(batch) / len(batch) * len(rows)) if batch else None,
        "checkpoints": len(batch), "checkpoint_mismatches": mismatches,
    }
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "map_bench.csv").write_text(records_csv(rows, BENCH_COLUMNS))
        (out / "map_bench.json").write_text(json.dumps(summary, indent=2) + "\n")
    summary["rows"] = rows
    return summary
