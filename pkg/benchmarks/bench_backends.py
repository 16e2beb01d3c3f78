"""Compare the compiled and pure-Python kernels on the three hot paths.

    python benchmarks/bench_backends.py [--scans 20] [--segments 2000] [--repeat 3] [--out DIR]

Each workload runs through the public API with the backend switched via
``kernels.using``. Results are checked for equality across backends before
timings are reported.
"""
from __future__ import annotations

import argparse
import json
import math
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from aerocine import kernels
from aerocine.itsdt import SignedDistanceField, apply_changes
from aerocine.scenario import load_scenario
from aerocine.sim import SensorPose, simulate_scan
from aerocine.voxel_world import OccupancyGrid, integrate_scan, traverse_ray


def workload_traverse(cfg, segments):
    out = [traverse_ray(a, b, cfg) for a, b in segments]
    return np.concatenate(out)


def workload_mapping(scn, scans):
    grid = OccupancyGrid(scn.grid)
    sdf = SignedDistanceField(scn.grid, scn.sdf)
    t_int = t_field = 0.0
    for s in scans:
        t0 = time.perf_counter()
        ch = integrate_scan(grid, s)
        t1 = time.perf_counter()
        apply_changes(sdf, grid, ch)
        t2 = time.perf_counter()
        t_int += t1 - t0
        t_field += t2 - t1
    return (grid.cells.copy(), sdf.distance.copy()), t_int, t_field


def best_of(fn, repeat):
    times, result = [], None
    for _ in range(repeat):
        t0 = time.perf_counter()
        result = fn()
        times.append(time.perf_counter() - t0)
    return result, min(times)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenario", default="open-field")
    ap.add_argument("--scans", type=int, default=20)
    ap.add_argument("--segments", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--out", type=Path, default=None)
    ns = ap.parse_args(argv)

    scn = load_scenario(ns.scenario)
    rng = np.random.default_rng(0)
    lo, hi = scn.grid.lower, scn.grid.upper
    segments = rng.uniform(lo + 1e-3, hi - 1e-3, (ns.segments, 2, 3))
    scans = []
    for k in range(ns.scans):
        x = -8.0 + 24.0 * k / max(1, ns.scans - 1)
        pose = SensorPose((x, 8.0, 4.0), -math.pi / 2, 0.2 * k)
        scans.append(simulate_scan(scn.world, pose, scn.lidar))
    rays = sum(len(s) for s in scans)

    rows, outputs = [], {}
    for name in kernels.available():
        with kernels.using(name):
            vox, t_trav = best_of(lambda: workload_traverse(scn.grid, segments), ns.repeat)
            runs = [workload_mapping(scn, scans) for _ in range(ns.repeat)]
        state = runs[0][0]
        t_int = min(r[1] for r in runs)
        t_field = min(r[2] for r in runs)
        outputs[name] = (vox, state)
        rows.append({"backend": name, "traverse_ms": t_trav * 1e3, "integrate_ms": t_int * 1e3,
                     "field_ms": t_field * 1e3, "rays": rays, "segments": ns.segments})

    ref = outputs[rows[0]["backend"]]
    for name, (vox, (cells, dist)) in outputs.items():
        same = (np.array_equal(vox, ref[0]) and np.array_equal(cells, ref[1][0])
                and np.array_equal(dist, ref[1][1]))
        if not same:
            print(f"backend {name} disagrees with {rows[0]['backend']}", file=sys.stderr)
            return 1

    print(f"{ns.scenario}: {ns.segments} segments, {ns.scans} scans ({rays} rays), best of {ns.repeat}")
    print(f"{'backend':<8} {'traverse ms':>12} {'integrate ms':>13} {'field ms':>10}")
    for r in rows:
        print(f"{r['backend']:<8} {r['traverse_ms']:12.1f} {r['integrate_ms']:13.1f} {r['field_ms']:10.1f}")
    by = {r["backend"]: r for r in rows}
    speedup = {}
    if "native" in by and "python" in by:
        for k in ("traverse_ms", "integrate_ms", "field_ms"):
            speedup[k] = by["python"][k] / by["native"][k]
        print("speedup  " + "  ".join(f"{k[:-3]} x{v:.1f}" for k, v in speedup.items()))
    if ns.out is not None:
        ns.out.mkdir(parents=True, exist_ok=True)
        (ns.out / "backends.json").write_text(json.dumps(
            {"rows": rows, "speedup": speedup, "median_rays_per_scan": statistics.median(len(s) for s in scans)},
            indent=2) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
