"""Command line entry point: ``aerocine run | compare | bench-map``.

Exit status is 0 on success, 2 for configuration or scenario errors and 3
for failures while running. Every command writes its artifacts under
``--out`` together with ``manifest.json`` (file names, sizes, SHA-256).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import __version__, kernels
from .errors import ConfigError
from .runner import RunMode, bench_map, compare_modes, run_scenario
from .scenario import load_scenario

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("aerocine")


def write_manifest(out: Path, command: str, args: dict, extra: dict | None = None) -> Path:
    out = Path(out)
    files = []
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            data = p.read_bytes()
            files.append({"path": p.relative_to(out).as_posix(), "bytes": len(data),
                          "sha256": hashlib.sha256(data).hexdigest()})
    manifest = {"command": command, "version": __version__, "backend": kernels.name(),
                "args": args, "files": files, **(extra or {})}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aerocine", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--scenario", required=True,
                        help="scenario TOML file or bundled name (corridor, orbit, open-field)")
        sp.add_argument("--out", required=True, type=Path)
        sp.add_argument("--seed", type=int, default=None, help="override the scenario seed")
        sp.add_argument("-v", "--verbose", action="store_true", help="log a one-line summary")

    r = sub.add_parser("run", help="closed-loop run of one mode")
    common(r)
    r.add_argument("--mode", default="online", help="online | gt-map")
    r.add_argument("--actor", default="gt", help="gt | noisy:<amp> | kf")
    r.add_argument("--cycles", type=int, default=None, help="stop after this many cycles")
    r.add_argument("--two-lane", action="store_true", help="overlap scan integration and planning")

    c = sub.add_parser("compare", help="run two modes on the same script and seed")
    common(c)
    c.add_argument("--a", required=True, help="mode label, e.g. gt-map/gt")
    c.add_argument("--b", required=True, help="mode label, e.g. online/gt or gt-map/noisy:1")
    c.add_argument("--cycles", type=int, default=None)

    b = sub.add_parser("bench-map", help="per-scan incremental field update timings")
    common(b)
    b.add_argument("--scans", type=int, default=None)
    b.add_argument("--checkpoint-every", type=int, default=25)
    b.add_argument("--no-verify", action="store_true", help="skip batch comparison at checkpoints")
    b.add_argument("--static", action="store_true", help="hold drone and actor at their start poses")
    return p


def _run(ns) -> dict:
    mode = RunMode.parse(ns.mode, ns.actor)
    scn = load_scenario(ns.scenario, seed=ns.seed)
    report = run_scenario(scn, mode, ns.out, two_lane=ns.two_lane, cycles=ns.cycles)
    agg, tim = report.aggregates, report.timing_summary
    log.info("%s %s: %d cycles, avg cost %.4f, avg cycle %.1f ms (max %.1f)",
             scn.name, mode.label, agg["cycles"], agg["avg_cost"], tim["avg_cycle_ms"], tim["max_cycle_ms"])
    return {"scenario": scn.name, "mode": mode.label, "seed": scn.seed}


def _compare(ns) -> dict:
    a, b = RunMode.from_label(ns.a), RunMode.from_label(ns.b)
    scn = load_scenario(ns.scenario, seed=ns.seed)
    summary = compare_modes(scn, a, b, ns.out, cycles=ns.cycles)
    log.info("%s: %s vs %s, cost ratio %.4f, rms divergence %.3f m",
             scn.name, a.label, b.label, summary["cost_ratio"], summary["rms_divergence"])
    return {"scenario": scn.name, "a": a.label, "b": b.label, "seed": scn.seed}


def _bench(ns) -> dict:
    scn = load_scenario(ns.scenario, seed=ns.seed)
    s = bench_map(scn, ns.out, checkpoint_every=ns.checkpoint_every, scans=ns.scans,
                  verify=not ns.no_verify, static=ns.static)
    log.info("%s: first update %.2f ms, median after 30 s %s ms, %d checkpoint mismatches",
             scn.name, s["first_update_ms"], s["median_update_after_30s_ms"], s["checkpoint_mismatches"])
    if s["checkpoint_mismatches"]:
        raise RuntimeError("incremental field diverged from the batch transform")
    return {"scenario": scn.name, "seed": scn.seed}


COMMANDS = {"run": _run, "compare": _compare, "bench-map": _bench}


def main(argv=None) -> int:
    ns = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        ns.out.mkdir(parents=True, exist_ok=True)
        info = COMMANDS[ns.command](ns)
        args = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(ns).items()}
        write_manifest(ns.out, ns.command, args, {"run": info})
    except ConfigError as exc:
        print(f"aerocine: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to one exit code
        log.debug("failure", exc_info=True)
        print(f"aerocine: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
