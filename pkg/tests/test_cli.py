import hashlib
import json
import subprocess
import sys

import pytest

from aerocine import kernels
from aerocine.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


def test_run_writes_manifest(tmp_path):
    assert main(["run", "--scenario", "open-field", "--cycles", "3", "--out", str(tmp_path)]) == EXIT_OK
    m = manifest(tmp_path)
    assert m["command"] == "run" and m["backend"] == kernels.name()
    assert m["run"]["mode"] == "online/gt"
    listed = {f["path"]: f for f in m["files"]}
    assert "cycles.csv" in listed and "manifest.json" not in listed
    data = (tmp_path / "cycles.csv").read_bytes()
    assert listed["cycles.csv"]["sha256"] == hashlib.sha256(data).hexdigest()
    assert listed["cycles.csv"]["bytes"] == len(data)


def test_run_twice_same_csv(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["run", "--scenario", "open-field", "--mode", "gt-map", "--actor", "noisy:1",
                     "--cycles", "4", "--seed", "9", "--out", str(out)]) == EXIT_OK
    assert (a / "cycles.csv").read_bytes() == (b / "cycles.csv").read_bytes()
    assert manifest(a)["run"]["seed"] == 9


def test_compare(tmp_path):
    rc = main(["compare", "--scenario", "open-field", "--a", "gt-map/gt", "--b", "gt-map/noisy:1",
               "--cycles", "3", "--out", str(tmp_path)])
    assert rc == EXIT_OK
    s = json.loads((tmp_path / "comparison.json").read_text())
    assert s["b"] == "gt-map/noisy:1" and s["aggregates_a"]["cycles"] == 3


def test_bench_map(tmp_path):
    rc = main(["bench-map", "--scenario", "open-field", "--scans", "6", "--checkpoint-every", "2",
               "--static", "--out", str(tmp_path)])
    assert rc == EXIT_OK
    assert json.loads((tmp_path / "map_bench.json").read_text())["scans"] == 6


@pytest.mark.parametrize("argv", [
    ["run", "--scenario", "open-field", "--mode", "dream"],
    ["run", "--scenario", "open-field", "--actor", "noisy:abc"],
    ["run", "--scenario", "no-such-file.toml"],
    ["compare", "--scenario", "open-field", "--a", "online", "--b", "gt-map/psychic"],
])
def test_config_errors_exit_2(tmp_path, argv, capsys):
    assert main(argv + ["--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "configuration error" in capsys.readouterr().err


def test_bad_scenario_reports_location(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text('name = "x"\nduration = "long"\n')
    assert main(["run", "--scenario", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "line 2" in err and "duration" in err


def test_runtime_error_exit_3(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["run", "--scenario", "open-field", "--out", str(blocker / "sub")]) == EXIT_RUNTIME


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "aerocine", "run", "--scenario", "open-field",
                           "--cycles", "2", "--out", str(tmp_path), "-v"],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "open-field" in proc.stderr


def test_usage_error_exits_2():
    with pytest.raises(SystemExit) as info:
        main(["run"])
    assert info.value.code == 2
