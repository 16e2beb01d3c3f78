import math

import pytest

from aerocine.errors import ConfigError, ScenarioError
from aerocine.scenario import BUNDLED, bundled_path, load_scenario
from aerocine.sim import CirclePath, PolylinePath

MINIMAL = """\
name = "tiny"
seed = 3
duration = 4.0

[grid]
dims = [16, 16, 8]
resolution = 1.0
origin = [-8.0, -8.0, -1.0]

[world]
ground_z = 0.0

[[world.box]]
lo = [2.0, 2.0, 0.0]
hi = [3.0, 3.0, 2.0]

[actor]
kind = "person"
path = "polyline"
points = [[0.0, 0.0, 0.0], [4.0, 0.0, 0.0]]
speed = 1.0

[shot]
rho = 4.0
"""


@pytest.mark.parametrize("name", BUNDLED)
def test_bundled_scenarios_load(name):
    scn = load_scenario(name)
    assert scn.name == name
    assert scn.n_cycles == round(scn.duration * scn.replan_hz)
    assert scn.planner.lambda3 == 2.0
    lo, hi = scn.world.bounds
    for ob in scn.world.obstacles:
        olo, ohi = ob.bounds
        assert all(a >= b - 1e-9 for a, b in zip(olo, lo))
        assert all(a <= b + 1e-9 for a, b in zip(ohi, hi))


def test_corridor_contents():
    scn = load_scenario("corridor")
    assert scn.duration == 140.0 and scn.n_cycles == 700
    assert scn.shot.rho == 8.0
    assert scn.shot.phi_rel == pytest.approx(math.pi / 2)
    assert isinstance(scn.actor.path, PolylinePath)


def test_orbit_is_a_circle():
    assert isinstance(load_scenario("orbit").actor.path, CirclePath)


def test_open_field_path_length():
    assert load_scenario("open-field").actor.path.length == pytest.approx(40.6)


def test_seed_override():
    assert load_scenario("corridor", seed=99).seed == 99


def test_minimal_file(tmp_path):
    p = tmp_path / "tiny.toml"
    p.write_text(MINIMAL)
    scn = load_scenario(p)
    assert scn.seed == 3 and scn.grid.dims == (16, 16, 8)
    assert len(scn.world.obstacles) == 1
    assert scn.source == p


def test_bundled_path_exists():
    for name in BUNDLED:
        assert bundled_path(name).is_file()


def test_unknown_scenario():
    with pytest.raises(ConfigError, match="not found"):
        load_scenario("no-such-scenario")


def broken(tmp_path, old, new):
    assert old in MINIMAL
    p = tmp_path / "bad.toml"
    p.write_text(MINIMAL.replace(old, new))
    with pytest.raises(ScenarioError) as info:
        load_scenario(p)
    return info.value, MINIMAL.replace(old, new).splitlines()


def test_bad_value_reports_line_and_field(tmp_path):
    err, lines = broken(tmp_path, "rho = 4.0", 'rho = "far"')
    assert err.field == "shot.rho"
    assert lines[err.line - 1].startswith("rho")
    assert "line" in str(err) and "shot.rho" in str(err)


def test_bad_vector_shape(tmp_path):
    err, lines = broken(tmp_path, "dims = [16, 16, 8]", "dims = [16, 16]")
    assert err.field == "grid.dims"
    assert lines[err.line - 1].startswith("dims")


def test_missing_section(tmp_path):
    err, _ = broken(tmp_path, "[shot]\nrho = 4.0\n", "")
    assert "shot" in str(err)


def test_syntax_error_line(tmp_path):
    err, lines = broken(tmp_path, "[world]", "[world")
    assert lines[err.line - 1] == "[world"


def test_semantic_error_is_scenario_error(tmp_path):
    err, _ = broken(tmp_path, "rho = 4.0", "rho = -4.0")
    assert "rho" in str(err)


def test_unknown_actor_kind(tmp_path):
    err, _ = broken(tmp_path, 'kind = "person"', 'kind = "horse"')
    assert "horse" in str(err)
