import math
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aerocine.errors import ConfigError, OutOfBoundsError
from aerocine.itsdt import (
    FieldView, SdfConfig, SignedDistanceField, apply_changes, ball_offsets, batch_recompute,
    border_mask, gradient_at, signed_distance_at,
)
from aerocine.voxel_world import ChangeSet, GridConfig, OccupancyGrid, integrate_scan
from map_cases import random_scans
from oracles import brute_border, brute_distance

TRUNC = SdfConfig(truncation=5.0)


def free_grid(n, res=1.0):
    cfg = GridConfig(dims=(n, n, n), resolution=res)
    return OccupancyGrid(cfg, np.zeros(cfg.dims, dtype=np.uint8))


def set_cell(grid, v, value):
    """Write a cell and report it the way an integration would."""
    before = grid.classify(v)
    grid.cells[v] = value
    after = grid.classify(v)
    arr = np.array([v], dtype=np.int64)
    if before == after:
        return ChangeSet()
    kind = {0: "became_free", 1: "became_occupied", 2: "became_unknown"}[int(after)]
    return ChangeSet(**{kind: arr})


def assert_same_field(a: SignedDistanceField, b: SignedDistanceField, grid):
    np.testing.assert_array_equal(a.border, b.border)
    np.testing.assert_allclose(a.distance, b.distance, rtol=0, atol=1e-9)
    np.testing.assert_array_equal(np.sign(a.signed(grid)), np.sign(b.signed(grid)))


def test_empty_changeset_is_noop(backend):
    g = free_grid(9)
    sdf = batch_recompute(g, TRUNC)
    before = sdf.copy()
    assert apply_changes(sdf, g, ChangeSet()) == 0
    assert_same_field(sdf, before, g)


def test_single_border_in_free_grid(backend):
    g = free_grid(21)
    sdf = SignedDistanceField(g.config, TRUNC)
    n = apply_changes(sdf, g, set_cell(g, (10, 10, 10), 255))
    assert n > 0
    assert sdf.distance[10, 10, 10] == 0.0
    for off in [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]:
        assert sdf.distance[tuple(np.add((10, 10, 10), off))] == 1.0
    assert sdf.distance[11, 11, 10] == pytest.approx(math.sqrt(2), abs=1e-12)
    assert sdf.distance[10, 10, 18] == 5.0
    assert sdf.distance[0, 0, 0] == 5.0
    np.testing.assert_allclose(sdf.distance, brute_distance(sdf.border.astype(bool), 1.0, 5.0), atol=1e-12)


def test_insert_then_remove_restores_field(backend):
    g = free_grid(15)
    sdf = batch_recompute(g, TRUNC)
    initial = sdf.copy()
    apply_changes(sdf, g, set_cell(g, (7, 7, 7), 255))
    apply_changes(sdf, g, set_cell(g, (7, 7, 7), 0))
    assert_same_field(sdf, initial, g)
    assert_same_field(sdf, batch_recompute(g, TRUNC), g)


def test_fresh_map_reads_minus_truncation():
    g = OccupancyGrid(GridConfig(dims=(8, 8, 8)))
    sdf = batch_recompute(g, TRUNC)
    assert len(sdf.border_set) == 0
    assert np.all(sdf.distance == 5.0)
    assert np.all(sdf.signed(g) == -5.0)
    assert signed_distance_at(sdf, g, (3.3, 4.1, 2.9)) == -5.0


def test_voxel_centre_query_three_metres_from_border():
    g = free_grid(16)
    g.cells[4, 8, 8] = 255
    sdf = batch_recompute(g, TRUNC)
    assert signed_distance_at(sdf, g, g.config.center((7, 8, 8))) == pytest.approx(3.0, abs=1e-12)


def test_midpoint_interpolation():
    g = free_grid(12)
    sdf = SignedDistanceField(g.config, TRUNC)
    sdf.distance[:] = 3.0
    sdf.distance[4, 5, 5] = 2.0
    p = (g.config.center((4, 5, 5)) + g.config.center((5, 5, 5))) / 2
    assert signed_distance_at(sdf, g, p) == pytest.approx(2.5, abs=1e-12)


def test_query_outside_raises():
    g = free_grid(6)
    sdf = batch_recompute(g, TRUNC)
    with pytest.raises(OutOfBoundsError):
        signed_distance_at(sdf, g, (7.0, 1.0, 1.0))
    with pytest.raises(OutOfBoundsError):
        gradient_at(sdf, g, (-0.1, 1.0, 1.0))


def test_uniform_field_has_zero_gradient():
    g = OccupancyGrid(GridConfig(dims=(8, 8, 8)))
    sdf = batch_recompute(g, TRUNC)
    grad = gradient_at(sdf, g, (4.2, 3.3, 4.9))
    np.testing.assert_array_equal(grad.vector, np.zeros(3))


def test_point_source_gradient_points_away():
    g = free_grid(20)
    g.cells[8, 10, 10] = 255
    sdf = batch_recompute(g, TRUNC)
    p = g.config.center((10, 10, 10))
    grad = gradient_at(sdf, g, p)
    np.testing.assert_allclose(grad.vector, [1.0, 0.0, 0.0], atol=0.1)
    assert not grad.one_sided


def test_gradient_matches_finite_differences_of_value():
    g = free_grid(20)
    g.cells[6, 9, 11] = 255
    g.cells[13, 12, 7] = 255
    sdf = batch_recompute(g, TRUNC)
    rng = np.random.default_rng(2)
    h = 0.5
    for p in rng.uniform(2, 18, (100, 3)):
        fd = [(signed_distance_at(sdf, g, p + e) - signed_distance_at(sdf, g, p - e)) / (2 * h)
              for e in np.eye(3) * h]
        np.testing.assert_allclose(gradient_at(sdf, g, p).vector, fd, atol=1e-12)


def test_fieldview_gradient_is_exact_derivative():
    g = free_grid(20)
    g.cells[6, 9, 11] = 255
    view = batch_recompute(g, TRUNC).snapshot(g)
    rng = np.random.default_rng(4)
    pts = rng.uniform(1.5, 18.5, (200, 3))
    _, grads = view.sample(pts)
    h = 1e-6
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        fd = (view.value(pts + e) - view.value(pts - e)) / (2 * h)
        # kinks between cells make a few samples one-sided; the bulk must agree
        assert np.mean(np.abs(fd - grads[:, j]) < 1e-6) > 0.97


def test_fieldview_outside_reads_minus_truncation():
    g = free_grid(6)
    view = batch_recompute(g, TRUNC).snapshot(g)
    v, gr = view.sample([[-1.0, 2.0, 2.0], [3.0, 3.0, 3.0]])
    assert v[0] == -5.0 and np.all(gr[0] == 0)
    assert v[1] == 5.0


def test_one_occupied_voxel_border_set():
    n = 9
    cfg = GridConfig(dims=(n, n, n))
    cells = np.full(cfg.dims, 127, dtype=np.uint8)
    cells[2:7, 2:7, 2:7] = 0
    cells[4, 4, 4] = 255
    g = OccupancyGrid(cfg, cells)
    sdf = batch_recompute(g, TRUNC)
    expected = brute_border(g.free_mask(), g.occupied_mask())
    np.testing.assert_array_equal(sdf.border.astype(bool), expected)
    assert expected[4, 4, 4] and expected[1, 4, 4] and not expected[0, 4, 4]
    np.testing.assert_allclose(sdf.distance, brute_distance(expected, 1.0, 5.0), atol=1e-12)


@pytest.mark.parametrize("seed", range(6))
def test_batch_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    cfg = GridConfig(dims=(12, 11, 10), resolution=0.5)
    g = OccupancyGrid(cfg, rng.choice(np.array([0, 60, 127, 200, 255], dtype=np.uint8), cfg.dims,
                                      p=[0.55, 0.1, 0.2, 0.05, 0.1]))
    sdf = batch_recompute(g, SdfConfig(truncation=2.0))
    border = brute_border(g.free_mask(), g.occupied_mask())
    np.testing.assert_array_equal(sdf.border.astype(bool), border)
    np.testing.assert_allclose(sdf.distance, brute_distance(border, 0.5, 2.0), atol=1e-12)
    assert sdf.distance.max() <= 2.0


@pytest.mark.parametrize("seed", range(8))
def test_incremental_equals_batch_after_scans(backend, seed):
    cfg, scans = random_scans(seed)
    g = OccupancyGrid(cfg)
    sdf = SignedDistanceField(cfg, TRUNC)
    for scan in scans:
        apply_changes(sdf, g, integrate_scan(g, scan))
        assert_same_field(sdf, batch_recompute(g, TRUNC), g)


def test_backends_agree_on_field(tmp_path):
    from aerocine import kernels
    if len(kernels.available()) < 2:
        pytest.skip("compiled backend not built")
    cfg, scans = random_scans(99, scans=4)
    fields = []
    for name in ("native", "python"):
        with kernels.using(name):
            g = OccupancyGrid(cfg)
            sdf = SignedDistanceField(cfg, TRUNC)
            for scan in scans:
                apply_changes(sdf, g, integrate_scan(g, scan))
            fields.append((g.cells.copy(), sdf))
    np.testing.assert_array_equal(fields[0][0], fields[1][0])
    np.testing.assert_array_equal(fields[0][1].distance, fields[1][1].distance)
    np.testing.assert_array_equal(fields[0][1].nearest, fields[1][1].nearest)


@given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 9), st.integers(0, 9),
                          st.sampled_from([0, 127, 255])), min_size=1, max_size=25))
def test_sign_rule_and_truncation(edits):
    g = free_grid(10)
    sdf = batch_recompute(g, TRUNC)
    for x, y, z, value in edits:
        apply_changes(sdf, g, set_cell(g, (x, y, z), value))
    signed = sdf.signed(g)
    assert np.all((signed > 0) == (g.free_mask() & (sdf.distance > 0)))
    assert np.all(signed[~g.free_mask()] <= 0)
    assert sdf.distance.max() <= TRUNC.truncation
    assert_same_field(sdf, batch_recompute(g, TRUNC), g)


def test_ball_offsets_sorted_and_bounded():
    off, dist, r2 = ball_offsets(3.0, 1.0)
    assert r2 == 9
    assert np.all(np.diff(dist) >= 0)
    assert dist[0] == 0 and dist[-1] == 3.0
    assert len(off) == sum(1 for x in range(-3, 4) for y in range(-3, 4) for z in range(-3, 4)
                           if x * x + y * y + z * z <= 9)


def test_truncation_below_two_voxels_rejected():
    with pytest.raises(ConfigError):
        SignedDistanceField(GridConfig(dims=(4, 4, 4), resolution=1.0), SdfConfig(truncation=1.5))


def test_border_mask_six_connected():
    cfg = GridConfig(dims=(3, 3, 3))
    cells = np.full(cfg.dims, 127, dtype=np.uint8)
    cells[1, 1, 1] = 0
    m = border_mask(OccupancyGrid(cfg, cells))
    assert m.sum() == 6 and not m[0, 0, 0] and m[0, 1, 1]


def test_fieldview_save_load(tmp_path):
    g = free_grid(7)
    g.cells[3, 3, 3] = 255
    view = batch_recompute(g, TRUNC).snapshot(g)
    back = FieldView.load(view.save(tmp_path / "f.bin"), 5.0)
    np.testing.assert_allclose(back.signed, view.signed, atol=1e-6)
    assert back.origin == view.origin


def test_incremental_cheaper_than_batch_after_warmup():
    """Over a 60 s flight at 5 Hz the incremental updates after 10 s beat batch rebuilds."""
    from aerocine.scenario import load_scenario
    from aerocine.sim import SensorPose, simulate_scan

    scn = load_scenario("open-field")
    g = OccupancyGrid(scn.grid)
    sdf = SignedDistanceField(scn.grid, scn.sdf)
    inc = batch = 0.0
    for k in range(300):
        t = k * 0.2
        x = -8.0 + 30.0 * k / 300
        scan = simulate_scan(scn.world, SensorPose((x, 8.0, 4.0), -math.pi / 2, t), scn.lidar)
        t0 = time.perf_counter()
        apply_changes(sdf, g, integrate_scan(g, scan))
        t1 = time.perf_counter()
        if t >= 10.0:
            inc += t1 - t0
            b0 = time.perf_counter()
            batch_recompute(g, scn.sdf)
            batch += time.perf_counter() - b0
    assert inc < batch
