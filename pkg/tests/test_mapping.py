import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import ndtr

from dppo.mapping import (VAR_FLOOR, ElevationMap, PointMeasurement, SensorModel, integrate_point_cloud,
                          kalman_update_cell, sample_map_scan_dots, scan_into_map_batch, simulate_depth_scan)
from dppo.terrain import GridGeometry, TerrainKind, TerrainParams, TerrainSpec, generate_heightmap, true_scan_dots

GEOM = GridGeometry(80, 80, 0.05, (0.0, -2.0))


def truth(kind="flat", **kw):
    return generate_heightmap(TerrainSpec(TerrainKind(kind), TerrainParams(**kw), 0, GEOM))


def test_kalman_equal_variances():
    assert kalman_update_cell(0.0, 1.0, 2.0, 1.0) == (1.0, 0.5)


def test_kalman_hand_evaluation():
    h, v = kalman_update_cell(1.0, 0.25, 3.0, 0.75)
    assert h == pytest.approx(1.5, abs=1e-15)
    assert v == pytest.approx(0.1875, abs=1e-15)


def test_kalman_uninformative_measurement():
    h, v = kalman_update_cell(0.3, 0.2, 5.0, 1e12)
    assert h == pytest.approx(0.3, abs=1e-10)
    assert v == pytest.approx(0.2, rel=1e-10)


def test_kalman_exact_measurement():
    assert kalman_update_cell(0.3, 0.2, 5.0, 0.0) == (5.0, VAR_FLOOR)


@settings(max_examples=300, deadline=None)
@given(h=st.floats(-5, 5), vm=st.floats(1e-6, 10), z=st.floats(-5, 5), vp=st.floats(1e-6, 10))
def test_kalman_convex_and_variance_shrinks(h, vm, z, vp):
    h2, v2 = kalman_update_cell(h, vm, z, vp)
    w = vm / (vm + vp)
    assert 0.0 <= w <= 1.0
    assert min(h, z) - 1e-12 <= h2 <= max(h, z) + 1e-12
    assert h2 == pytest.approx((1 - w) * h + w * z, abs=1e-12)
    assert v2 < vm
    assert v2 <= min(vm, vp)


@pytest.mark.parametrize("n", [1, 2, 3, 7, 50, 200])
def test_n_equal_variance_updates(n):
    vp = 0.04
    h, v = 0.0, vp  # the first reading initializes the cell
    for _ in range(n - 1):
        h, v = kalman_update_cell(h, v, 1.0, vp)
    assert v == pytest.approx(vp / n, rel=1e-12)


def test_order_invariance_equal_variance():
    rng = np.random.default_rng(0)
    z = rng.normal(size=30)
    def fuse(zs):
        h, v = zs[0], 0.1
        for x in zs[1:]:
            h, v = kalman_update_cell(h, v, x, 0.1)
        return h
    base = fuse(z)
    for _ in range(5):
        assert abs(fuse(rng.permutation(z)) - base) < 1e-9
    assert base == pytest.approx(z.mean(), abs=1e-12)


def test_estimate_error_matches_posterior_std():
    # after n equal-variance readings the estimate is the sample mean, so the
    # error is N(0, sigma_p^2 / n) and the reported variance should say so
    n, vp, errs = 200, 0.04, []
    for seed in range(400):
        rng = np.random.default_rng(seed)
        z = 0.37 + np.sqrt(vp) * rng.standard_normal(n)
        h, v = z[0], vp
        for x in z[1:]:
            h, v = kalman_update_cell(h, v, x, vp)
        errs.append(h - 0.37)
    errs = np.array(errs)
    assert v == pytest.approx(vp / n, rel=1e-12)
    assert np.std(errs) == pytest.approx(np.sqrt(vp / n), rel=0.1)
    frac = np.mean(np.abs(errs) < 0.02)
    expect = 2 * ndtr(0.02 / np.sqrt(vp / n)) - 1  # about 0.843
    assert abs(frac - expect) < 0.06


def test_scan_noiseless_hits_truth():
    t = truth("stairs", rise=0.1, run=0.3, start=1.5)
    pts = simulate_depth_scan(t, (1.0, 0.0, 1.4, 0.0), SensorModel(alpha_d=0.0), np.random.default_rng(0))
    assert len(pts) > 0
    from dppo.terrain import height_at
    for p in pts:
        assert p.p_z == height_at(t, p.x, p.y)
        assert p.d <= 3.0


def test_scan_zero_distance_has_no_noise():
    t = truth()
    pts = simulate_depth_scan(t, (1.0, 0.0, 0.0, 0.0), SensorModel(alpha_d=0.5), np.random.default_rng(1),
                              footprints=(np.zeros(4), np.zeros(4)))
    assert [p.p_z for p in pts] == [0.0] * 4
    assert [p.d for p in pts] == [0.0] * 4


def test_scan_noise_std_monte_carlo():
    # flat ground, every ray at distance 2 (sensor 2 m above its footprint)
    t = truth()
    model = SensorModel(alpha_d=0.01)
    rng = np.random.default_rng(2)
    zs = []
    fp = (np.zeros(100), np.zeros(100))
    for _ in range(100):
        zs += [p.p_z for p in simulate_depth_scan(t, (1.0, 0.0, 2.0, 0.0), model, rng, footprints=fp)]
    assert len(zs) == 10_000
    assert np.std(zs) == pytest.approx(0.2, rel=0.05)


def test_scan_deterministic_and_range_limited():
    t = truth()
    m = SensorModel(max_range=1.5)
    a = simulate_depth_scan(t, (1.0, 0.0, 0.8, 0.2), m, np.random.default_rng(5))
    b = simulate_depth_scan(t, (1.0, 0.0, 0.8, 0.2), m, np.random.default_rng(5))
    assert a == b
    assert all(p.d <= 1.5 for p in a)
    assert len(a) < m.rays_per_scan


def test_integrate_empty_and_first_observation():
    emap = ElevationMap.empty(GEOM)
    same = integrate_point_cloud(emap, [], SensorModel())
    np.testing.assert_array_equal(same.h, emap.h)
    model = SensorModel(alpha_d=0.01)
    out = integrate_point_cloud(emap, [PointMeasurement(1.0, 0.0, 0.3, 2.0)], model)
    i, j = 40, 20
    assert out.h[i, j] == 0.3 and out.var[i, j] == pytest.approx(0.04) and out.observed[i, j]
    assert out.observed.sum() == 1
    assert not emap.observed.any()  # input map untouched


def test_integrate_two_equal_variance_points():
    model = SensorModel(alpha_d=0.01)
    pts = [PointMeasurement(1.0, 0.0, 0.2, 1.0), PointMeasurement(1.01, 0.01, 0.6, 1.0)]
    out = integrate_point_cloud(ElevationMap.empty(GEOM), pts, model)
    assert out.h[40, 20] == pytest.approx(0.4, abs=1e-15)
    assert out.var[40, 20] == pytest.approx(0.005, rel=1e-12)


def test_batched_fusion_matches_sequential_reference():
    rng = np.random.default_rng(3)
    model = SensorModel(alpha_d=0.01)
    pts = [PointMeasurement(float(x), float(y), float(z), float(d))
           for x, y, z, d in zip(rng.uniform(0.9, 1.1, 200), rng.uniform(-0.1, 0.1, 200),
                                 rng.normal(size=200), rng.uniform(0.5, 3, 200))]
    out = integrate_point_cloud(ElevationMap.empty(GEOM), pts, model)
    h = np.zeros((80, 80))
    v = np.ones((80, 80))
    seen = np.zeros((80, 80), bool)
    for p in pts:
        i = int(np.rint((p.y + 2.0) / 0.05))
        j = int(np.rint(p.x / 0.05))
        vp = model.alpha_d * p.d**2
        if not seen[i, j]:
            h[i, j], v[i, j], seen[i, j] = p.p_z, vp, True
        else:
            h[i, j], v[i, j] = kalman_update_cell(h[i, j], v[i, j], p.p_z, vp)
    np.testing.assert_array_equal(out.h, h)
    np.testing.assert_array_equal(out.var, v)
    np.testing.assert_array_equal(out.observed, seen)


def test_unobserved_cells_keep_prior():
    emap = ElevationMap.empty(GEOM, prior_height=0.0, prior_var=1.0)
    scan_into_map_batch_one(emap)
    un = ~emap.observed
    assert un.any()
    assert np.all(emap.h[un] == 0.0) and np.all(emap.var[un] == 1.0)
    assert np.all(emap.var[emap.observed] > 0)


def scan_into_map_batch_one(emap):
    t = truth()
    b = ElevationMap(emap.geometry, emap.h[None], emap.var[None], emap.observed[None])
    scan_into_map_batch(b, t.heights[None], GEOM, np.array([1.0]), np.array([0.0]), np.array([0.9]),
                        np.array([0.0]), SensorModel(), [np.random.default_rng(0)])
    emap.h, emap.var, emap.observed = b.h[0], b.var[0], b.observed[0]


def test_map_equal_truth_gives_true_scan_bit_exact():
    t = truth("stairs", rise=0.1, run=0.3, start=1.2)
    emap = ElevationMap(GEOM, t.heights.copy(), np.full(t.heights.shape, 0.01), np.ones(t.heights.shape, bool))
    pose = (1.0, 0.1, 0.4, 0.9)
    a = sample_map_scan_dots(emap, pose, 0.1, 0.0, np.random.default_rng(0))
    b = true_scan_dots(t, pose, 0.1)
    np.testing.assert_array_equal(a.values, b.values)


def test_unobserved_map_reads_prior():
    emap = ElevationMap.empty(GEOM, prior_height=0.0)
    s = sample_map_scan_dots(emap, (1.0, 0.0, 0.0, 0.9), 0.1, 0.0, np.random.default_rng(0))
    assert np.all(s.values == -0.9)


def test_grid_noise_std_monte_carlo():
    t = truth()
    emap = ElevationMap(GEOM, t.heights.copy(), np.full(t.heights.shape, 1e-6), np.ones(t.heights.shape, bool))
    rng = np.random.default_rng(4)
    clean = true_scan_dots(t, (1.0, 0.0, 0.0, 0.9)).values
    diffs = np.concatenate([sample_map_scan_dots(emap, (1.0, 0.0, 0.0, 0.9), 0.1, 0.05, rng).values - clean
                            for _ in range(227)])
    assert diffs.size >= 100_000
    assert np.std(diffs) == pytest.approx(0.05, rel=0.05)


def test_fused_map_is_calibrated_on_static_terrain():
    t = truth()
    g = GridGeometry(40, 40, 0.1, (0.0, -2.0))
    emap = ElevationMap.empty(g, batch=1)
    rngs = [np.random.default_rng(7)]
    for _ in range(40):
        scan_into_map_batch(emap, t.heights[None], GEOM, np.array([1.0]), np.array([0.0]), np.array([0.9]),
                            np.array([0.0]), SensorModel(), rngs)
    m = emap.observed[0]
    assert m.sum() > 300
    z = emap.h[0][m] / np.sqrt(emap.var[0][m])
    assert abs(z.mean()) < 0.15
    assert np.std(z) == pytest.approx(1.0, rel=0.1)
