import numpy as np
import pytest
from scipy.spatial import cKDTree

from rectilab.errors import BudgetExceeded
from rectilab.setmodels import (
    CurveSpec,
    IFSSpec,
    Similarity,
    WeightedCloud,
    circle_polyline,
    discretize_curve,
    empty_cloud,
    four_corner_ifs,
    generate_prefractal,
    mix,
    read_cloud_csv,
    segment_polyline,
    write_cloud_csv,
)


def test_four_corner_depth1_points_and_weights():
    cloud = generate_prefractal(four_corner_ifs(), 1)
    got = sorted(map(tuple, cloud.points))
    assert got == [(0.125, 0.125), (0.125, 0.875), (0.875, 0.125), (0.875, 0.875)]
    assert np.allclose(cloud.weights, 0.25)
    assert (cloud.part == "U").all()


def test_depth_zero_is_single_unit_point():
    cloud = generate_prefractal(four_corner_ifs(), 0)
    assert len(cloud) == 1
    assert cloud.total_weight == 1.0


def test_depth3_pairwise_separation():
    cloud = generate_prefractal(four_corner_ifs(), 3)
    assert len(cloud) == 64
    d = np.linalg.norm(cloud.points[:, None, :] - cloud.points[None, :, :], axis=2)
    d[np.arange(64), np.arange(64)] = np.inf
    # Brute-force check over all pairs.
    assert d.min() >= 2 * 4.0**-3


@pytest.mark.parametrize("depth", [0, 1, 2, 4, 6])
def test_weight_sum_is_one_when_ratios_sum_to_one(depth):
    cloud = generate_prefractal(four_corner_ifs(), depth)
    assert cloud.total_weight == pytest.approx(1.0, abs=1e-12)


def test_depth_monotonicity_hausdorff_distance():
    spec = four_corner_ifs()
    _, hull_r = spec.hull_ball()
    diam = 2 * hull_r
    for k in (2, 3, 4):
        a = generate_prefractal(spec, k)
        b = generate_prefractal(spec, k + 1)
        d_ab = cKDTree(b.points).query(a.points)[0].max()
        d_ba = cKDTree(a.points).query(b.points)[0].max()
        assert max(d_ab, d_ba) <= diam * 0.25**k + 1e-12


def test_word_budget_refusal():
    with pytest.raises(BudgetExceeded):
        generate_prefractal(four_corner_ifs(), 11)


def test_segment_discretization_quarter_step():
    cloud = discretize_curve(segment_polyline(), 0.25)
    assert len(cloud) == 5
    assert cloud.total_weight == pytest.approx(1.0, abs=1e-15)
    assert (cloud.part == "R").all()


def test_circle_total_weight_matches_chord_sum():
    curve = circle_polyline((0.0, 0.0), 1.0, 360)
    cloud = discretize_curve(curve, 0.01)
    chord_sum = 2 * 360 * np.sin(np.pi / 360)
    assert cloud.total_weight == pytest.approx(chord_sum, abs=1e-12)
    assert abs(cloud.total_weight - 2 * np.pi) < 1e-3


def test_curve_convergence_to_length():
    for step, tol in ((0.1, 0.02), (0.01, 2e-4)):
        cloud = discretize_curve(circle_polyline((0.0, 0.0), 1.0, 2000), step)
        assert abs(cloud.total_weight - 2 * np.pi) < tol


def test_single_point_curve_is_empty():
    cloud = discretize_curve(CurveSpec(((0.3, 0.4),), m=1), 0.5)
    assert len(cloud) == 0


def test_mix_identity_and_additivity():
    seg = discretize_curve(segment_polyline(), 0.25)
    assert mix(empty_cloud(2), seg) is seg
    doubled = mix(seg, seg)
    assert doubled.total_weight == pytest.approx(2.0 * seg.total_weight, abs=1e-15)


def test_mix_corner_set_with_circle_weight():
    fractal = generate_prefractal(four_corner_ifs(), 5)
    circle = discretize_curve(circle_polyline((0.0, 0.0), 1.0, 360), 0.01)
    both = mix(fractal, circle)
    assert both.total_weight == pytest.approx(1.0 + 2 * np.pi, rel=1e-3)
    assert both.u_mask().sum() == len(fractal)
    assert both.r_mask().sum() == len(circle)


def test_mix_dimension_mismatch():
    a = WeightedCloud(np.zeros((1, 2)), [1.0], ["U"])
    b = WeightedCloud(np.zeros((1, 3)), [1.0], ["R"])
    with pytest.raises(ValueError):
        mix(a, b)


def test_cloud_invariants():
    with pytest.raises(ValueError):
        WeightedCloud(np.zeros((2, 2)), [1.0, 0.0], ["U", "R"])
    with pytest.raises(ValueError):
        WeightedCloud(np.zeros((1, 2)), [1.0], ["X"])


def test_cloud_csv_roundtrip(tmp_path):
    cloud = mix(
        generate_prefractal(four_corner_ifs(), 2),
        discretize_curve(segment_polyline(), 0.25),
    )
    path = tmp_path / "cloud.csv"
    write_cloud_csv(cloud, path)
    back = read_cloud_csv(path)
    assert np.array_equal(back.points, cloud.points)
    assert np.array_equal(back.weights, cloud.weights)
    assert np.array_equal(back.part, cloud.part)


def test_flat_patch_weights_sum_to_area():
    grid = tuple(
        tuple((x, y, 0.0) for y in np.linspace(0, 1, 21)) for x in np.linspace(0, 1, 21)
    )
    cloud = discretize_curve(CurveSpec(grid=grid, m=2), 0.05)
    assert cloud.total_weight == pytest.approx(1.0, rel=0.02)


def test_ifs_hull_ball_fixed_points():
    spec = four_corner_ifs()
    c, r = spec.hull_ball()
    assert np.allclose(c, [0.5, 0.5])
    assert r == pytest.approx(np.sqrt(0.5), rel=1e-12)
