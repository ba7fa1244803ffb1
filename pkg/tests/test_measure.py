import math

import numpy as np
import pytest

from rectilab.errors import ResolutionLimit, SelectionFailure
from rectilab.measure import density, find_ball_system, measure_at_scale
from rectilab.setmodels import (
    WeightedCloud,
    discretize_curve,
    empty_cloud,
    four_corner_ifs,
    generate_prefractal,
    segment_polyline,
)


def test_empty_cloud_measures_zero():
    est = measure_at_scale(empty_cloud(2), 1, 0.1)
    assert est.value == 0.0
    assert est.bracket == (0.0, 0.0)


def test_segment_measure_brackets(fine_segment):
    est = measure_at_scale(fine_segment, 1, 0.01)
    assert 1.0 <= est.value <= math.sqrt(2) * 1.1
    # Oracle: exact occupied-cell count of the axis-aligned segment.
    h = 2.0**-est.level
    count = len(np.unique(np.floor(fine_segment.points / h).astype(np.int64), axis=0))
    assert est.value == count * h * math.sqrt(2)
    assert est.bracket[0] <= est.value <= est.bracket[1]


def test_four_corner_measure_at_natural_scale(four_corner_depth6):
    est = measure_at_scale(four_corner_depth6, 1, 4.0**-5)
    assert 0.5 <= est.value <= 2.0
    # Oracle: brute-force dyadic cover of the centers at level 10.
    idx = np.unique(np.floor(four_corner_depth6.points / 2.0**-10).astype(np.int64), axis=0)
    assert est.value == len(idx) * 2.0**-10 * math.sqrt(2)
    # Natural cover: 4^5 squares of side 4^-5 giving sum diam = sqrt(2).
    assert est.value == pytest.approx(math.sqrt(2), rel=1e-12)


def test_measure_monotone_in_cloud(four_corner_depth6):
    half = four_corner_depth6.select(np.arange(len(four_corner_depth6)) % 2 == 0)
    est_half = measure_at_scale(half, 1, 4.0**-4)
    est_full = measure_at_scale(four_corner_depth6, 1, 4.0**-4)
    assert est_half.value <= est_full.value


def test_dyadic_value_dominates_weight_sum_on_affine_sets(fine_segment):
    for delta in (1e-2, 1e-3):
        est = measure_at_scale(fine_segment, 1, delta)
        assert est.value >= fine_segment.total_weight / math.sqrt(2)


def test_scale_refusal():
    cloud = WeightedCloud(np.zeros((1, 2)), [1.0], ["U"])
    with pytest.raises(ResolutionLimit):
        measure_at_scale(cloud, 1, 1e-16)


def test_density_interior_and_endpoint(fine_segment):
    assert density(fine_segment, (0.5, 0.0), 1, 0.01) == pytest.approx(1.0, abs=0.02)
    assert density(fine_segment, (0.0, 0.0), 1, 0.01) == pytest.approx(0.5, abs=0.02)


def test_density_four_corner_bracket(four_corner_depth8):
    p = four_corner_depth8.points[137]
    val = density(four_corner_depth8, p, 1.0, 4.0**-4)
    assert 0.25 <= val <= 4.0


def test_ball_system_four_corner(four_corner_depth7):
    system = find_ball_system(four_corner_depth7, 0.1, m=1)
    assert system.all_ok()
    pts, wts = four_corner_depth7.points, four_corner_depth7.weights
    # Independent re-evaluation of every stored inequality by a direct
    # membership pass (no trees, no shared code paths).
    covered = np.zeros(len(pts), dtype=bool)
    for k, (c, r) in enumerate(zip(system.centers, system.radii)):
        d = np.sqrt(((pts - c[None, :]) ** 2).sum(axis=1))
        inside = d <= r
        covered |= inside
        assert wts[inside].sum() > r**1 / 2.0  # mass lower bound
        # remainder bound: the cloud is all U, so the lhs is zero
        assert 0.0 < system.delta * r**1
    assert wts[~covered].sum() < 0.1  # residual
    # padded disjointness
    for a in range(len(system.radii)):
        for b in range(a + 1, min(a + 40, len(system.radii))):
            gap = np.linalg.norm(system.centers[a] - system.centers[b])
            assert gap > system.radii[a] + system.radii[b] + 2 * system.eta


def test_ball_system_annulus_inequality(four_corner_depth7):
    system = find_ball_system(four_corner_depth7, 0.1, m=1)
    pts, wts = four_corner_depth7.points, four_corner_depth7.weights
    total = 0.0
    for c, r in zip(system.centers, system.radii):
        d = np.sqrt(((pts - c[None, :]) ** 2).sum(axis=1))
        total += wts[(d > r) & (d <= r + system.eta)].sum()
    assert total < 0.1
    assert total == pytest.approx(system.inequalities["upper3_annulus"]["lhs"], abs=1e-12)


def test_ball_system_refuses_empty_u(fine_segment):
    with pytest.raises(SelectionFailure):
        find_ball_system(fine_segment, 0.1)


def test_single_point_system():
    w = 0.1
    cloud = WeightedCloud(np.array([[0.3, 0.4]]), [w], ["U"])
    system = find_ball_system(cloud, 0.05, m=1)
    assert len(system) == 1
    assert np.allclose(system.centers[0], [0.3, 0.4])
    r = system.radii[0]
    assert r**1 / 2.0 < w  # the mass lower bound pins r < 2w
    assert r < 2 * w
    # greedy takes the largest admissible power of 1/4
    assert 4.0 * r >= 2 * w or 4.0 * r > 1.0


def test_ball_system_respects_radius_cap(four_corner_depth6):
    system = find_ball_system(four_corner_depth6, 0.1, m=1, r_max=4.0**-5)
    assert system.r_max <= 4.0**-5


def test_ball_system_remainder_bound_with_mixed_cloud(four_corner_depth6):
    # Attach remainder mass far away; upper1 must still hold per ball.
    far = WeightedCloud(np.array([[10.0, 10.0]]), [5.0], ["R"])
    from rectilab.setmodels import mix

    both = mix(four_corner_depth6, far)
    system = find_ball_system(both, 0.1, m=1)
    rec = system.inequalities["upper1_remainder_mass"]
    lhs = np.asarray(rec["lhs"])
    rhs = np.asarray(rec["rhs"])
    assert (lhs < rhs).all()


def test_ball_system_json(four_corner_depth6):
    system = find_ball_system(four_corner_depth6, 0.2, m=1)
    doc = system.to_json()
    assert doc["eta"] == system.eta
    assert set(doc["inequalities"]) == set(system.inequalities)
    for rec in doc["inequalities"].values():
        assert "ok" in rec
