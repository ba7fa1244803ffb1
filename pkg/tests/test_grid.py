import itertools

import numpy as np
import pytest

from rectilab.errors import BudgetExceeded, ResolutionLimit
from rectilab.grid import (
    CellComplex,
    DyadicCell,
    EverythingOracle,
    RootCube,
    faces,
    skeleton_contains,
    skeleton_distance,
    subdivide,
)
from rectilab.setmodels import PointNeighborhoodOracle

UNIT_SQUARE = RootCube((0.0, 0.0), 1.0, 2)


def full_complex(root, level):
    return subdivide(root, level, EverythingOracle())


def test_subdivide_whole_square_level0():
    assert len(full_complex(UNIT_SQUARE, 0)) == 1


def test_subdivide_whole_square_level2():
    assert len(full_complex(UNIT_SQUARE, 2)) == 16


def test_subdivide_center_point_selects_all_closed_subcubes():
    # Oracle: brute-force closed-cube membership of the single point.
    center = np.array([0.5, 0.5])

    class PointOracle:
        def __call__(self, lo, hi):
            return bool((lo <= center).all() and (center <= hi).all())

    cx = subdivide(UNIT_SQUARE, 1, PointOracle())
    assert len(cx) == 4  # the center lies on all four closed subcubes


@pytest.mark.parametrize("n", [1, 2, 3])
@pytest.mark.parametrize("j", [0, 1, 2, 3, 4, 5, 6])
def test_full_subdivision_count(n, j):
    root = RootCube((0.0,) * n, 1.0, n)
    assert len(full_complex(root, j)) == 2 ** (j * n)


def test_single_square_has_four_edges():
    cx = CellComplex(UNIT_SQUARE, 0, np.array([[0, 0]]))
    assert len(cx.face_arrays(1)[0]) == 4


def test_adjacent_squares_share_an_edge():
    cx = CellComplex(UNIT_SQUARE, 1, np.array([[0, 0], [1, 0]]))
    assert len(cx.face_arrays(1)[0]) == 7


def test_level2_vertices_match_lattice_enumeration():
    cx = full_complex(UNIT_SQUARE, 2)
    anchors, spans = cx.face_arrays(0)
    # Oracle: the 5x5 vertex lattice, enumerated directly.
    lattice = {(i, j) for i in range(5) for j in range(5)}
    assert {tuple(a) for a in anchors} == lattice
    assert len(anchors) == 25
    assert not spans.any()


@pytest.mark.parametrize("n,j", [(1, 3), (2, 2), (2, 3), (3, 1), (3, 2)])
def test_face_counts_match_brute_force(n, j):
    root = RootCube((0.0,) * n, 1.0, n)
    cx = full_complex(root, j)
    top = 1 << j
    for d in range(n + 1):
        # Brute force: enumerate every (anchor, span-set) combination.
        expected = set()
        for span_axes in itertools.combinations(range(n), d):
            spans = [ax in span_axes for ax in range(n)]
            ranges = [range(top) if s else range(top + 1) for s in spans]
            for anchor in itertools.product(*ranges):
                expected.add((anchor, tuple(spans)))
        anchors, spans_arr = cx.face_arrays(d)
        got = {(tuple(a), tuple(s)) for a, s in zip(anchors, spans_arr)}
        assert got == expected


def test_skeleton_contains_edge_point():
    cx = full_complex(UNIT_SQUARE, 1)
    assert skeleton_contains(cx, 1, (0.5, 0.3), 1e-12)


def test_skeleton_contains_rejects_non_vertex():
    cx = full_complex(UNIT_SQUARE, 1)
    assert not skeleton_contains(cx, 0, (0.3, 0.3), 1e-12)


def test_skeleton_distance_matches_exhaustive_oracle():
    cx = full_complex(UNIT_SQUARE, 3)
    rng = np.random.default_rng(11)
    pts = rng.random((50, 2))
    lo, hi = cx.face_boxes(1)

    def oracle(p):
        clamped = np.clip(p[None, :], lo, hi)
        return np.linalg.norm(p[None, :] - clamped, axis=1).min()

    got = skeleton_distance(cx, 1, pts)
    want = np.array([oracle(p) for p in pts])
    assert np.allclose(got, want, atol=0.0)


@pytest.mark.parametrize("n", [2, 3])
def test_skeleton_monotone_in_dimension(n):
    root = RootCube((0.0,) * n, 1.0, n)
    cx = full_complex(root, 2)
    rng = np.random.default_rng(5)
    for d in range(n):
        anchors, spans = cx.face_arrays(d)
        pick = rng.integers(0, len(anchors), size=40)
        h = cx.cell_side
        for idx in pick:
            lo = root.corner_array + anchors[idx] * h
            t = rng.random(n)
            p = lo + h * spans[idx] * t
            for d2 in range(d, n + 1):
                assert skeleton_contains(cx, d2, p, 1e-12)


def test_nesting_of_levels():
    child = full_complex(UNIT_SQUARE, 3)
    for anchor in child.cells[::7]:
        cell = DyadicCell(3, tuple(anchor), (True, True))
        parent = cell.parent()
        lo_c, hi_c = cell.realization(UNIT_SQUARE)
        lo_p, hi_p = parent.realization(UNIT_SQUARE)
        assert (lo_p <= lo_c).all() and (hi_c <= hi_p).all()


def test_subdivide_monotone_in_oracle():
    small = PointNeighborhoodOracle(np.array([[0.3, 0.3]]), 0.05)
    big = PointNeighborhoodOracle(np.array([[0.3, 0.3], [0.8, 0.8]]), 0.05)
    cx_small = subdivide(UNIT_SQUARE, 4, small)
    cx_big = subdivide(UNIT_SQUARE, 4, big)
    small_set = {tuple(c) for c in cx_small.cells}
    big_set = {tuple(c) for c in cx_big.cells}
    assert small_set <= big_set


def test_cell_identity_and_views():
    cell = DyadicCell(2, (1, 2), (True, False))
    assert cell.dim == 1
    assert cell.coords == (1, 2)
    assert cell.face_selector == ("span", "low")
    top_face = DyadicCell(2, (1, 4), (True, False))
    assert top_face.coords == (1, 3)
    assert top_face.face_selector == ("span", "high")


def test_faces_objects_are_deduplicated():
    cx = CellComplex(UNIT_SQUARE, 1, np.array([[0, 0], [1, 0]]))
    edge_objs = faces(cx, 1)
    assert len(edge_objs) == len(set(edge_objs)) == 7


def test_level_refusal():
    with pytest.raises(ResolutionLimit):
        subdivide(UNIT_SQUARE, 60, EverythingOracle())


def test_full_scan_budget_refusal():
    root = RootCube((0.0, 0.0, 0.0), 1.0, 3)
    with pytest.raises(BudgetExceeded):
        subdivide(root, 10, EverythingOracle())


def test_complex_json_roundtrip():
    cx = subdivide(UNIT_SQUARE, 2, EverythingOracle())
    doc = cx.to_json()
    back = CellComplex.from_json(doc)
    assert back.level == cx.level
    assert np.array_equal(back.cells, cx.cells)
    assert back.root == cx.root
