"""Generative test sets and their discretizations into weighted clouds.

The canonical unrectifiable exemplar is the four-corner Cantor set (four
1/4-scale corner copies of the unit square); rectifiable exemplars are
polyline curves and flat graph patches.  Every set discretizes into a
``WeightedCloud`` whose weights carry the measure and whose ``part`` flags
split it into the unrectifiable part ``U`` and the remainder ``R``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import BudgetExceeded

WORD_BUDGET = 1_000_000


@dataclass(frozen=True)
class Similarity:
    """x -> ratio * R x + shift with R orthogonal and 0 < ratio < 1."""

    ratio: float
    shift: tuple[float, ...]
    rotation: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self):
        if not 0 < self.ratio < 1:
            raise ValueError(f"similarity ratio must be in (0,1), got {self.ratio}")

    @property
    def n(self) -> int:
        return len(self.shift)

    def matrix(self) -> np.ndarray:
        if self.rotation is None:
            return np.eye(self.n)
        return np.asarray(self.rotation, dtype=float)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        out = self.ratio * pts @ self.matrix().T
        return out + np.asarray(self.shift, dtype=float)

    def fixed_point(self) -> np.ndarray:
        a = np.eye(self.n) - self.ratio * self.matrix()
        return np.linalg.solve(a, np.asarray(self.shift, dtype=float))


@dataclass(frozen=True)
class IFSSpec:
    """Similarity IFS with an intended integer dimension class ``m``.

    The open-set condition is declared by the caller and recorded as
    metadata; it is not verified.
    """

    maps: tuple[Similarity, ...]
    m: int
    open_set_condition: bool = True
    base_point: tuple[float, ...] | None = None

    @property
    def n(self) -> int:
        return self.maps[0].n

    def hull_ball(self) -> tuple[np.ndarray, float]:
        """A ball (center, radius) that every map sends into itself."""
        fixed = np.array([s.fixed_point() for s in self.maps])
        c = 0.5 * (fixed.min(axis=0) + fixed.max(axis=0))
        r = max(
            float(np.linalg.norm(s.apply(c[None])[0] - c)) / (1.0 - s.ratio)
            for s in self.maps
        )
        return c, max(r, 1e-30)

    def default_base(self) -> np.ndarray:
        if self.base_point is not None:
            return np.asarray(self.base_point, dtype=float)
        return self.hull_ball()[0]


def four_corner_ifs() -> IFSSpec:
    """Four 1/4-ratio corner maps of the unit square (purely 1-unrectifiable)."""
    shifts = [(0.0, 0.0), (0.75, 0.0), (0.0, 0.75), (0.75, 0.75)]
    return IFSSpec(tuple(Similarity(0.25, s) for s in shifts), m=1)


@dataclass(frozen=True)
class CurveSpec:
    """Polyline (m=1) or flat graph-grid patch (m=2)."""

    vertices: tuple[tuple[float, ...], ...] = ()
    grid: tuple | None = None  # (Gx, Gy, n) nested tuples for m=2 patches
    m: int = 1

    def __post_init__(self):
        if self.m == 1:
            v = np.asarray(self.vertices, dtype=float)
            if len(v) >= 2 and (np.linalg.norm(np.diff(v, axis=0), axis=1) == 0).any():
                raise ValueError("consecutive polyline vertices must be distinct")

    @property
    def n(self) -> int:
        if self.m == 1:
            return len(self.vertices[0])
        return len(self.grid[0][0])

    def vertex_array(self) -> np.ndarray:
        return np.asarray(self.vertices, dtype=float)

    def total_length(self) -> float:
        if self.m != 1 or len(self.vertices) < 2:
            return 0.0
        v = self.vertex_array()
        return float(np.linalg.norm(np.diff(v, axis=0), axis=1).sum())


def circle_polyline(center=(0.5, 0.5), radius=0.35, segments=360) -> CurveSpec:
    t = np.linspace(0.0, 2 * np.pi, segments + 1)
    pts = np.stack([center[0] + radius * np.cos(t), center[1] + radius * np.sin(t)], axis=1)
    return CurveSpec(tuple(map(tuple, pts)), m=1)


def segment_polyline(a=(0.0, 0.0), b=(1.0, 0.0)) -> CurveSpec:
    return CurveSpec((tuple(a), tuple(b)), m=1)


@dataclass(frozen=True)
class WeightedCloud:
    """Finite weighted point set with a U/R part flag per point.

    ``metadata['resolution']`` records the spatial scale below which the
    cloud no longer represents its generating set (point spacing scale);
    measure surrogates should not be evaluated below it.
    """

    points: np.ndarray
    weights: np.ndarray
    part: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.size == 0:
            pts = pts.reshape(0, pts.shape[1] if pts.ndim == 2 and pts.shape[1] else 2)
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        p = np.asarray(self.part, dtype="<U1").reshape(-1)
        if not (len(pts) == len(w) == len(p)):
            raise ValueError("points, weights and part flags must have equal length")
        if len(w) and w.min() <= 0:
            raise ValueError("weights must be positive")
        if len(p) and not set(np.unique(p)) <= {"U", "R"}:
            raise ValueError("part flags must be 'U' or 'R'")
        for arr, name in ((pts, "points"), (w, "weights"), (p, "part")):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def n(self) -> int:
        return self.points.shape[1]

    @property
    def total_weight(self) -> float:
        return float(self.weights.sum())

    @property
    def resolution(self) -> float:
        return float(self.metadata.get("resolution", 0.0))

    def u_mask(self) -> np.ndarray:
        return self.part == "U"

    def r_mask(self) -> np.ndarray:
        return self.part == "R"

    def select(self, mask: np.ndarray) -> "WeightedCloud":
        return WeightedCloud(self.points[mask], self.weights[mask], self.part[mask], dict(self.metadata))

    def with_points(self, new_points: np.ndarray) -> "WeightedCloud":
        """Same weights/flags at new positions (pushforward of the cloud)."""
        return WeightedCloud(new_points, self.weights, self.part, dict(self.metadata))

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        if len(self) == 0:
            z = np.zeros(self.n)
            return z, z
        return self.points.min(axis=0), self.points.max(axis=0)


def empty_cloud(n: int = 2) -> WeightedCloud:
    return WeightedCloud(np.zeros((0, n)), np.zeros(0), np.zeros(0, dtype="<U1"))


def generate_prefractal(spec: IFSSpec, depth: int) -> WeightedCloud:
    """One point per length-``depth`` composition word, flagged U.

    The point is the word's image of the base point; the weight is the
    product of ratio**m along the word, so the depth-0 weight is 1 and the
    total is (sum_i ratio_i**m)**depth.
    """
    k = len(spec.maps)
    if k**depth > WORD_BUDGET:
        raise BudgetExceeded(f"{k}**{depth} IFS words exceed the {WORD_BUDGET} budget")
    pts = spec.default_base()[None, :].copy()
    wts = np.ones(1)
    for _ in range(depth):
        pts = np.concatenate([s.apply(pts) for s in spec.maps], axis=0)
        wts = np.concatenate([wts * (s.ratio**spec.m) for s in spec.maps])
    _, hull_r = spec.hull_ball()
    rmax = max(s.ratio for s in spec.maps)
    meta = {
        "source": "ifs",
        "depth": depth,
        "base_point": tuple(map(float, spec.default_base())),
        "open_set_condition": spec.open_set_condition,
        "resolution": float(2 * hull_r * rmax**depth),
    }
    return WeightedCloud(pts, wts, np.full(len(pts), "U"), meta)


def discretize_curve(spec: CurveSpec, delta: float) -> WeightedCloud:
    """Nodes spaced <= delta along the curve, weights = arc-length shares."""
    if delta <= 0:
        raise ValueError("arc-length step must be positive")
    if spec.m == 2:
        return _discretize_patch(spec, delta)
    v = spec.vertex_array()
    if len(v) < 2:
        return empty_cloud(spec.n if len(v) else 2)
    seg = np.linalg.norm(np.diff(v, axis=0), axis=1)
    length = float(seg.sum())
    if length == 0.0:
        return empty_cloud(spec.n)
    closed = bool(np.allclose(v[0], v[-1]))
    nseg = max(1, int(np.ceil(length / delta)))
    ticks = np.linspace(0.0, length, nseg + 1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    pts = np.empty((len(ticks), spec.n))
    for axis in range(spec.n):
        pts[:, axis] = np.interp(ticks, cum, v[:, axis])
    share = length / nseg
    wts = np.full(len(ticks), share)
    if closed:
        pts, wts = pts[:-1], wts[:-1]
    else:
        wts[0] *= 0.5
        wts[-1] *= 0.5
    meta = {"source": "curve", "length": length, "resolution": float(share)}
    return WeightedCloud(pts, wts, np.full(len(pts), "R"), meta)


def _discretize_patch(spec: CurveSpec, delta: float) -> WeightedCloud:
    grid = np.asarray(spec.grid, dtype=float)
    gx, gy = grid.shape[0], grid.shape[1]
    if gx < 2 or gy < 2:
        return empty_cloud(grid.shape[2] if grid.ndim == 3 else 2)
    # Per-node area share via the local tangent parallelogram.
    du = np.gradient(grid, axis=0)
    dv = np.gradient(grid, axis=1)
    if grid.shape[2] == 3:
        elem = np.linalg.norm(np.cross(du, dv), axis=2)
    else:
        elem = np.abs(du[..., 0] * dv[..., 1] - du[..., 1] * dv[..., 0])
    pts = grid.reshape(-1, grid.shape[2])
    wts = elem.reshape(-1)
    keep = wts > 0
    step = float(np.median(np.linalg.norm(du, axis=2)) + np.median(np.linalg.norm(dv, axis=2)))
    meta = {"source": "patch", "resolution": step}
    return WeightedCloud(pts[keep], wts[keep], np.full(int(keep.sum()), "R"), meta)


def mix(a: WeightedCloud, b: WeightedCloud) -> WeightedCloud:
    """Concatenation preserving weights and flags."""
    if len(a) == 0:
        return b
    if len(b) == 0:
        return a
    if a.n != b.n:
        raise ValueError(f"ambient dimension mismatch: {a.n} vs {b.n}")
    res = [r for r in (a.resolution, b.resolution) if r > 0]
    meta = {"source": "mix", "resolution": min(res) if res else 0.0}
    return WeightedCloud(
        np.concatenate([a.points, b.points], axis=0),
        np.concatenate([a.weights, b.weights]),
        np.concatenate([a.part, b.part]),
        meta,
    )


# ---------------------------------------------------------------------------
# Cell-intersection oracles for subdivide()
# ---------------------------------------------------------------------------

def _box_point_dist(los, his, points):
    """Pairwise distances between boxes [lo,hi] and points, chunked."""
    out = np.full(len(los), np.inf)
    step = max(1, int(20_000_000 / max(1, len(points))))
    for s in range(0, len(los), step):
        lo, hi = los[s : s + step], his[s : s + step]
        clamped = np.clip(points[None, :, :], lo[:, None, :], hi[:, None, :])
        d = np.linalg.norm(clamped - points[None, :, :], axis=2)
        out[s : s + step] = d.min(axis=1)
    return out


class PointNeighborhoodOracle:
    """S = closed ``pad``-neighborhood of a finite point set."""

    def __init__(self, points: np.ndarray, pad: float):
        self.points = np.atleast_2d(np.asarray(points, dtype=float))
        self.pad = float(pad)

    def bboxes(self):
        lo = self.points - self.pad
        hi = self.points + self.pad
        return list(zip(lo, hi))

    def hits_boxes(self, los, his):
        return _box_point_dist(np.asarray(los), np.asarray(his), self.points) <= self.pad

    def __call__(self, lo, hi):
        return bool(self.hits_boxes(np.asarray(lo)[None], np.asarray(hi)[None])[0])


class BallUnionOracle:
    """S = finite union of closed balls."""

    def __init__(self, centers: np.ndarray, radii: np.ndarray):
        self.centers = np.atleast_2d(np.asarray(centers, dtype=float))
        self.radii = np.asarray(radii, dtype=float).reshape(-1)
        self._tree = None

    def bboxes(self):
        lo = self.centers - self.radii[:, None]
        hi = self.centers + self.radii[:, None]
        return list(zip(lo, hi))

    def hits_boxes(self, los, his):
        # A box meets a ball iff the clamp of the center onto the box is
        # within the radius; prune candidates with a KD query first.
        from scipy.spatial import cKDTree

        los, his = np.asarray(los, float), np.asarray(his, float)
        if self._tree is None:
            self._tree = cKDTree(self.centers)
        mids = 0.5 * (los + his)
        half_diag = 0.5 * np.linalg.norm(his - los, axis=1)
        reach = float(self.radii.max()) + float(half_diag.max()) + 1e-12
        out = np.zeros(len(los), dtype=bool)
        cand_lists = self._tree.query_ball_point(mids, reach)
        for i, cands in enumerate(cand_lists):
            if not cands:
                continue
            c = self.centers[cands]
            gap = np.linalg.norm(np.clip(c, los[i], his[i]) - c, axis=1)
            out[i] = bool((gap <= self.radii[cands]).any())
        return out

    def __call__(self, lo, hi):
        return bool(self.hits_boxes(np.asarray(lo)[None], np.asarray(hi)[None])[0])


class IFSAttractorOracle:
    """Conservative intersection test against an IFS attractor.

    Pieces are refined until their bounding balls shrink below ``tol``; a
    box hits iff it comes within ``tol`` of some terminal piece ball, so
    over-inclusion is at most ``tol``.
    """

    def __init__(self, spec: IFSSpec, tol: float):
        self.spec = spec
        self.tol = float(tol)
        self._c0, self._r0 = spec.hull_ball()

    def bboxes(self):
        return [(self._c0 - self._r0 - self.tol, self._c0 + self._r0 + self.tol)]

    def __call__(self, lo, hi) -> bool:
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        stack = [(self._c0, self._r0)]
        while stack:
            c, r = stack.pop()
            gap = np.linalg.norm(np.clip(c, lo, hi) - c)
            if gap > r + self.tol:
                continue
            if r <= self.tol:
                return True
            for s in self.spec.maps:
                stack.append((s.apply(c[None])[0], r * s.ratio))
        return False


class CurveOracle:
    """Intersection test against a polyline, exact up to ternary-search eps."""

    def __init__(self, spec: CurveSpec, pad: float = 0.0):
        v = spec.vertex_array()
        self.a = v[:-1]
        self.b = v[1:]
        self.pad = float(pad)

    def bboxes(self):
        lo = np.minimum(self.a, self.b) - self.pad
        hi = np.maximum(self.a, self.b) + self.pad
        return list(zip(lo, hi))

    def _min_dist(self, lo, hi) -> float:
        # dist(seg(t), box) is convex in t: ternary search per segment.
        t0 = np.zeros(len(self.a))
        t1 = np.ones(len(self.a))

        def f(t):
            p = self.a + t[:, None] * (self.b - self.a)
            return np.linalg.norm(np.clip(p, lo, hi) - p, axis=1)

        for _ in range(60):
            m1 = t0 + (t1 - t0) / 3
            m2 = t1 - (t1 - t0) / 3
            swap = f(m1) > f(m2)
            t0 = np.where(swap, m1, t0)
            t1 = np.where(swap, t1, m2)
        return float(f(0.5 * (t0 + t1)).min())

    def __call__(self, lo, hi) -> bool:
        return self._min_dist(np.asarray(lo, float), np.asarray(hi, float)) <= self.pad


# ---------------------------------------------------------------------------
# Cloud CSV format: header x[,y[,z]],weight,part
# ---------------------------------------------------------------------------

_AXIS = ("x", "y", "z")


def write_cloud_csv(cloud: WeightedCloud, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(_AXIS[: cloud.n]) + ["weight", "part"])
        for p, w, flag in zip(cloud.points, cloud.weights, cloud.part):
            writer.writerow([repr(float(c)) for c in p] + [repr(float(w)), flag])


def read_cloud_csv(path) -> WeightedCloud:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n = len(header) - 2
        if header[:n] != list(_AXIS[:n]) or header[n:] != ["weight", "part"]:
            raise ValueError(f"unexpected cloud CSV header: {header}")
        pts, wts, flags = [], [], []
        for row in reader:
            pts.append([float(c) for c in row[:n]])
            wts.append(float(row[n]))
            flags.append(row[n + 1])
    if not pts:
        return empty_cloud(n)
    return WeightedCloud(np.asarray(pts), np.asarray(wts), np.asarray(flags))
