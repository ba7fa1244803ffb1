"""Map-building kernel: shadows, direction search, per-cell projections.

A grid projection map is an ordered composition of stages:

* per-face radial projections (descending face dimension, n down to m+1)
  pushing set mass from face interiors onto face boundaries, with centers
  chosen to control the measure of the remainder part's image;
* a skeleton concentration stage that contracts the landed unrectifiable
  mass along the 1-skeleton toward per-cluster target vertices, tapering to
  the identity on a buffer band so the composed map stays continuous and
  is the identity outside the supporting cell union.

All randomness is seeded; per-face draws are keyed by face address so the
construction does not depend on iteration order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ClearanceFailure, BudgetExceeded
from .grid import CellComplex, RootCube, skeleton_distance, subdivide
from .measure import MeasureEstimate, cover_level, measure_at_scale, occupied_cells
from .setmodels import WeightedCloud

_LATTICE_EPS = 0.0  # on-lattice detection is bit-exact for dyadic geometry


@dataclass
class MapConfig:
    """Knobs of the map construction; defaults follow the n=2 experiments."""

    c_bound: float = 20.0
    rho_min_factor: float = 1e-3
    center_candidates: int = 64
    direction_samples: int = 100
    lip_pairs: int = 4096
    band_cells: float = 1.0
    ring_pad_cells: float = 1.5
    eps_w: float | None = None
    point_budget_per_cell: int = 100_000


# ---------------------------------------------------------------------------
# Directions, orthogonal projection, shadows
# ---------------------------------------------------------------------------

def _check_frame(frame: np.ndarray) -> np.ndarray:
    frame = np.atleast_2d(np.asarray(frame, dtype=float))
    gram = frame @ frame.T
    if not np.allclose(gram, np.eye(len(frame)), atol=1e-12):
        raise ValueError("direction frame must be orthonormal to 1e-12")
    return frame


def sample_directions(n: int, m: int, count: int, seed) -> list[np.ndarray]:
    """Seeded m-frames in R^n; the canonical axis frames always come first."""
    frames: list[np.ndarray] = []
    eye = np.eye(n)
    if m == n:
        return [eye]
    import itertools

    for axes in itertools.combinations(range(n), m):
        frames.append(eye[list(axes)])
    rng = np.random.default_rng(seed)
    if n == 2 and m == 1:
        thetas = rng.uniform(0.0, np.pi, size=max(0, count))
        for t in thetas:
            frames.append(np.array([[math.cos(t), math.sin(t)]]))
    else:
        for _ in range(max(0, count)):
            g = rng.normal(size=(n, m))
            q, _ = np.linalg.qr(g)
            frames.append(q[:, :m].T)
    return frames


def ortho_project(cloud: WeightedCloud, frame) -> WeightedCloud:
    """Pushforward of the cloud onto the m-plane, in plane coordinates."""
    frame = _check_frame(frame)
    pts = cloud.points @ frame.T
    return WeightedCloud(pts, cloud.weights, cloud.part, dict(cloud.metadata))


def shadow_measure(cloud: WeightedCloud, frame, delta: float) -> MeasureEstimate:
    frame = _check_frame(frame)
    return measure_at_scale(ortho_project(cloud, frame), len(frame), delta)


def bf_direction_search(
    cloud: WeightedCloud,
    samples: int,
    seed,
    m: int = 1,
    scale: float | None = None,
    return_table: bool = False,
):
    """Sampled direction minimizing the shadow of a purely unrectifiable cloud.

    The candidate set always contains the canonical axes, so the minimizer
    is never worse than an axis shadow.  Scale defaults to four times the
    cloud resolution (the finest scale the discretization supports).
    """
    if samples < 1:
        raise ValueError("need at least one direction sample")
    if len(cloud) and not cloud.u_mask().all():
        raise ValueError("direction search expects a cloud flagged entirely U")
    n = cloud.n if len(cloud) else 2
    if scale is None:
        res = cloud.resolution
        if res <= 0 and len(cloud):
            lo, hi = cloud.bbox()
            res = max(float(np.linalg.norm(hi - lo)) / 64.0, 1e-9)
        scale = max(4.0 * res, 1e-12)
    frames = sample_directions(n, m, samples, seed)
    values = [shadow_measure(cloud, f, scale).value if len(cloud) else 0.0 for f in frames]
    best = int(np.argmin(values))
    if return_table:
        return frames[best], list(zip(frames, values))
    return frames[best]


# ---------------------------------------------------------------------------
# Lattice helpers
# ---------------------------------------------------------------------------

def _encode(anchors: np.ndarray, base: int) -> np.ndarray:
    anchors = np.atleast_2d(anchors).astype(np.int64)
    key = anchors[:, 0].copy()
    for i in range(1, anchors.shape[1]):
        key = key * base + anchors[:, i]
    return key


class _KeyedLookup:
    """Sorted-key membership + payload gather."""

    def __init__(self, keys: np.ndarray, payload: np.ndarray | None = None):
        order = np.argsort(keys, kind="stable")
        self.keys = keys[order]
        self.payload = payload[order] if payload is not None else None

    def find(self, query: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        idx = np.searchsorted(self.keys, query)
        idx = np.clip(idx, 0, max(0, len(self.keys) - 1))
        found = (len(self.keys) > 0) & (self.keys[idx] == query) if len(self.keys) else np.zeros(len(query), bool)
        return found, idx


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

class FaceRadialStage:
    """Radial projection of strict face interiors onto face boundaries.

    Faces are the dimension-``dim`` faces of the complex meeting the
    interior of the cell union; every other point is fixed.  Each face has
    a center (midpoint unless explicitly chosen); projection sends p to the
    exit of the ray center->p on the face boundary, with the exit
    coordinate snapped exactly onto the lattice.
    """

    kind = "radial"

    def __init__(self, root: RootCube, level: int, dim: int,
                 anchors: np.ndarray, spans: np.ndarray, centers: np.ndarray,
                 rho_min: float, chosen: dict | None = None,
                 caps: np.ndarray | None = None):
        self.root = root
        self.level = level
        self.dim = dim
        self.anchors = anchors
        self.spans = spans
        self.centers = centers
        self.rho_min = rho_min
        self.chosen = chosen or {}
        # Lipschitz cap: inside B(center, cap) the radial ray is rescaled
        # linearly, keeping the stage uniformly Lipschitz; centers are
        # chosen with set clearance beyond the cap, so set points always
        # reach the face boundary.
        h = root.cell_side(level)
        if caps is None:
            caps = np.full(len(anchors), h / 8.0)
        self.caps = caps
        base = (1 << level) + 2
        self._groups = []
        for span in np.unique(spans, axis=0) if len(spans) else []:
            mask = (spans == span[None, :]).all(axis=1)
            look = _KeyedLookup(_encode(anchors[mask], base), np.flatnonzero(mask))
            self._groups.append((span.astype(bool), look))
        self._base = base

    def apply(self, pts: np.ndarray) -> np.ndarray:
        if len(pts) == 0 or len(self.anchors) == 0:
            return pts.copy()
        n = self.root.n
        h = self.root.cell_side(self.level)
        corner = self.root.corner_array
        out = np.array(pts, dtype=float, copy=True)
        rel = (pts - corner[None, :]) / h
        fl = np.floor(rel)
        onlat = rel == fl
        top = 1 << self.level
        for span, look in self._groups:
            cand = (~onlat == span[None, :]).all(axis=1)
            if not cand.any():
                continue
            anchor = fl.copy()
            anchor[:, ~span] = rel[:, ~span]
            anchor = anchor.astype(np.int64)
            inside = cand.copy()
            inside &= (anchor >= 0).all(axis=1)
            lim = np.where(span, top - 1, top)
            inside &= (anchor <= lim[None, :]).all(axis=1)
            if not inside.any():
                continue
            keys = _encode(anchor[inside], self._base)
            found, idx = look.find(keys)
            sel = np.flatnonzero(inside)[found]
            if len(sel) == 0:
                continue
            face_idx = look.payload[idx[found]]
            lo = corner[None, :] + self.anchors[face_idx] * h
            c = self.centers[face_idx]
            p = pts[sel]
            d = p - c
            span_idx = np.flatnonzero(span)
            d_s = d[:, span_idx]
            norms = np.linalg.norm(d_s, axis=1)
            if (norms == 0.0).any():
                raise ClearanceFailure(
                    f"point exactly at a projection center (dim-{self.dim} stage)"
                )
            t = np.full(len(sel), np.inf)
            exit_axis = np.zeros(len(sel), dtype=np.int64)
            exit_val = np.zeros(len(sel))
            for ax in span_idx:
                da = d[:, ax]
                lo_a = lo[:, ax]
                hi_a = lo_a + h
                ta = np.where(
                    da > 0, (hi_a - c[:, ax]) / np.where(da > 0, da, 1.0),
                    np.where(da < 0, (lo_a - c[:, ax]) / np.where(da < 0, da, 1.0), np.inf),
                )
                better = ta < t
                t = np.where(better, ta, t)
                exit_axis = np.where(better, ax, exit_axis)
                exit_val = np.where(better, np.where(da > 0, hi_a, lo_a), exit_val)
            t = np.maximum(t, 1.0)
            caps = self.caps[face_idx]
            full = norms >= caps
            q = c + t[:, None] * d
            rows = np.arange(len(sel))
            q[rows, exit_axis] = exit_val
            for ax in span_idx:
                lo_a = lo[:, ax]
                q[:, ax] = np.clip(q[:, ax], lo_a, lo_a + h)
            # Sub-cap points scale linearly toward the boundary image.
            lam = (norms / np.maximum(caps, 1e-300))[:, None]
            q = np.where(full[:, None], q, c + lam * (q - c))
            for ax in np.flatnonzero(~span):
                q[:, ax] = p[:, ax]
            out[sel] = q
        return out

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "dim": self.dim,
            "level": self.level,
            "rho_min": self.rho_min,
            "default_center": "midpoint",
            "chosen_centers": {
                k: [float(x) for x in v] for k, v in sorted(self.chosen.items())
            },
        }


class TranslationStage:
    kind = "translate"

    def __init__(self, offset):
        self.offset = np.asarray(offset, dtype=float)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return pts + self.offset[None, :]

    def to_json(self) -> dict:
        return {"kind": self.kind, "offset": [float(x) for x in self.offset]}


class SkeletonTransportStage:
    """Contraction of cluster skeletons toward per-cluster target vertices.

    For a point at tree-distance d from the target with frontier gap g,
    the image sits at tree-distance d * (1 - min(1, g/band)): full collapse
    one band inside the cluster, exact identity on the frontier (vertices
    and edges adjacent to skeleton outside the cluster or to the boundary
    of the cell union), hence continuous with the ambient identity.
    """

    kind = "transport"

    def __init__(self, root: RootCube, level: int, clusters: list[dict], band: float):
        self.root = root
        self.level = level
        self.clusters = clusters
        self.band = band
        base = (1 << level) + 2
        self._vbase = base
        self._lookups = []
        for cl in clusters:
            vlook = _KeyedLookup(cl["vertex_keys"], np.arange(len(cl["vertex_keys"])))
            elook = _KeyedLookup(cl["edge_keys"], np.arange(len(cl["edge_keys"])))
            self._lookups.append((vlook, elook))

    def _walk(self, cl, entry: int, seg_far: np.ndarray | None, seg_len: float,
              d_p: float, g_p: float) -> np.ndarray:
        pos = cl["positions"]
        depth = cl["depth"]
        parent = cl["parent"]
        sigma = min(1.0, g_p / self.band) if self.band > 0 else 1.0
        d_new = d_p * (1.0 - sigma)
        if seg_far is not None and d_new >= depth[entry]:
            if seg_len <= 0:
                return pos[entry].copy()
            frac = (d_new - depth[entry]) / seg_len
            return pos[entry] + frac * (seg_far - pos[entry])
        node = entry
        while depth[node] > d_new and parent[node] >= 0:
            nxt = parent[node]
            if depth[nxt] <= d_new:
                span = depth[node] - depth[nxt]
                if span <= 0:
                    return pos[nxt].copy()
                frac = (d_new - depth[nxt]) / span
                return pos[nxt] + frac * (pos[node] - pos[nxt])
            node = nxt
        return pos[node].copy()

    def apply(self, pts: np.ndarray) -> np.ndarray:
        if len(pts) == 0 or not self.clusters:
            return pts.copy()
        n = self.root.n
        h = self.root.cell_side(self.level)
        corner = self.root.corner_array
        out = np.array(pts, dtype=float, copy=True)
        rel = (pts - corner[None, :]) / h
        fl = np.floor(rel)
        onlat = rel == fl
        n_free = (~onlat).sum(axis=1)
        vert_rows = np.flatnonzero(n_free == 0)
        edge_rows = np.flatnonzero(n_free == 1)
        if len(vert_rows):
            vkeys = _encode(fl[vert_rows].astype(np.int64), self._vbase)
            for cl, (vlook, _) in zip(self.clusters, self._lookups):
                found, idx = vlook.find(vkeys)
                for row, vi in zip(vert_rows[found], vlook.payload[idx[found]]):
                    out[row] = self._walk(cl, int(vi), None, 0.0,
                                          float(cl["depth"][vi]), float(cl["gap"][vi]))
        if len(edge_rows):
            axes = np.argmax(~onlat[edge_rows], axis=1)
            anchors = fl[edge_rows].astype(np.int64)
            ekeys = _encode(anchors, self._vbase) * n + axes
            for cl, (vlook, elook) in zip(self.clusters, self._lookups):
                found, idx = elook.find(ekeys)
                for pos_i, row, ax in zip(
                    elook.payload[idx[found]], edge_rows[found], axes[found]
                ):
                    u = int(cl["edge_u"][pos_i])
                    v = int(cl["edge_v"][pos_i])
                    ax = int(ax)
                    s = float((rel[row, ax] - math.floor(rel[row, ax])) * h)
                    du, dv = float(cl["depth"][u]) + s, float(cl["depth"][v]) + (h - s)
                    gu, gv = float(cl["gap"][u]) + s, float(cl["gap"][v]) + (h - s)
                    g_p = min(gu, gv)
                    if du <= dv:
                        entry, seg_len, d_p = u, s, du
                    else:
                        entry, seg_len, d_p = v, h - s, dv
                    out[row] = self._walk(cl, entry, pts[row], seg_len, d_p, g_p)
        return out

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "level": self.level,
            "band": self.band,
            "clusters": [
                {
                    "target": [int(x) for x in cl["target_anchor"]],
                    "vertices": int(len(cl["vertex_keys"])),
                    "edges": int(len(cl["edge_keys"])),
                    "max_depth": float(cl["depth"].max()) if len(cl["depth"]) else 0.0,
                }
                for cl in self.clusters
            ],
        }


# ---------------------------------------------------------------------------
# PiecewiseMap
# ---------------------------------------------------------------------------

@dataclass
class PiecewiseMap:
    """Ordered stage composition; identity outside the declared support."""

    stages: list = field(default_factory=list)
    root: RootCube | None = None
    level: int | None = None
    support_cells: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def apply_points(self, pts: np.ndarray) -> np.ndarray:
        out = np.atleast_2d(np.asarray(pts, dtype=float))
        for stage in self.stages:
            out = stage.apply(out)
        return out

    def apply(self, cloud: WeightedCloud) -> WeightedCloud:
        return cloud.with_points(self.apply_points(cloud.points))

    def support_bbox(self) -> tuple[np.ndarray, np.ndarray] | None:
        if self.root is None or self.support_cells is None or not len(self.support_cells):
            return None
        h = self.root.cell_side(self.level)
        lo = self.root.corner_array + self.support_cells.min(axis=0) * h
        hi = self.root.corner_array + (self.support_cells.max(axis=0) + 1) * h
        return lo, hi

    def to_json(self) -> dict:
        doc = {
            "stages": [s.to_json() for s in self.stages],
            "meta": _jsonable(self.meta),
        }
        if self.root is not None:
            doc["root"] = {"corner": list(self.root.corner), "side": self.root.side, "n": self.root.n}
            doc["level"] = self.level
        return doc


def identity_map() -> PiecewiseMap:
    return PiecewiseMap(stages=[], meta={"identity": True})


def translation_map(offset) -> PiecewiseMap:
    return PiecewiseMap(stages=[TranslationStage(offset)], meta={"translation": list(map(float, offset))})


def compose(first: PiecewiseMap, second: PiecewiseMap) -> PiecewiseMap:
    """Pipeline composition: apply ``first``, then ``second``."""
    return PiecewiseMap(
        stages=list(first.stages) + list(second.stages),
        root=first.root or second.root,
        level=first.level if first.level is not None else second.level,
        support_cells=first.support_cells if first.support_cells is not None else second.support_cells,
        meta={"composed": [first.meta, second.meta]},
    )


def lipschitz_estimate(map_: PiecewiseMap, pair_samples: int, seed, domain=None) -> float:
    """Empirical Lipschitz constant over seeded pairs.

    Pair separations walk the dyadic ladder (support side) * 2**-t down to
    a few binary levels below the map's cell size, so estimates of maps at
    different grid levels sample the same geometry relative to their cells.
    """
    if domain is None:
        box = map_.support_bbox()
        if box is None:
            box = (np.zeros(2), np.ones(2))
        domain = box
    lo, hi = (np.asarray(domain[0], float), np.asarray(domain[1], float))
    span = float(max((hi - lo).max(), 1e-12))
    pad = 0.05 * span
    lo, hi = lo - pad, hi + pad
    rng = np.random.default_rng(seed)
    n = len(lo)
    t_deep = 12
    if map_.level is not None and map_.root is not None:
        rel = math.log2(max(map_.root.side * 2.0**-map_.level, 1e-300) / span)
        t_deep = max(4, int(-rel) + 4)
    xs = lo + rng.random((pair_samples, n)) * (hi - lo)
    dirs = rng.normal(size=(pair_samples, n))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    scales = (hi - lo).max() * 2.0 ** -(1 + (np.arange(pair_samples) % t_deep))
    ys = xs + dirs * scales[:, None]
    fx = map_.apply_points(xs)
    fy = map_.apply_points(ys)
    num = np.linalg.norm(fx - fy, axis=1)
    den = np.linalg.norm(xs - ys, axis=1)
    ratio = num / np.where(den > 0, den, 1.0)
    return float(ratio.max()) if len(ratio) else 1.0


# ---------------------------------------------------------------------------
# Center selection
# ---------------------------------------------------------------------------

def _cover_count(points: np.ndarray, delta: float) -> int:
    if len(points) == 0:
        return 0
    return len(occupied_cells(points, cover_level(delta)))


def _radial_once(p: np.ndarray, c: np.ndarray, lo: np.ndarray, h: float,
                 span_idx: np.ndarray) -> np.ndarray:
    d = p - c[None, :]
    t = np.full(len(p), np.inf)
    exit_axis = np.zeros(len(p), dtype=np.int64)
    exit_val = np.zeros(len(p))
    for ax in span_idx:
        da = d[:, ax]
        hi_a = lo[ax] + h
        ta = np.where(
            da > 0, (hi_a - c[ax]) / np.where(da > 0, da, 1.0),
            np.where(da < 0, (lo[ax] - c[ax]) / np.where(da < 0, da, 1.0), np.inf),
        )
        better = ta < t
        t = np.where(better, ta, t)
        exit_axis = np.where(better, ax, exit_axis)
        exit_val = np.where(better, np.where(da > 0, hi_a, lo[ax]), exit_val)
    t = np.maximum(t, 1.0)
    q = c[None, :] + t[:, None] * d
    q[np.arange(len(p)), exit_axis] = exit_val
    for ax in span_idx:
        q[:, ax] = np.clip(q[:, ax], lo[ax], lo[ax] + h)
    return q


def radial_project_in_cell(
    points: np.ndarray,
    face_lo: np.ndarray,
    h: float,
    span_idx: np.ndarray,
    center: np.ndarray,
    rho_min: float = 0.0,
) -> np.ndarray:
    """Radial projection of points in a face onto the face boundary.

    Each point maps to the exit of the ray center->point on the boundary,
    snapped exactly onto the face's affine hull; points already on the
    boundary are fixed.  Points within ``rho_min`` of the center are
    refused (the center must be re-chosen).
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    center = np.asarray(center, dtype=float)
    span_idx = np.asarray(span_idx, dtype=np.int64)
    d = (points - center[None, :])[:, span_idx]
    norms = np.linalg.norm(d, axis=1)
    if (norms < rho_min).any() or (norms == 0.0).any():
        raise ClearanceFailure(
            f"{int((norms < max(rho_min, 1e-300)).sum())} point(s) within "
            f"clearance {rho_min:.3e} of the projection center"
        )
    out = _radial_once(points, center, np.asarray(face_lo, float), h, span_idx)
    fixed = np.setdiff1d(np.arange(points.shape[1]), span_idx)
    for ax in fixed:
        out[:, ax] = face_lo[ax]
    return out


def choose_center(
    face_lo: np.ndarray,
    h: float,
    span_idx: np.ndarray,
    e_points: np.ndarray,
    r_points: np.ndarray,
    m: int,
    candidates: int,
    rng: np.random.Generator,
    rho_min: float,
) -> tuple[np.ndarray, float, float]:
    """Sampled center in the concentric middle-half of the face.

    Minimizes the dyadic-cover surrogate of the radially projected
    remainder points, subject to keeping ``rho_min`` clearance from every
    set point in the face; ties prefer larger clearance, then sample order.
    Returns (center, achieved image/input surrogate ratio, clearance).
    """
    if candidates < 1:
        raise ValueError("need at least one center candidate")
    n = len(face_lo)
    draws = rng.random((candidates, n))
    cands = np.array(face_lo, dtype=float)[None, :].repeat(candidates, axis=0)
    cands[:, span_idx] = face_lo[span_idx][None, :] + h * (0.25 + 0.5 * draws[:, span_idx])
    delta_score = h / 8.0
    input_count = _cover_count(r_points, delta_score) if len(r_points) else 0
    best = None
    for i, c in enumerate(cands):
        if len(e_points):
            clear = float(np.linalg.norm((e_points - c[None, :])[:, span_idx], axis=1).min())
        else:
            clear = h
        if clear < rho_min:
            continue
        if len(r_points) and input_count:
            img = _radial_once(r_points, c, face_lo, h, span_idx)
            score = _cover_count(img, delta_score)
            ratio = score / input_count
        else:
            score, ratio = 0, 0.0
        key = (score, -clear, i)
        if best is None or key < best[0]:
            best = (key, c, ratio, clear)
    if best is None:
        raise ClearanceFailure(
            f"all {candidates} center candidates violate clearance {rho_min:.3e}"
        )
    return best[1], best[2], best[3]


# ---------------------------------------------------------------------------
# Cluster construction for the concentration stage
# ---------------------------------------------------------------------------

def _build_clusters(complex_: CellComplex, seed_cells: np.ndarray,
                    ring: int, bf_dir: np.ndarray | None) -> list[dict]:
    """Connected W-cell groups grown by ``ring`` complex cells, as BFS trees."""
    n = complex_.n
    top = 1 << complex_.level
    base = top + 2
    cell_keys = _encode(complex_.cells, base)
    cell_look = _KeyedLookup(cell_keys, np.arange(len(complex_.cells)))

    def neighbors(cell):
        for ax in range(n):
            for dv in (-1, 1):
                nb = cell.copy()
                nb[ax] += dv
                yield nb
        # diagonal growth keeps rings solid around corner-touching mass
        if n == 2:
            for dx in (-1, 1):
                for dy in (-1, 1):
                    yield cell + np.array([dx, dy])

    seed_keys = set(map(int, _encode(seed_cells, base)))

    def decode_key(key: int) -> np.ndarray:
        k = key
        coords = []
        for _ in range(n):
            coords.append(k % base)
            k //= base
        return np.array(coords[::-1], dtype=np.int64)

    # Connected components of the SEED cells only; each grows its own ring.
    # Grown regions of distinct components may touch: edges shared between
    # two components are frozen in both, which keeps the stages of touching
    # clusters mutually consistent (both act as the identity there).
    comp_of: dict[int, int] = {}
    seed_comps: list[list[int]] = []
    for key in sorted(seed_keys):
        if key in comp_of:
            continue
        comp = []
        stack = [key]
        comp_of[key] = len(seed_comps)
        while stack:
            cur = stack.pop()
            comp.append(cur)
            for nb in neighbors(decode_key(cur)):
                if (nb < 0).any() or (nb >= top).any():
                    continue
                nk = int(_encode(nb[None, :], base)[0])
                if nk in seed_keys and nk not in comp_of:
                    comp_of[nk] = len(seed_comps)
                    stack.append(nk)
        seed_comps.append(sorted(comp))

    comps: list[list[int]] = []
    for comp in seed_comps:
        grown = set(comp)
        frontier = [decode_key(k) for k in comp]
        for _ in range(ring):
            new_frontier = []
            for cell in frontier:
                for nb in neighbors(cell):
                    if (nb < 0).any() or (nb >= top).any():
                        continue
                    key = int(_encode(nb[None, :], base)[0])
                    if key in grown:
                        continue
                    found, _ = cell_look.find(np.array([key]))
                    if found[0]:
                        grown.add(key)
                        new_frontier.append(nb)
            frontier = new_frontier
        comps.append(sorted(grown))
    decode = {key: decode_key(key) for comp in comps for key in comp}

    # Complex edge set (1-faces) and boundary edges, for frontier detection.
    h = complex_.cell_side
    corner = complex_.root.corner_array
    edge_anchors, edge_spans = complex_.face_arrays(1)
    edge_axis = np.argmax(edge_spans, axis=1)
    complex_edge_keys = _encode(edge_anchors, base) * n + edge_axis
    complex_edge_look = _KeyedLookup(complex_edge_keys)
    if n == 2:
        bd_anchors, bd_spans = complex_.boundary_faces()
        bd_axis = np.argmax(bd_spans, axis=1)
        boundary_edge_keys = set(map(int, _encode(bd_anchors, base) * n + bd_axis))
    else:
        bd2_anchors, bd2_spans = complex_.boundary_faces()
        boundary_edge_keys = set()
        for a, s in zip(bd2_anchors, bd2_spans):
            span_axes = np.flatnonzero(s)
            fixed = np.flatnonzero(~s)
            for ax in span_axes:
                other = [x for x in span_axes if x != ax]
                for off in range(2) if other else [0]:
                    b = a.copy()
                    if other:
                        b[other[0]] += off
                    boundary_edge_keys.add(int(_encode(b[None, :], base)[0]) * n + int(ax))

    # Cluster skeleton edge sets; edges shared by two clusters are frozen.
    import itertools as _it

    def cluster_edges(cells):
        eset = {}
        for cell in cells:
            for ax in range(n):
                others = [x for x in range(n) if x != ax]
                for bits in _it.product((0, 1), repeat=len(others)):
                    a = cell.copy()
                    for o, b in zip(others, bits):
                        a[o] += b
                    ekey = int(_encode(a[None, :], base)[0]) * n + ax
                    eset[ekey] = (tuple(a), ax)
        return eset

    all_esets = [cluster_edges(np.array([decode[k] for k in comp], dtype=np.int64)) for comp in comps]
    edge_owner_count: dict[int, int] = {}
    for eset in all_esets:
        for k in eset:
            edge_owner_count[k] = edge_owner_count.get(k, 0) + 1
    shared_edge_keys = {k for k, c in edge_owner_count.items() if c > 1}

    clusters = []
    for comp, eset in zip(comps, all_esets):
        cells = np.array([decode[k] for k in comp], dtype=np.int64)
        frozen = boundary_edge_keys | shared_edge_keys
        edges = {k: v for k, v in sorted(eset.items()) if k not in frozen}
        if not edges:
            continue
        vset = {}
        for ekey, (a, ax) in edges.items():
            u = tuple(a)
            v = tuple(x + (1 if i == ax else 0) for i, x in enumerate(a))
            vset.setdefault(u, []).append((ekey, v))
            vset.setdefault(v, []).append((ekey, u))
        vkeys = sorted(vset)

        # Frontier: vertices incident to complex edges outside the cluster.
        frontier_set = set()
        for vk in vkeys:
            va = np.array(vk, dtype=np.int64)
            for ax in range(n):
                for dv in (-1, 0):
                    a = va.copy()
                    a[ax] += dv
                    if a[ax] < 0 or a[ax] >= top:
                        continue
                    ekey = int(_encode(a[None, :], base)[0]) * n + ax
                    if ekey in edges:
                        continue
                    found, _ = complex_edge_look.find(np.array([ekey]))
                    if found[0] or ekey in frozen:
                        frontier_set.add(vk)
                        break
                else:
                    continue
                break

        # Target: vertex incident to most seed cells; BF-direction tie-break.
        seed_set = {tuple(decode[k]) for k in comp if k in seed_keys}
        def seed_incidence(vk):
            va = np.array(vk)
            cnt = 0
            import itertools as _it
            for off in _it.product((-1, 0), repeat=n):
                cell = tuple(va + np.array(off))
                if cell in seed_set:
                    cnt += 1
            return cnt
        incid = {vk: seed_incidence(vk) for vk in vkeys}
        max_inc = max(incid.values())
        cand_targets = [vk for vk in vkeys if incid[vk] == max_inc and vk not in frontier_set]
        if not cand_targets:
            cand_targets = [vk for vk in vkeys if vk not in frontier_set] or vkeys
        if bf_dir is not None and len(cand_targets) > 1:
            proj = [float(np.dot(np.array(vk, float), bf_dir.ravel()[: len(vk)])) for vk in cand_targets]
            target = cand_targets[int(np.argmin(proj))]
        else:
            target = cand_targets[0]

        # BFS tree from target (lex neighbor order) and frontier gaps.
        index = {vk: i for i, vk in enumerate(vkeys)}
        V = len(vkeys)
        depth = np.full(V, np.inf)
        parent = np.full(V, -1, dtype=np.int64)
        from collections import deque

        dq = deque([target])
        depth[index[target]] = 0.0
        while dq:
            cur = dq.popleft()
            ci = index[cur]
            for ekey, nb in sorted(vset[cur]):
                ni = index[nb]
                if depth[ni] == np.inf:
                    depth[ni] = depth[ci] + h
                    parent[ni] = ci
                    dq.append(nb)
        gap = np.full(V, np.inf)
        dq = deque()
        for vk in sorted(frontier_set):
            gi = index[vk]
            gap[gi] = 0.0
            dq.append(vk)
        while dq:
            cur = dq.popleft()
            ci = index[cur]
            for ekey, nb in sorted(vset[cur]):
                ni = index[nb]
                if gap[ni] > gap[ci] + h:
                    gap[ni] = gap[ci] + h
                    dq.append(nb)
        if not np.isfinite(gap).any():
            gap[:] = 10 * h  # isolated cluster: everything collapses
        gap = np.where(np.isfinite(gap), gap, 10 * h)
        reachable = np.isfinite(depth)
        positions = corner[None, :] + np.array(vkeys, dtype=float) * h

        edge_items = sorted(edges.items())
        e_keys = np.array([k for k, _ in edge_items], dtype=np.int64)
        e_u = np.array([index[v[0]] for _, v in edge_items], dtype=np.int64)
        e_v = np.array(
            [index[tuple(x + (1 if i == v[1] else 0) for i, x in enumerate(v[0]))] for _, v in edge_items],
            dtype=np.int64,
        )
        keep = reachable[e_u] & reachable[e_v]
        clusters.append(
            {
                "vertex_keys": _encode(np.array(vkeys, dtype=np.int64), base),
                "positions": positions,
                "depth": np.where(reachable, depth, 0.0),
                "gap": gap,
                "parent": parent,
                "edge_keys": e_keys[keep],
                "edge_u": e_u[keep],
                "edge_v": e_v[keep],
                "target_anchor": np.array(target, dtype=np.int64),
                "cells": cells,
            }
        )
    return clusters


# ---------------------------------------------------------------------------
# Map assembly
# ---------------------------------------------------------------------------

def federer_fleming_map(
    E: WeightedCloud,
    root: RootCube,
    level: int,
    hits,
    m: int,
    config: MapConfig | None = None,
    seed: int = 0,
) -> tuple[PiecewiseMap, WeightedCloud]:
    """Build the grid projection map for E over the level-j complex of S.

    Radial stages run for face dimension d = n down to m+1 on faces meeting
    the interior of the cell union, with centers controlling the remainder
    part; the concentration stage then contracts the landed U-mass along
    the skeleton.  Returns the map and the pushforward cloud; diagnostics
    (per-cell remainder ratios, skeleton distances, containment checks) are
    attached to ``map.meta``.
    """
    config = config or MapConfig()
    complex_ = subdivide(root, level, hits)
    n = root.n
    if not 0 <= m <= n:
        raise ValueError("target dimension out of range")
    h = complex_.cell_side
    corner = root.corner_array
    top = 1 << level
    base = top + 2

    pmap = PiecewiseMap(stages=[], root=root, level=level, support_cells=complex_.cells,
                        meta={"m": m, "seed": seed})
    if len(complex_) == 0 or m == n:
        pmap.meta["trivial"] = True
        return pmap, E

    pts = np.array(E.points, dtype=float, copy=True)
    rel0 = (pts - corner[None, :]) / h
    origin_cell = np.clip(np.floor(rel0), 0, top - 1).astype(np.int64)
    cell_look = _KeyedLookup(_encode(complex_.cells, base))
    in_support, _ = cell_look.find(_encode(origin_cell, base))
    # Boundary-of-root guard: points outside the root cube are never inside.
    in_root = ((pts >= corner[None, :]) & (pts <= corner[None, :] + root.side)).all(axis=1)
    in_support &= in_root
    if in_support.any():
        per_cell = np.unique(_encode(origin_cell[in_support], base), return_counts=True)[1]
        if per_cell.max() > config.point_budget_per_cell:
            raise BudgetExceeded(
                f"a cell holds {per_cell.max()} points > budget "
                f"{config.point_budget_per_cell}; increase the level"
            )

    rho_min = config.rho_min_factor * h
    u_mask = E.u_mask()
    r_mask = ~u_mask
    bf_dir = None
    if u_mask.any():
        w_sub = E.select(u_mask)
        bf_dir = bf_direction_search(w_sub, config.direction_samples, seed)
        pmap.meta["bf_direction"] = [float(x) for x in np.ravel(bf_dir)]

    for d in range(n, m, -1):
        if d == n:
            anchors, spans = complex_.face_arrays(n)
        elif d == n - 1:
            anchors, spans = complex_.face_arrays(d)
            bd_a, bd_s = complex_.boundary_faces()
            bd_keys = set(map(int, _encode(bd_a, base) * n + np.argmax(bd_s, axis=1)))
            keys = _encode(anchors, base) * n + np.argmax(spans, axis=1)
            keep = np.array([int(k) not in bd_keys for k in keys], dtype=bool)
            anchors, spans = anchors[keep], spans[keep]
        else:
            anchors, spans = complex_.face_arrays(d)

        centers = corner[None, :] + anchors.astype(float) * h
        centers = centers + 0.5 * h * spans.astype(float)
        caps = np.full(len(anchors), h / 8.0)

        # Assign current points to strict face interiors of this dimension.
        rel = (pts - corner[None, :]) / h
        fl = np.floor(rel)
        onlat = rel == fl
        chosen: dict[str, list[float]] = {}
        if in_support.any():
            patterns = np.unique(spans, axis=0) if len(spans) else []
            for span in patterns:
                pmaskf = (spans == span[None, :]).all(axis=1)
                look = _KeyedLookup(_encode(anchors[pmaskf], base), np.flatnonzero(pmaskf))
                cand = in_support & ((~onlat) == span[None, :]).all(axis=1)
                if not cand.any():
                    continue
                anchor_pts = fl.copy()
                anchor_pts[:, ~span] = rel[:, ~span]
                keys_pts = _encode(anchor_pts[cand].astype(np.int64), base)
                found, idx = look.find(keys_pts)
                rows = np.flatnonzero(cand)[found]
                fidx = look.payload[idx[found]]
                span_idx = np.flatnonzero(span)
                for f in np.unique(fidx):
                    sel = rows[fidx == f]
                    e_local = pts[sel]
                    r_local = pts[sel][r_mask[sel]]
                    face_lo = corner + anchors[f].astype(float) * h
                    rng = np.random.default_rng(
                        (seed, level, d, int(_encode(anchors[f][None, :], base)[0]))
                    )
                    c, ratio, clear = choose_center(
                        face_lo, h, span_idx, e_local, r_local, m,
                        config.center_candidates, rng, rho_min,
                    )
                    centers[f] = c
                    caps[f] = min(h / 8.0, 0.99 * clear)
                    chosen[",".join(map(str, anchors[f]))] = [float(x) for x in c]
        stage = FaceRadialStage(root, level, d, anchors, spans, centers, rho_min, chosen, caps)
        pmap.stages.append(stage)
        pts = stage.apply(pts)

    if m == 1 and u_mask.any() and in_support.any():
        seeds = np.unique(origin_cell[u_mask & in_support], axis=0)
        clusters = _build_clusters(complex_, seeds, ring=1, bf_dir=bf_dir)
        if clusters:
            stage = SkeletonTransportStage(root, level, clusters, band=config.band_cells * h)
            pmap.stages.append(stage)
            pts = stage.apply(pts)
    elif m > 1 and u_mask.any():
        pmap.meta["w_collapse"] = "unsupported for m>1; radial stages only"

    image = E.with_points(pts)

    # Diagnostics: exact predicates on the cloud (certificates live upstream).
    diag: dict = {}
    if in_support.any():
        moved = pts[in_support]
        on_skel = _on_m_skeleton(complex_, m, moved, cell_look)
        if on_skel.all():
            diag["item2_max_dist"] = 0.0
        else:
            stray = moved[~on_skel]
            target_dist = skeleton_distance(complex_, m, stray)
            bd_a, bd_s = complex_.boundary_faces()
            if len(bd_a):
                lo_b = corner[None, :] + bd_a.astype(float) * h
                hi_b = lo_b + h * bd_s.astype(float)
                cl = np.clip(stray[:, None, :], lo_b[None], hi_b[None])
                dd = np.linalg.norm(stray[:, None, :] - cl, axis=2)
                target_dist = np.minimum(target_dist, dd.min(axis=1))
            diag["item2_max_dist"] = float(target_dist.max())
        cell_lo = corner[None, :] + origin_cell[in_support].astype(float) * h
        overflow = np.maximum(cell_lo - pts[in_support], pts[in_support] - (cell_lo + h))
        diag["item3_max_overflow"] = float(np.maximum(overflow, 0.0).max()) if in_support.any() else 0.0
        if (~in_support).any():
            diag["outside_max_move"] = float(
                np.linalg.norm(pts[~in_support] - E.points[~in_support], axis=1).max()
            )
    # Per-origin-cell remainder measure control (item 5 surrogate).
    ratios = []
    if r_mask.any() and in_support.any():
        sel = r_mask & in_support
        keys = _encode(origin_cell[sel], base)
        order = np.argsort(keys, kind="stable")
        keys_sorted = keys[order]
        rows = np.flatnonzero(sel)[order]
        delta_score = h / 8.0
        start = 0
        while start < len(keys_sorted):
            stop = start
            while stop < len(keys_sorted) and keys_sorted[stop] == keys_sorted[start]:
                stop += 1
            rws = rows[start:stop]
            before = _cover_count(E.points[rws], delta_score)
            after = _cover_count(pts[rws], delta_score)
            if before:
                ratios.append(after / before)
            start = stop
    diag["c_certificate"] = {
        "max_cell_ratio": float(max(ratios)) if ratios else 0.0,
        "bound": config.c_bound,
        "cells": len(ratios),
    }
    if u_mask.any():
        w_final = pts[u_mask]
        res = E.resolution
        scales = {"cell": h}
        if res > 0:
            scales["resolution4"] = 4.0 * res
        diag["w_collapse"] = {
            name: measure_at_scale(
                WeightedCloud(w_final, E.weights[u_mask], E.part[u_mask]), m, sc
            ).value
            for name, sc in scales.items()
        }
    pmap.meta["diagnostics"] = diag
    pmap.meta["complex_cells"] = int(len(complex_))
    return pmap, image


def _on_m_skeleton(complex_: CellComplex, m: int, pts: np.ndarray,
                   cell_look: _KeyedLookup) -> np.ndarray:
    """Exact membership of snapped points in the complex's m-skeleton.

    A point lies on S_{j,m} iff at least n-m coordinates sit exactly on the
    lattice and its minimal face belongs to some complex cell.
    """
    import itertools as _it

    n = complex_.n
    h = complex_.cell_side
    top = 1 << complex_.level
    base = top + 2
    corner = complex_.root.corner_array
    rel = (pts - corner[None, :]) / h
    fl = np.floor(rel)
    onlat = rel == fl
    ok_dim = (~onlat).sum(axis=1) <= m
    member = np.zeros(len(pts), dtype=bool)
    for bits in _it.product((0, -1), repeat=n):
        off = np.array(bits, dtype=np.int64)
        cells = fl.astype(np.int64) + off[None, :] * onlat
        valid = ok_dim & (cells >= 0).all(axis=1) & (cells < top).all(axis=1)
        if not valid.any():
            continue
        found, _ = cell_look.find(_encode(cells[valid], base))
        idx = np.flatnonzero(valid)
        member[idx[found]] = True
    return member & ok_dim


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj
