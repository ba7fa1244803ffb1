"""Hausdorff measure surrogates at a fixed scale and disjoint ball systems.

The premeasure surrogate covers a cloud with cells of the absolute dyadic
grid (side ``2**-j`` anchored at the origin) and sums ``diam**m`` over
occupied cells.  The level is the coarsest with cell side <= the requested
scale; occupancy uses half-open binning so a cloud on a grid line is not
double counted.  Dyadic covers over-estimate optimal convex covers by at
most ``n**(m/2)`` but are exactly reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import ResolutionLimit, SelectionFailure
from .setmodels import WeightedCloud

MAX_COVER_LEVEL = 48

# Lebesgue measure of the unit m-ball, used by the tangent-shadow diagnostic.
UNIT_BALL_MEASURE = {0: 1.0, 1: 2.0, 2: math.pi}


@dataclass(frozen=True)
class MeasureEstimate:
    """A measure value at scale ``scale`` with its cross-check bracket."""

    value: float
    scale: float
    method: str
    bracket: tuple[float, float]
    level: int = 0
    occupied: int = 0

    def to_json(self) -> dict:
        return {
            "value": self.value,
            "scale": self.scale,
            "method": self.method,
            "bracket": list(self.bracket),
            "level": self.level,
            "occupied": self.occupied,
        }


def cover_level(delta: float) -> int:
    """Coarsest dyadic level whose cell side is <= delta."""
    if delta <= 0:
        raise ValueError("scale must be positive")
    level = max(0, int(math.ceil(-math.log2(delta) - 1e-12)))
    if level > MAX_COVER_LEVEL:
        raise ResolutionLimit(
            f"scale {delta:.3e} needs dyadic level {level} > {MAX_COVER_LEVEL}"
        )
    return level


def occupied_cells(points: np.ndarray, level: int) -> np.ndarray:
    """Distinct half-open dyadic cells of the absolute grid meeting the points."""
    h = 2.0**-level
    idx = np.floor(np.asarray(points, dtype=float) / h).astype(np.int64)
    return np.unique(idx, axis=0)


def measure_at_scale(cloud: WeightedCloud, m: int, delta: float) -> MeasureEstimate:
    """Dyadic-cover premeasure of the cloud at scale ``delta``.

    value = (#occupied cells) * (cell diam)**m; the bracket records the
    weight-sum method value as a cross-check.
    """
    level = cover_level(delta)
    if len(cloud) == 0:
        return MeasureEstimate(0.0, delta, "dyadic-cover", (0.0, 0.0), level, 0)
    cells = occupied_cells(cloud.points, level)
    diam = 2.0**-level * math.sqrt(cloud.n)
    value = len(cells) * diam**m
    wsum = cloud.total_weight
    bracket = (min(value, wsum), max(value, wsum))
    return MeasureEstimate(value, delta, "dyadic-cover", bracket, level, len(cells))


def density(cloud: WeightedCloud, point, s: float, r: float) -> float:
    """(weight in the closed ball B(point, r)) / (2r)**s."""
    if r <= 0:
        raise ValueError("radius must be positive")
    if len(cloud) == 0:
        return 0.0
    d = np.linalg.norm(cloud.points - np.asarray(point, dtype=float)[None, :], axis=1)
    return float(cloud.weights[d <= r].sum()) / (2.0 * r) ** s


def _weight_in_ball(points, weights, center, r):
    d = np.linalg.norm(points - center[None, :], axis=1)
    return float(weights[d <= r].sum())


@dataclass
class BallSystem:
    """Disjoint balls centered on U-points with stored selection inequalities."""

    centers: np.ndarray
    radii: np.ndarray
    eta: float
    delta: float
    m: int
    inequalities: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.radii)

    @property
    def r_min(self) -> float:
        return float(self.radii.min()) if len(self.radii) else 0.0

    @property
    def r_max(self) -> float:
        return float(self.radii.max()) if len(self.radii) else 0.0

    def all_ok(self) -> bool:
        return all(v.get("ok", False) for v in self.inequalities.values())

    def to_json(self) -> dict:
        ineq = {}
        for name, rec in sorted(self.inequalities.items()):
            out = {}
            for key, val in rec.items():
                if isinstance(val, np.ndarray):
                    out[key] = [float(x) for x in val]
                elif isinstance(val, (np.floating, np.integer)):
                    out[key] = float(val)
                else:
                    out[key] = val
            ineq[name] = out
        return {
            "centers": [list(map(float, c)) for c in self.centers],
            "radii": [float(r) for r in self.radii],
            "eta": self.eta,
            "delta": self.delta,
            "m": self.m,
            "inequalities": ineq,
        }


def find_ball_system(
    cloud: WeightedCloud,
    delta: float,
    m: int = 1,
    r_max: float = 1.0,
    t_levels: int = 26,
) -> BallSystem:
    """Greedy Vitali-type selection of disjoint balls around the U-part.

    Radii are drawn from powers of 1/4 (aligned with the IFS structure of
    the test sets), scanned in decreasing order; a ball is accepted iff it
    is disjoint from all accepted balls, its remainder-mass bound holds
    (R-weight < delta * r**m) and its mass lower bound holds
    (r**m / 2 < U-weight).  The scan stops once the U-weight left outside
    the accepted balls drops below delta.  The padding ``eta`` is then the
    largest value in {r_min * 2**k, k integer} keeping the padded balls
    pairwise disjoint and the annulus mass below delta.
    """
    if delta <= 0:
        raise ValueError("tolerance must be positive")
    u_mask = cloud.u_mask()
    u_total = float(cloud.weights[u_mask].sum())
    if u_total == 0.0:
        raise SelectionFailure("cloud has an empty U part: nothing to cover")
    pts, wts = cloud.points, cloud.weights
    u_idx = np.flatnonzero(u_mask)
    u_pts = pts[u_idx]
    r_wts = np.where(u_mask, 0.0, wts)
    u_wts = np.where(u_mask, wts, 0.0)

    t0 = max(0, int(math.ceil(-math.log(r_max, 4.0) - 1e-12)))
    radii_levels = [4.0 ** -(t0 + t) for t in range(t_levels)]

    cap = 256
    buf_c = np.empty((cap, cloud.n))
    buf_r = np.empty(cap)
    n_acc = 0
    acc_lhs1: list[float] = []
    acc_rhs2: list[float] = []
    covered = np.zeros(len(pts), dtype=bool)
    residual = float(u_wts.sum())
    tree = cKDTree(pts)

    done = residual < delta
    for r in radii_levels:
        if done:
            break
        rm = r**m
        open_idx = u_idx[~covered[u_idx]]
        if len(open_idx) == 0:
            continue
        # Ball memberships are coverage-independent: batch them per level.
        nbr_lists = tree.query_ball_point(pts[open_idx], r)
        for i, nbrs in zip(open_idx, nbr_lists):
            if covered[i]:
                continue
            nbrs = np.asarray(nbrs, dtype=np.int64)
            lhs1 = float(r_wts[nbrs].sum())
            if not lhs1 < delta * rm:
                continue
            rhs2 = float(u_wts[nbrs].sum())
            if not rm / 2.0 < rhs2:
                continue
            x = pts[i]
            if n_acc:
                diff = buf_c[:n_acc] - x[None, :]
                gap2 = (diff * diff).sum(axis=1)
                lim = buf_r[:n_acc] + r
                if not (gap2 > lim * lim).all():
                    continue
            if n_acc == cap:
                cap *= 2
                buf_c = np.concatenate([buf_c, np.empty_like(buf_c)], axis=0)
                buf_r = np.concatenate([buf_r, np.empty_like(buf_r)])
            buf_c[n_acc] = x
            buf_r[n_acc] = r
            n_acc += 1
            acc_lhs1.append(lhs1)
            acc_rhs2.append(rhs2)
            fresh = nbrs[~covered[nbrs]]
            residual -= float(u_wts[fresh].sum())
            covered[nbrs] = True
            if residual < delta:
                done = True
                break

    res = float(u_wts[~covered].sum())
    if not res < delta:
        raise SelectionFailure(
            "no admissible ball system within the radius budget",
            detail={
                "inequality": "upper0",
                "lhs_residual": res,
                "rhs_delta": delta,
                "accepted": len(acc_r),
                "r_levels": [radii_levels[0], radii_levels[-1]],
            },
        )

    centers = buf_c[:n_acc].copy()
    radii = buf_r[:n_acc].copy()
    r_min = float(radii.min())

    # Smallest pairwise slack |x_a-x_b| - r_a - r_b, chunked over pairs.
    if len(radii) > 1:
        min_slack = np.inf
        c2 = (centers**2).sum(axis=1)
        step = max(1, int(40_000_000 / len(radii)))
        for s in range(0, len(radii), step):
            d2 = (
                c2[s : s + step, None]
                + c2[None, :]
                - 2.0 * centers[s : s + step] @ centers.T
            )
            gap = np.sqrt(np.maximum(d2, 0.0)) - (radii[s : s + step, None] + radii[None, :])
            rows = np.arange(s, min(s + step, len(radii)))
            gap[np.arange(len(rows)), rows] = np.inf
            min_slack = min(min_slack, float(gap.min()))
        slack = np.array([min_slack])
    else:
        slack = np.array([np.inf])

    # Annulus mass as a function of eta, from each point's gap to its balls.
    # Padded balls stay disjoint, so each point sits in at most one annulus.
    point_gap = np.full(len(pts), np.inf)
    in_some_ball = covered.copy()
    for r in np.unique(radii):
        group = cKDTree(centers[radii == r])
        d, _ = group.query(pts)
        point_gap = np.minimum(point_gap, np.where(d > r, d - r, np.inf))

    eta = 0.0
    annulus_sum = 0.0
    for k in range(20, -40, -1):
        cand = r_min * 2.0**k
        if not (slack > 2.0 * cand).all():
            continue
        ann = float(wts[(~in_some_ball) & (point_gap <= cand)].sum())
        if ann < delta:
            eta = cand
            annulus_sum = ann
            break
    if eta == 0.0:
        raise SelectionFailure(
            "no admissible padding eta found",
            detail={"inequality": "upper3", "r_min": r_min, "delta": delta},
        )

    lhs1 = np.asarray(acc_lhs1)
    rhs1 = delta * radii**m
    lhs2 = radii**m / 2.0
    rhs2 = np.asarray(acc_rhs2)
    total = cloud.total_weight
    inequalities = {
        "upper0_residual": {"lhs": res, "rhs": delta, "ok": bool(res < delta)},
        "upper1_remainder_mass": {
            "lhs": lhs1,
            "rhs": rhs1,
            "ok": bool((lhs1 < rhs1).all()),
        },
        "upper2_mass_lower": {
            "lhs": lhs2,
            "rhs": rhs2,
            "ok": bool((lhs2 < rhs2).all()),
        },
        "upper2_5_remainder_total": {
            "lhs": float(lhs1.sum()),
            "rhs": 2.0 * delta * total,
            "ok": bool(lhs1.sum() < 2.0 * delta * total),
        },
        "upper3_annulus": {"lhs": annulus_sum, "rhs": delta, "ok": bool(annulus_sum < delta)},
        "padded_disjoint": {
            "min_slack": float(slack.min()) if np.isfinite(slack.min()) else None,
            "eta": eta,
            "ok": bool(len(radii) < 2 or (slack > 2.0 * eta).all()),
        },
    }
    return BallSystem(centers, radii, eta, delta, m, inequalities)
