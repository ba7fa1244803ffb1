"""Top-level experiments: near-identity collapse maps and the
semicontinuity criterion separating rectifiable from unrectifiable clouds.

The collapse-map pipeline calibrates a mass tolerance from the target
epsilon, selects a disjoint ball system around the U-part, builds the grid
projection map over a cube containing the padded balls, and evaluates the
four conclusion certificates (sup-distance, locality, remainder-mass
control, U-mass collapse) with every inequality stored two-sided.

Measure surrogates for certificates are evaluated at the cloud's
resolution scale (4x point spacing): finer scales see only the finite
cloud, coarser ones cannot see the collapse.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConeConditionViolation, SelectionFailure
from .grid import RootCube
from .measure import BallSystem, find_ball_system, measure_at_scale
from .projections import (
    MapConfig,
    PiecewiseMap,
    federer_fleming_map,
    lipschitz_estimate,
)
from .setmodels import BallUnionOracle, CurveSpec, WeightedCloud, discretize_curve


def eval_scale(cloud: WeightedCloud) -> float:
    """Certificate evaluation scale: 4x the cloud's resolution."""
    res = cloud.resolution
    if res > 0:
        return 4.0 * res
    lo, hi = cloud.bbox()
    diag = float(np.linalg.norm(hi - lo))
    return max(diag / 256.0, 1e-9)


@dataclass(frozen=True)
class Certificate:
    name: str
    passed: bool
    lhs: float
    rhs: float
    detail: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        from .projections import _jsonable

        return {
            "name": self.name,
            "passed": self.passed,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "detail": _jsonable(self.detail),
        }


@dataclass
class PsiResult:
    map: PiecewiseMap
    image: WeightedCloud
    ball_system: BallSystem
    certificates: dict[str, Certificate]
    params: dict

    def all_passed(self) -> bool:
        return all(c.passed for c in self.certificates.values())

    def to_json(self) -> dict:
        from .projections import _jsonable

        return {
            "params": _jsonable(self.params),
            "certificates": {k: v.to_json() for k, v in sorted(self.certificates.items())},
            "ball_system": self.ball_system.to_json(),
            "map": self.map.to_json(),
        }


def _dyadic_cube_for(lo: np.ndarray, hi: np.ndarray, n: int) -> RootCube:
    """Smallest power-of-two cube containing [lo, hi].

    The corner snaps to coarse dyadic units (side / 16) so every cell
    boundary of every level >= 4 lies on the absolute dyadic lattice; this
    keeps the grid aligned with dyadically placed test sets.
    """
    span = float((hi - lo).max()) * (1.0 + 2.0**-8)
    side = 2.0 ** math.ceil(math.log2(max(span, 1e-9)))
    center = 0.5 * (lo + hi)
    for _ in range(3):
        unit = side / 2.0**4
        corner = np.floor((center - side / 2.0) / unit) * unit
        if ((corner + side) >= hi).all() and (corner <= lo).all():
            return RootCube(tuple(float(c) for c in corner), float(side), n)
        side *= 2.0
    return RootCube(tuple(float(c) for c in corner), float(side), n)


def build_psi_epsilon(
    E: WeightedCloud,
    epsilon: float,
    m: int = 1,
    config: MapConfig | None = None,
    seed: int = 0,
    probe_count: int = 10_000,
) -> PsiResult:
    """Near-identity map collapsing the U-part of E, with certificates.

    Pipeline: mass tolerance delta = eps / (1 + 2 C H(E) + C); greedy ball
    system around the U-part with radii capped near the cloud resolution
    (the cap keeps the support inside the eps-neighborhood of U); root cube
    over the padded balls; grid level from the sup-distance budget; grid
    projection map with the covered U-points treated as the collapsing part
    and everything else as remainder.

    A failed certificate is returned flagged, never silently dropped.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    config = config or MapConfig()
    u_mask = E.u_mask()
    if not u_mask.any():
        raise SelectionFailure("cloud has an empty U part: nothing to collapse")
    n = E.n
    scale = eval_scale(E)
    h_est_e = measure_at_scale(E, m, scale).value
    delta = epsilon / (1.0 + 2.0 * config.c_bound * h_est_e + config.c_bound)

    res = E.resolution
    cap_res = 4.0 * res if res > 0 else epsilon / 4.0
    r_cap_target = min(epsilon / 4.0, cap_res)
    t_cap = max(0, math.ceil(-math.log(r_cap_target, 4.0) - 1e-12))
    r_cap = 4.0**-t_cap

    balls = find_ball_system(E, delta, m=m, r_max=r_cap)

    # Covered U-points collapse; residual U-points and the R-part are
    # remainder for the map (their image mass is controlled, not nulled).
    d_to_ball = _min_gap_to_balls(E.points, balls.centers, balls.radii)
    w_mask = u_mask & (d_to_ball <= 0.0)
    part = np.where(w_mask, "U", "R")
    e_work = WeightedCloud(E.points, E.weights, part, dict(E.metadata))

    pad = balls.radii + balls.eta
    lo = (balls.centers - pad[:, None]).min(axis=0)
    hi = (balls.centers + pad[:, None]).max(axis=0)
    root = _dyadic_cube_for(lo, hi, n)

    # Level from the sup-distance budget: radial (h sqrt n) plus skeleton
    # transport (cluster radius) stays under epsilon at h <= eps / 5.
    h_target = epsilon / 5.0
    level = max(1, math.ceil(math.log2(root.side / h_target)))
    h = root.cell_side(level)

    ring_pad = config.ring_pad_cells * h * math.sqrt(n)
    s_oracle = BallUnionOracle(balls.centers, balls.radii + balls.eta / 2.0 + ring_pad)
    pmap, image = federer_fleming_map(e_work, root, level, s_oracle, m, config, seed)

    # upper4 diagnostic: is the cell union inside the padded balls?
    pmap.meta["upper4_cells_in_padded_balls"] = _cells_inside_balls(
        pmap, balls.centers, balls.radii + balls.eta
    )

    certificates: dict[str, Certificate] = {}
    rng = np.random.default_rng((seed, 7))
    probes = root.corner_array + rng.random((probe_count, n)) * root.side
    probe_img = pmap.apply_points(probes)
    cloud_move = np.linalg.norm(image.points - E.points, axis=1)
    probe_move = np.linalg.norm(probe_img - probes, axis=1)
    sup_dist = float(max(cloud_move.max(initial=0.0), probe_move.max(initial=0.0)))
    certificates["c1_sup_distance"] = Certificate(
        "c1_sup_distance", sup_dist < epsilon, sup_dist, epsilon,
        {"cloud_max": float(cloud_move.max(initial=0.0)),
         "probe_max": float(probe_move.max(initial=0.0))},
    )

    u_points = E.points[u_mask]
    far_probe = _min_dist_to(probes, u_points) > epsilon
    probe_viol = float(probe_move[far_probe].max(initial=0.0))
    far_cloud = _min_dist_to(E.points, u_points) > epsilon
    cloud_viol = float(cloud_move[far_cloud].max(initial=0.0))
    viol = max(probe_viol, cloud_viol)
    certificates["c2_identity_far_from_u"] = Certificate(
        "c2_identity_far_from_u", viol == 0.0, viol, 0.0,
        {"far_probes": int(far_probe.sum()), "far_cloud_points": int(far_cloud.sum())},
    )

    r_orig = ~u_mask
    if r_orig.any():
        before = measure_at_scale(E.select(r_orig), m, scale).value
        after = measure_at_scale(image.select(r_orig), m, scale).value
    else:
        before = after = 0.0
    certificates["c3_remainder_mass"] = Certificate(
        "c3_remainder_mass", after < before + epsilon, after, before + epsilon,
        {"before": before, "scale": scale},
    )

    u_after = measure_at_scale(image.select(u_mask), m, scale).value
    certificates["c4_u_collapse"] = Certificate(
        "c4_u_collapse", u_after < epsilon, u_after, epsilon, {"scale": scale}
    )

    lip = lipschitz_estimate(pmap, config.lip_pairs, (seed, 11))
    pmap.meta["lipschitz_cert"] = {"value": lip, "pairs": config.lip_pairs}

    h_img = measure_at_scale(image, m, scale).value
    h_u = measure_at_scale(E.select(u_mask), m, scale).value
    params = {
        "epsilon": epsilon,
        "delta": delta,
        "m": m,
        "level": level,
        "cell_side": h,
        "root": {"corner": list(root.corner), "side": root.side},
        "eval_scale": scale,
        "c_bound": config.c_bound,
        "r_cap": r_cap,
        "seed": seed,
        "h_est_E": h_est_e,
        "h_est_U": h_u,
        "h_est_image": h_img,
        "sup_distance": sup_dist,
        "lipschitz": lip,
        "collapse_consequence": {
            "applies": epsilon < h_u / 4.0,
            "lhs_image": h_img,
            "rhs": h_est_e - h_u / 2.0,
        },
    }
    return PsiResult(pmap, image, balls, certificates, params)


def _min_gap_to_balls(points: np.ndarray, centers: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """min_k (|p - c_k| - r_k), grouped per distinct radius."""
    out = np.full(len(points), np.inf)
    for r in np.unique(radii):
        d, _ = cKDTree(centers[radii == r]).query(points)
        out = np.minimum(out, d - r)
    return out


def _min_dist_to(points: np.ndarray, targets: np.ndarray) -> np.ndarray:
    if len(targets) == 0:
        return np.full(len(points), np.inf)
    d, _ = cKDTree(targets).query(points)
    return d


def _cells_inside_balls(pmap: PiecewiseMap, centers: np.ndarray, radii: np.ndarray) -> dict:
    if pmap.root is None or pmap.support_cells is None or not len(pmap.support_cells):
        return {"ok": True, "max_overflow": 0.0}
    h = pmap.root.cell_side(pmap.level)
    lo = pmap.root.corner_array[None, :] + pmap.support_cells.astype(float) * h
    overflow = np.full(len(lo), np.inf)
    for c, r in zip(centers, radii):
        far = np.maximum(np.abs(lo - c[None, :]), np.abs(lo + h - c[None, :]))
        overflow = np.minimum(overflow, np.linalg.norm(far, axis=1) - r)
    worst = float(overflow.max())
    return {"ok": bool(worst <= 0.0), "max_overflow": worst}


# ---------------------------------------------------------------------------
# Semicontinuity criterion
# ---------------------------------------------------------------------------

@dataclass
class PerturbationSequence:
    maps: list[PiecewiseMap]
    sup_distances: list[float]
    lip_bounds: list[float]
    measures: list[float]
    lip_bound_declared: float

    def __post_init__(self):
        sups = self.sup_distances
        if any(b > a for a, b in zip(sups, sups[1:])):
            raise ValueError("sup distances must be non-increasing toward 0")

    @classmethod
    def from_maps(
        cls,
        maps: list[PiecewiseMap],
        E: WeightedCloud,
        m: int = 1,
        scale: float | None = None,
        lip_pairs: int = 2048,
        seed: int = 0,
        lip_bound_declared: float | None = None,
    ) -> "PerturbationSequence":
        scale = scale or eval_scale(E)
        sups, lips, meas = [], [], []
        lo, hi = E.bbox()
        for i, mp in enumerate(maps):
            img = mp.apply(E)
            sups.append(float(np.linalg.norm(img.points - E.points, axis=1).max(initial=0.0)))
            lips.append(lipschitz_estimate(mp, lip_pairs, (seed, i), domain=(lo, hi)))
            meas.append(measure_at_scale(img, m, scale).value)
        declared = lip_bound_declared if lip_bound_declared is not None else (
            max(lips) * 1.0001 if lips else 1.0
        )
        return cls(maps, sups, lips, meas, declared)


@dataclass(frozen=True)
class Verdict:
    kind: str  # rectifiable-consistent | unrectifiable-witness | inconclusive
    evidence: dict

    def to_json(self) -> dict:
        from .projections import _jsonable

        return {"kind": self.kind, "evidence": _jsonable(self.evidence)}


def semicontinuity_test(
    E: WeightedCloud,
    seq: PerturbationSequence,
    tol: float | None = None,
    m: int = 1,
    allow_unbounded_lipschitz: bool = False,
) -> Verdict:
    """Accept/reject criterion over a finite perturbation sequence.

    liminf over the finite sequence is read as the min over the certified
    tail (last third).  A witness requires every tail measure at least
    ``eta`` below the cloud measure with ``eta`` above tolerance, achieved
    with certified Lipschitz bounds and vanishing sup-distances.

    The reference measure of E is its weight sum: the weights carry the
    measure by construction, and using the dyadic cover of E here would
    bias the comparison (covers inflate diagonal sets by up to sqrt(n)**m
    while skeleton-aligned images are not inflated).  Image measures must
    use covers -- pushforwards preserve weights, so only a cover can see a
    collapse.
    """
    scale = eval_scale(E)
    h_e = E.total_weight
    if tol is None:
        tol = 0.05 * h_e
    if not seq.maps:
        return Verdict("inconclusive", {"reason": "empty sequence", "h_est_E": h_e})
    k = len(seq.measures)
    tail_start = k - max(1, math.ceil(k / 3))
    tail = seq.measures[tail_start:]
    lips_ok = all(l <= seq.lip_bound_declared for l in seq.lip_bounds)
    evidence = {
        "h_est_E": h_e,
        "scale": scale,
        "tol": tol,
        "measures": seq.measures,
        "tail_measures": tail,
        "tail_min": min(tail),
        "sup_distances": seq.sup_distances,
        "lip_bounds": seq.lip_bounds,
        "lip_bound_declared": seq.lip_bound_declared,
    }
    eta = h_e - max(tail)
    if eta > tol:
        if lips_ok or allow_unbounded_lipschitz:
            evidence["eta"] = eta
            return Verdict("unrectifiable-witness", evidence)
        evidence["reason"] = "measure drop without certified Lipschitz bound"
        return Verdict("inconclusive", evidence)
    if min(tail) >= h_e - tol:
        return Verdict("rectifiable-consistent", evidence)
    return Verdict("inconclusive", evidence)


# ---------------------------------------------------------------------------
# Tangent shadow diagnostic
# ---------------------------------------------------------------------------

def tangent_shadow_check(
    curve: CurveSpec,
    psi: PiecewiseMap,
    x,
    r: float,
    aperture: float,
    step_factor: float = 1e-3,
) -> bool:
    """Projected image of the perturbed curve near x covers the tangent disc.

    Projects psi(curve points) inside B(x, r) onto the tangent line at x
    and requires the 1D cover of the shadow to fill B(x, (1-aperture) r)
    with no gap beyond the discretization step.
    """
    x = np.asarray(x, dtype=float)
    v = curve.vertex_array()
    closed = bool(np.allclose(v[0], v[-1]))
    if not closed:
        end_d = min(np.linalg.norm(v[0] - x), np.linalg.norm(v[-1] - x))
        if not end_d > 2.0 * r:
            raise ConeConditionViolation(
                f"probe point within 2r of a curve endpoint (dist {end_d:.3e})"
            )
    step = r * step_factor
    cloud = discretize_curve(curve, step)
    pts = cloud.points
    d_x = np.linalg.norm(pts - x[None, :], axis=1)
    i0 = int(np.argmin(d_x))
    lo_i, hi_i = max(0, i0 - 1), min(len(pts) - 1, i0 + 1)
    tangent = pts[hi_i] - pts[lo_i]
    norm = np.linalg.norm(tangent)
    if norm == 0:
        raise ConeConditionViolation("degenerate tangent at probe point")
    tangent = tangent / norm

    near = d_x <= 2.0 * r
    rel = pts[near] - x[None, :]
    along = rel @ tangent
    perp = np.linalg.norm(rel - along[:, None] * tangent[None, :], axis=1)
    if not (perp <= aperture * np.maximum(d_x[near], 1e-300)).all():
        raise ConeConditionViolation(
            f"curve leaves the aperture-{aperture} cone within B(x, 2r)"
        )

    img = psi.apply_points(pts)
    keep = np.linalg.norm(img - x[None, :], axis=1) <= r
    if not keep.any():
        return False
    shadow = (img[keep] - x[None, :]) @ tangent
    target = (1.0 - aperture) * r
    inside = np.sort(np.clip(shadow, -target, target))
    samples = np.concatenate([[-target], inside, [target]])
    max_gap = float(np.diff(samples).max())
    return max_gap <= max(2.0 * step, 2.0 * r * step_factor) + 1e-12


# ---------------------------------------------------------------------------
# Semi-regularity estimation
# ---------------------------------------------------------------------------

def semi_regularity_estimate(
    E: WeightedCloud,
    scale_pairs: list[tuple[float, float]],
    sample_centers: int,
    seed,
    m: int = 1,
) -> tuple[float, list[dict]]:
    """Greedy-net covering statistic: max over centers of count * r^m / R^m.

    For each sampled center (drawn from the cloud) and pair (r, R), counts
    a greedy r-net of the cloud within B(center, R).
    """
    for r, big_r in scale_pairs:
        if not 0 < r <= big_r:
            raise ValueError("scale pairs must satisfy 0 < r <= R")
    if len(E) == 0:
        return 0.0, [{"r": r, "R": big_r, "max_stat": 0.0} for r, big_r in scale_pairs]
    rng = np.random.default_rng(seed)
    count = min(sample_centers, len(E))
    chosen = rng.choice(len(E), size=count, replace=False) if count < len(E) else np.arange(len(E))
    table = []
    overall = 0.0
    for r, big_r in scale_pairs:
        worst = 0.0
        for ci in chosen:
            center = E.points[ci]
            d = np.linalg.norm(E.points - center[None, :], axis=1)
            local = E.points[d <= big_r]
            net = _greedy_net_count(local, r)
            stat = net * r**m / big_r**m
            worst = max(worst, stat)
        table.append({"r": float(r), "R": float(big_r), "max_stat": worst})
        overall = max(overall, worst)
    return overall, table


def _greedy_net_count(points: np.ndarray, r: float) -> int:
    alive = np.arange(len(points))
    r2 = r * r
    count = 0
    while len(alive):
        p = points[alive[0]]
        count += 1
        d2 = ((points[alive] - p[None, :]) ** 2).sum(axis=1)
        alive = alive[d2 > r2]
    return count
