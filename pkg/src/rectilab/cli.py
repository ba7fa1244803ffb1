"""Experiment orchestration CLI.

    rectilab run <experiment> --config cfg.json [--seed N] [--out DIR] [--svg]

Experiments: grid | shadow | ffmap | psi | rectify | semireg.  The report
is a single JSON document with every default echoed back; clouds are
dumped as CSV next to it.  Exit status 0 iff all certificates pass.
All outputs are written atomically after the run succeeds, so a failed or
malformed run leaves no partial files.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import setmodels
from .errors import ToolkitError, ValidationError
from .grid import EverythingOracle, RootCube, subdivide
from .lab import (
    PerturbationSequence,
    build_psi_epsilon,
    eval_scale,
    semi_regularity_estimate,
    semicontinuity_test,
)
from .measure import measure_at_scale
from .projections import (
    MapConfig,
    bf_direction_search,
    federer_fleming_map,
    sample_directions,
    shadow_measure,
    translation_map,
    _jsonable,
)
from .report import canonical_json, make_report, write_atomic
from .setmodels import (
    CurveSpec,
    IFSSpec,
    Similarity,
    WeightedCloud,
    circle_polyline,
    discretize_curve,
    four_corner_ifs,
    generate_prefractal,
    mix,
    read_cloud_csv,
    segment_polyline,
    write_cloud_csv,
)

log = logging.getLogger("rectilab")

EXPERIMENTS = ("grid", "shadow", "ffmap", "psi", "rectify", "semireg")

DEFAULTS = {
    "c_bound": 20.0,
    "rho_min_factor": 1e-3,
    "center_candidates": 64,
    "direction_samples": 100,
    "lip_pairs": 4096,
    "band_cells": 1.0,
    "ring_pad_cells": 1.5,
    "m": 1,
}


def build_cloud(spec: dict) -> WeightedCloud:
    kind = spec.get("kind")
    if kind == "four_corner":
        return generate_prefractal(four_corner_ifs(), int(spec["depth"]))
    if kind == "ifs":
        maps = tuple(
            Similarity(
                float(mp["ratio"]),
                tuple(map(float, mp["shift"])),
                tuple(map(tuple, mp["rotation"])) if mp.get("rotation") else None,
            )
            for mp in spec["maps"]
        )
        ifs = IFSSpec(maps, m=int(spec.get("m", 1)),
                      open_set_condition=bool(spec.get("open_set_condition", True)))
        return generate_prefractal(ifs, int(spec["depth"]))
    if kind == "circle":
        curve = circle_polyline(
            tuple(map(float, spec.get("center", (0.5, 0.5)))),
            float(spec.get("radius", 0.35)),
            int(spec.get("segments", 360)),
        )
        return discretize_curve(curve, float(spec.get("step", 0.01)))
    if kind == "segment":
        curve = segment_polyline(
            tuple(map(float, spec.get("a", (0.0, 0.0)))),
            tuple(map(float, spec.get("b", (1.0, 0.0)))),
        )
        return discretize_curve(curve, float(spec.get("step", 0.01)))
    if kind == "csv":
        return read_cloud_csv(spec["path"])
    if kind == "mix":
        parts = [build_cloud(s) for s in spec["parts"]]
        out = parts[0]
        for p in parts[1:]:
            out = mix(out, p)
        return out
    raise ValidationError(f"unknown set model kind: {kind!r}")


def _cloud_doc(cloud: WeightedCloud) -> dict:
    return {
        "points": [[float(x) for x in p] for p in cloud.points],
        "weights": [float(w) for w in cloud.weights],
        "part": list(cloud.part),
        "total_weight": cloud.total_weight,
        "resolution": cloud.resolution,
    }


def _map_config(cfg: dict) -> MapConfig:
    return MapConfig(
        c_bound=cfg["c_bound"],
        rho_min_factor=cfg["rho_min_factor"],
        center_candidates=cfg["center_candidates"],
        direction_samples=cfg["direction_samples"],
        lip_pairs=cfg["lip_pairs"],
        band_cells=cfg["band_cells"],
        ring_pad_cells=cfg["ring_pad_cells"],
    )


def _require(cfg: dict, keys: list[str], experiment: str) -> None:
    missing = [k for k in keys if k not in cfg]
    if missing:
        raise ValidationError(f"{experiment} config missing keys: {missing}")


def _root_from(cfg: dict, cloud: WeightedCloud | None) -> RootCube:
    doc = cfg.get("root")
    if doc is not None:
        return RootCube(tuple(map(float, doc["corner"])), float(doc["side"]),
                        int(doc.get("n", len(doc["corner"]))))
    if cloud is None or len(cloud) == 0:
        return RootCube((0.0, 0.0), 1.0, 2)
    lo, hi = cloud.bbox()
    from .lab import _dyadic_cube_for

    return _dyadic_cube_for(lo, hi, cloud.n)


def run_grid(cfg: dict, seed: int) -> dict:
    _require(cfg, ["level"], "grid")
    cloud = build_cloud(cfg["set"]) if "set" in cfg else None
    root = _root_from(cfg, cloud)
    level = int(cfg["level"])
    if cloud is not None and cfg.get("oracle", "everything") == "neighborhood":
        pad = float(cfg.get("pad", root.cell_side(level)))
        oracle = setmodels.PointNeighborhoodOracle(cloud.points, pad)
    else:
        oracle = EverythingOracle()
    cx = subdivide(root, level, oracle)
    face_counts = {str(d): int(len(cx.face_arrays(d)[0])) for d in range(root.n + 1)}
    results = {
        "complex": cx.to_json(),
        "cells": len(cx),
        "face_counts": face_counts,
    }
    if cloud is not None:
        results["cloud_before"] = _cloud_doc(cloud)
    certs = [{"name": "grid_nonempty", "passed": len(cx) > 0,
              "lhs": float(len(cx)), "rhs": 1.0}]
    return make_report("grid", cfg, seed, results, certs, all(c["passed"] for c in certs))


def run_shadow(cfg: dict, seed: int) -> dict:
    _require(cfg, ["set"], "shadow")
    cloud = build_cloud(cfg["set"])
    samples = int(cfg.get("direction_samples", DEFAULTS["direction_samples"]))
    scale = float(cfg.get("scale", eval_scale(cloud)))
    frames = sample_directions(cloud.n, int(cfg.get("m", 1)), samples, seed)
    table = []
    for i, fr in enumerate(frames):
        est = shadow_measure(cloud, fr, scale)
        table.append({"index": i, "frame": [[float(x) for x in row] for row in fr],
                      "value": est.value})
    values = [row["value"] for row in table]
    best = int(np.argmin(values))
    results = {
        "cloud_before": _cloud_doc(cloud),
        "shadow_table": table,
        "scale": scale,
        "median": float(np.median(values)),
        "best_index": best,
        "best_value": values[best],
    }
    certs = [{"name": "minimizer_no_worse_than_axes",
              "passed": values[best] <= min(values[: cloud.n]) + 1e-15,
              "lhs": values[best], "rhs": min(values[: cloud.n])}]
    return make_report("shadow", cfg, seed, results, certs, all(c["passed"] for c in certs))


def run_ffmap(cfg: dict, seed: int) -> dict:
    _require(cfg, ["set", "level"], "ffmap")
    cloud = build_cloud(cfg["set"])
    root = _root_from(cfg, cloud)
    level = int(cfg["level"])
    m = int(cfg.get("m", DEFAULTS["m"]))
    mconfig = _map_config(cfg)
    oracle = EverythingOracle()
    if cfg.get("oracle") == "neighborhood":
        pad = float(cfg.get("pad", 1.5 * root.cell_side(level)))
        oracle = setmodels.PointNeighborhoodOracle(cloud.points, pad)
    pmap, image = federer_fleming_map(cloud, root, level, oracle, m, mconfig, seed)
    diag = pmap.meta.get("diagnostics", {})
    h = root.cell_side(level)
    certs = [
        {"name": "item2_on_target_skeleton", "passed": diag.get("item2_max_dist", 0.0) <= 1e-9 * h,
         "lhs": diag.get("item2_max_dist", 0.0), "rhs": 1e-9 * h},
        {"name": "item3_cube_containment", "passed": diag.get("item3_max_overflow", 0.0) <= 1e-9 * h,
         "lhs": diag.get("item3_max_overflow", 0.0), "rhs": 1e-9 * h},
        {"name": "item5_remainder_ratio",
         "passed": diag.get("c_certificate", {}).get("max_cell_ratio", 0.0) <= mconfig.c_bound,
         "lhs": diag.get("c_certificate", {}).get("max_cell_ratio", 0.0), "rhs": mconfig.c_bound},
    ]
    results = {
        "cloud_before": _cloud_doc(cloud),
        "cloud_after": _cloud_doc(image),
        "map": pmap.to_json(),
        "complex": {"root": {"corner": list(root.corner), "side": root.side, "n": root.n},
                    "level": level,
                    "cells": [list(map(int, c)) for c in (pmap.support_cells if pmap.support_cells is not None else [])]},
        "diagnostics": _jsonable(diag),
    }
    return make_report("ffmap", cfg, seed, results, certs, all(c["passed"] for c in certs))


def run_psi(cfg: dict, seed: int) -> dict:
    _require(cfg, ["set", "epsilon"], "psi")
    cloud = build_cloud(cfg["set"])
    res = build_psi_epsilon(cloud, float(cfg["epsilon"]), int(cfg.get("m", 1)),
                            _map_config(cfg), seed)
    certs = [c.to_json() for c in res.certificates.values()]
    results = {
        "cloud_before": _cloud_doc(cloud),
        "cloud_after": _cloud_doc(res.image),
        "params": _jsonable(res.params),
        "ball_system": res.ball_system.to_json(),
        "upper4_diagnostic": _jsonable(res.map.meta.get("upper4_cells_in_padded_balls")),
    }
    return make_report("psi", cfg, seed, results, certs, res.all_passed())


def run_rectify(cfg: dict, seed: int) -> dict:
    _require(cfg, ["set", "sequence"], "rectify")
    cloud = build_cloud(cfg["set"])
    m = int(cfg.get("m", 1))
    seq_cfg = cfg["sequence"]
    kind = seq_cfg.get("kind")
    if kind == "translations":
        maps = [translation_map(tuple(map(float, off))) for off in seq_cfg["offsets"]]
    elif kind == "ffmaps":
        root = _root_from(cfg, cloud)
        maps = []
        for level in seq_cfg["levels"]:
            pmap, _ = federer_fleming_map(cloud, root, int(level), EverythingOracle(),
                                          m, _map_config(cfg), seed)
            maps.append(pmap)
    elif kind == "psi":
        maps = [
            build_psi_epsilon(cloud, float(e), m, _map_config(cfg), seed).map
            for e in seq_cfg["epsilons"]
        ]
    else:
        raise ValidationError(f"unknown sequence kind: {kind!r}")
    seq = PerturbationSequence.from_maps(maps, cloud, m=m, seed=seed)
    verdict = semicontinuity_test(cloud, seq, tol=cfg.get("tol"), m=m)
    certs = [
        {"name": "lipschitz_certified",
         "passed": all(l <= seq.lip_bound_declared for l in seq.lip_bounds),
         "lhs": max(seq.lip_bounds), "rhs": seq.lip_bound_declared},
        {"name": "sup_distances_decreasing",
         "passed": all(b <= a for a, b in zip(seq.sup_distances, seq.sup_distances[1:])),
         "lhs": 0.0, "rhs": 0.0},
    ]
    results = {
        "cloud_before": _cloud_doc(cloud),
        "verdict": verdict.to_json(),
        "sequence": {
            "sup_distances": seq.sup_distances,
            "lip_bounds": seq.lip_bounds,
            "measures": seq.measures,
        },
    }
    return make_report("rectify", cfg, seed, results, certs, all(c["passed"] for c in certs))


def run_semireg(cfg: dict, seed: int) -> dict:
    _require(cfg, ["set", "scale_pairs"], "semireg")
    cloud = build_cloud(cfg["set"])
    pairs = [(float(r), float(big)) for r, big in cfg["scale_pairs"]]
    estimate, table = semi_regularity_estimate(
        cloud, pairs, int(cfg.get("sample_centers", 2)), seed, int(cfg.get("m", 1))
    )
    results = {
        "cloud_before": _cloud_doc(cloud),
        "estimate": estimate,
        "table": table,
    }
    certs = [{"name": "estimate_finite", "passed": bool(np.isfinite(estimate)),
              "lhs": estimate, "rhs": float("inf")}]
    return make_report("semireg", cfg, seed, results, certs, all(c["passed"] for c in certs))


RUNNERS = {
    "grid": run_grid,
    "shadow": run_shadow,
    "ffmap": run_ffmap,
    "psi": run_psi,
    "rectify": run_rectify,
    "semireg": run_semireg,
}


def load_config(path: str) -> dict:
    import json

    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ValidationError("config must be a JSON object")
    for key, val in DEFAULTS.items():
        cfg.setdefault(key, val)
    bad = [k for k in ("c_bound", "rho_min_factor", "band_cells", "ring_pad_cells")
           if not (isinstance(cfg[k], (int, float)) and cfg[k] > 0)]
    bad += [k for k in ("center_candidates", "direction_samples", "lip_pairs")
            if not (isinstance(cfg[k], int) and cfg[k] > 0)]
    if bad:
        raise ValidationError(f"config scalars must be positive: {bad}")
    return cfg


def run(experiment: str, config_path: str, seed: int, out_dir: str, svg: bool) -> int:
    cfg = load_config(config_path)
    if "seed" in cfg and seed is None:
        seed = int(cfg["seed"])
    seed = 0 if seed is None else int(seed)
    cfg["seed"] = seed
    report = RUNNERS[experiment](cfg, seed)

    os.makedirs(out_dir, exist_ok=True)
    stem = experiment
    report_path = os.path.join(out_dir, f"{stem}_report.json")
    write_atomic(report_path, canonical_json(report))
    results = report.get("results", {})
    for key, name in (("cloud_before", "before"), ("cloud_after", "after")):
        doc = results.get(key)
        if doc is None:
            continue
        cloud = WeightedCloud(
            np.asarray(doc["points"]).reshape(len(doc["weights"]), -1),
            np.asarray(doc["weights"]),
            np.asarray(doc["part"]),
        )
        tmp_path = os.path.join(out_dir, f"{stem}_cloud_{name}.csv")
        import io

        buf = io.StringIO()
        _write_csv_to(cloud, buf)
        write_atomic(tmp_path, buf.getvalue())
    if svg:
        from .render import render_report

        paths = render_report(report, out_dir, stem)
        log.info("rendered %d svg file(s)", len(paths))
    log.info("report written to %s (ok=%s)", report_path, report["ok"])
    return 0 if report["ok"] else 1


def _write_csv_to(cloud: WeightedCloud, fh) -> None:
    import csv as _csv

    writer = _csv.writer(fh)
    writer.writerow(["x", "y", "z"][: cloud.n] + ["weight", "part"])
    for p, w, flag in zip(cloud.points, cloud.weights, cloud.part):
        writer.writerow([repr(float(c)) for c in p] + [repr(float(w)), flag])


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="rectilab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    runp = sub.add_parser("run", help="run an experiment from a JSON config")
    runp.add_argument("experiment", choices=EXPERIMENTS)
    runp.add_argument("--config", required=True)
    runp.add_argument("--seed", type=int, default=None)
    runp.add_argument("--out", default="out")
    runp.add_argument("--svg", action="store_true")
    args = parser.parse_args(argv)

    logging.basicConfig(level=os.environ.get("RECTILAB_LOG", "WARNING").upper())
    try:
        return run(args.experiment, args.config, args.seed, args.out, args.svg)
    except ToolkitError as exc:
        print(f"rectilab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
