"""SVG renderings of experiment reports (matplotlib, Agg backend).

Each panel reads one report section; missing sections are skipped with a
note so a report from any experiment renders without errors.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
from matplotlib.collections import LineCollection, PatchCollection
from matplotlib.patches import Rectangle
import numpy as np

# Stable ids inside the SVG output.
matplotlib.rcParams["svg.hashsalt"] = "rectilab"

_PART_COLORS = {"U": "#c0392b", "R": "#2c6fbb"}


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def _cloud_axes(ax, cloud: dict, title: str):
    pts = np.asarray(cloud.get("points", []), dtype=float)
    part = np.asarray(cloud.get("part", []), dtype="<U1")
    ax.set_title(title)
    ax.set_aspect("equal")
    if pts.size == 0:
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1)
        return
    if pts.shape[1] == 1:
        pts = np.column_stack([pts[:, 0], np.zeros(len(pts))])
    for flag in ("U", "R"):
        mask = part == flag if part.size else np.zeros(len(pts), bool)
        if mask.any():
            ax.plot(pts[mask, 0], pts[mask, 1], ".", ms=1.5,
                    color=_PART_COLORS[flag], label=flag)
    if part.size == 0:
        ax.plot(pts[:, 0], pts[:, 1], ".", ms=1.5, color="#444444")
    if (part == "U").any() and (part == "R").any():
        ax.legend(loc="upper right", fontsize=7)


def render_cloud_panel(report: dict, out_dir: str, stem: str) -> list[str]:
    out = []
    results = report.get("results", {})
    before = results.get("cloud_before")
    after = results.get("cloud_after")
    if before is None:
        return out
    ncols = 2 if after is not None else 1
    fig, axes = plt.subplots(1, ncols, figsize=(5 * ncols, 5))
    axes = np.atleast_1d(axes)
    _cloud_axes(axes[0], before, "input cloud")
    if after is not None:
        _cloud_axes(axes[1], after, "image cloud")
    out.append(_save(fig, os.path.join(out_dir, f"{stem}_clouds.svg")))
    return out


def render_grid_panel(report: dict, out_dir: str, stem: str) -> list[str]:
    results = report.get("results", {})
    complex_doc = results.get("complex")
    if complex_doc is None:
        return []
    root = complex_doc["root"]
    level = complex_doc["level"]
    h = root["side"] / (1 << level)
    corner = np.asarray(root["corner"], dtype=float)
    cells = np.asarray(complex_doc["cells"], dtype=float)
    fig, ax = plt.subplots(figsize=(6, 6))
    ax.set_aspect("equal")
    ax.set_title(f"level-{level} cells ({len(cells)})")
    if root["n"] == 2 and len(cells):
        patches = [
            Rectangle(corner + c * h, h, h) for c in cells
        ]
        ax.add_collection(
            PatchCollection(patches, facecolor="#efe6c8", edgecolor="#8a7f5c", lw=0.3)
        )
        ax.set_xlim(corner[0], corner[0] + root["side"])
        ax.set_ylim(corner[1], corner[1] + root["side"])
    cloud = results.get("cloud_before")
    if cloud is not None and root["n"] == 2:
        _cloud_axes(ax, cloud, ax.get_title())
    return [_save(fig, os.path.join(out_dir, f"{stem}_grid.svg"))]


def render_shadow_panel(report: dict, out_dir: str, stem: str) -> list[str]:
    results = report.get("results", {})
    table = results.get("shadow_table")
    if not table:
        return []
    values = [row["value"] for row in table]
    fig, ax = plt.subplots(figsize=(max(6, len(values) * 0.06), 4))
    ax.bar(range(len(values)), values, width=0.9, color="#2c6fbb")
    ax.set_xlabel("direction sample")
    ax.set_ylabel("shadow measure")
    ax.set_title(f"shadows over {len(values)} directions")
    return [_save(fig, os.path.join(out_dir, f"{stem}_shadows.svg"))]


def render_report(report: dict, out_dir: str, stem: str = "report") -> list[str]:
    """All applicable panels; returns the written SVG paths."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for fn in (render_cloud_panel, render_grid_panel, render_shadow_panel):
        written.extend(fn(report, out_dir, stem))
    if not written:
        fig, ax = plt.subplots(figsize=(5, 5))
        ax.set_title("no renderable sections in report")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1)
        written.append(_save(fig, os.path.join(out_dir, f"{stem}_empty.svg")))
    return written
