"""Dyadic cube complexes over a root cube.

A level-``j`` subdivision of a root cube has ``2**(j*n)`` closed subcubes.
Cells and their lower-dimensional faces are identified by integer lattice
coordinates (anchor of the minimal corner, in units of the cell side) plus
the set of axes along which the face extends.  Integer identity makes
deduplication of shared faces exact; float geometry is derived on demand.

Cells are closed: a set touching a shared face selects every adjacent cube.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .errors import BudgetExceeded, ResolutionLimit

# Full-grid enumeration guard; bbox-guided subdivision bypasses it.
FULL_SCAN_BUDGET = 8_000_000
# Finest representable level: 2**-MAX_LEVEL stays well above float64 eps.
MAX_LEVEL = 42


@dataclass(frozen=True)
class RootCube:
    """Closed axis-aligned n-cube from which all dyadic cells derive."""

    corner: tuple[float, ...]
    side: float
    n: int

    def __post_init__(self):
        if not (1 <= self.n <= 3):
            raise ValueError(f"ambient dimension must be 1..3, got {self.n}")
        if not self.side > 0:
            raise ValueError(f"side must be positive, got {self.side}")
        if len(self.corner) != self.n:
            raise ValueError("corner length must match ambient dimension")

    @property
    def corner_array(self) -> np.ndarray:
        return np.asarray(self.corner, dtype=float)

    def diameter(self) -> float:
        return self.side * np.sqrt(self.n)

    def cell_side(self, level: int) -> float:
        return self.side / (1 << level)


@dataclass(frozen=True)
class DyadicCell:
    """A closed d-face of a level-j cube, addressed on the integer lattice.

    ``anchor`` is the minimal corner in cell-side units (so a shared face of
    two adjacent cubes has a single address); ``spans[i]`` marks the axes
    along which the face has extent.  ``dim`` is the number of spanning axes.
    """

    level: int
    anchor: tuple[int, ...]
    spans: tuple[bool, ...]

    @property
    def dim(self) -> int:
        return sum(self.spans)

    @property
    def coords(self) -> tuple[int, ...]:
        """Coordinates of a representative cube containing this face."""
        top = 1 << self.level
        return tuple(
            a - 1 if (not s and a == top) else a
            for a, s in zip(self.anchor, self.spans)
        )

    @property
    def face_selector(self) -> tuple[str, ...]:
        """Per-axis selector relative to the representative cube."""
        top = 1 << self.level
        out = []
        for a, s in zip(self.anchor, self.spans):
            if s:
                out.append("span")
            else:
                out.append("high" if a == top else "low")
        return tuple(out)

    def realization(self, root: RootCube) -> tuple[np.ndarray, np.ndarray]:
        """Closed interval box [lo, hi] realizing this face."""
        h = root.cell_side(self.level)
        lo = root.corner_array + np.asarray(self.anchor, dtype=float) * h
        hi = lo + h * np.asarray(self.spans, dtype=float)
        return lo, hi

    def parent(self) -> "DyadicCell":
        """The level-(j-1) cube whose realization contains this cell."""
        if self.level == 0:
            raise ValueError("level-0 cell has no parent")
        if not all(self.spans):
            raise ValueError("parent is defined for full cubes only")
        return DyadicCell(self.level - 1, tuple(a // 2 for a in self.anchor), self.spans)


def _face_patterns(n: int, d: int):
    """All (span_mask, fixed_offsets) pairs producing d-faces of an n-cube."""
    axes = range(n)
    for span_axes in itertools.combinations(axes, d):
        span = np.zeros(n, dtype=bool)
        span[list(span_axes)] = True
        fixed = [i for i in axes if not span[i]]
        for bits in itertools.product((0, 1), repeat=len(fixed)):
            off = np.zeros(n, dtype=np.int64)
            off[fixed] = bits
            yield span, off


class CellComplex:
    """A set of level-j cubes of a root cube, with cached face lattices."""

    def __init__(self, root: RootCube, level: int, cell_anchors: np.ndarray):
        cell_anchors = np.asarray(cell_anchors, dtype=np.int64).reshape(-1, root.n)
        if cell_anchors.size:
            top = 1 << level
            if cell_anchors.min() < 0 or cell_anchors.max() >= top:
                raise ValueError("cell coordinates out of range for level")
        # Lexicographic order makes every downstream iteration deterministic.
        self.root = root
        self.level = level
        self.cells = np.unique(cell_anchors, axis=0)
        self._face_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def __len__(self) -> int:
        return len(self.cells)

    @property
    def n(self) -> int:
        return self.root.n

    @property
    def cell_side(self) -> float:
        return self.root.cell_side(self.level)

    def face_arrays(self, d: int) -> tuple[np.ndarray, np.ndarray]:
        """Deduplicated d-faces as (anchors[F,n], spans[F,n]) arrays.

        Faces are sorted by (span pattern, anchor); shared faces appear once.
        """
        if not (0 <= d <= self.n):
            raise ValueError(f"face dimension must be 0..{self.n}, got {d}")
        if d in self._face_cache:
            return self._face_cache[d]
        if d == self.n:
            out = self.cells, np.ones_like(self.cells, dtype=bool)
            self._face_cache[d] = out
            return out
        # The same face arises from several cells and offsets of one span
        # pattern (a shared edge is 'high' of one cube, 'low' of the next),
        # so deduplicate anchors per span pattern across all offsets.
        by_span: dict[bytes, list[np.ndarray]] = {}
        span_of: dict[bytes, np.ndarray] = {}
        for span, off in _face_patterns(self.n, d):
            key = span.tobytes()
            span_of[key] = span
            by_span.setdefault(key, []).append(self.cells + off[None, :])
        anchors_parts, spans_parts = [], []
        for key in sorted(by_span):
            uniq = np.unique(np.concatenate(by_span[key], axis=0), axis=0)
            anchors_parts.append(uniq)
            spans_parts.append(np.broadcast_to(span_of[key], uniq.shape).copy())
        if anchors_parts:
            anchors = np.concatenate(anchors_parts, axis=0)
            spans = np.concatenate(spans_parts, axis=0)
        else:
            anchors = np.zeros((0, self.n), dtype=np.int64)
            spans = np.zeros((0, self.n), dtype=bool)
        self._face_cache[d] = (anchors, spans)
        return anchors, spans

    def face_boxes(self, d: int) -> tuple[np.ndarray, np.ndarray]:
        """Float realizations [lo, hi] of every d-face."""
        anchors, spans = self.face_arrays(d)
        h = self.cell_side
        lo = self.root.corner_array[None, :] + anchors.astype(float) * h
        hi = lo + h * spans.astype(float)
        return lo, hi

    def contains_cell(self, anchor: Iterable[int]) -> bool:
        a = np.asarray(tuple(anchor), dtype=np.int64)
        return bool((self.cells == a[None, :]).all(axis=1).any())

    def boundary_faces(self) -> tuple[np.ndarray, np.ndarray]:
        """(n-1)-faces lying on the boundary of the union of the cells.

        A codimension-one face is on the boundary iff it belongs to exactly
        one cell of the complex.
        """
        if len(self.cells) == 0:
            return np.zeros((0, self.n), np.int64), np.zeros((0, self.n), bool)
        parts_a, parts_s, counts = [], [], []
        for span, off in _face_patterns(self.n, self.n - 1):
            raw = self.cells + off[None, :]
            uniq, cnt = np.unique(raw, axis=0, return_counts=True)
            parts_a.append(uniq)
            parts_s.append(np.broadcast_to(span, uniq.shape).copy())
            counts.append(cnt)
        kept_a, kept_s = [], []
        # Low/high offsets of the same span pattern address the same lattice;
        # merge their counts before keeping single-owner faces.
        by_pattern: dict[bytes, list[int]] = {}
        for i, (a, s) in enumerate(zip(parts_a, parts_s)):
            key = s[0].tobytes() if len(s) else b""
            by_pattern.setdefault(key, []).append(i)
        for key, idxs in sorted(by_pattern.items()):
            all_a = np.concatenate([parts_a[i] for i in idxs], axis=0)
            all_c = np.concatenate([counts[i] for i in idxs], axis=0)
            uniq, inv = np.unique(all_a, axis=0, return_inverse=True)
            tot = np.zeros(len(uniq), dtype=np.int64)
            np.add.at(tot, inv, all_c)
            mask = tot == 1
            kept_a.append(uniq[mask])
            span = parts_s[idxs[0]][0] if len(parts_s[idxs[0]]) else None
            kept_s.append(np.broadcast_to(span, uniq[mask].shape).copy())
        anchors = np.concatenate(kept_a, axis=0) if kept_a else np.zeros((0, self.n), np.int64)
        spans = np.concatenate(kept_s, axis=0) if kept_s else np.zeros((0, self.n), bool)
        return anchors, spans

    def to_json(self) -> dict:
        return {
            "root": {"corner": list(self.root.corner), "side": self.root.side, "n": self.root.n},
            "level": self.level,
            "cells": [list(map(int, row)) for row in self.cells],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "CellComplex":
        root = RootCube(tuple(doc["root"]["corner"]), float(doc["root"]["side"]), int(doc["root"]["n"]))
        return cls(root, int(doc["level"]), np.asarray(doc["cells"], dtype=np.int64))


def faces(complex_: CellComplex, d: int) -> list[DyadicCell]:
    """Deduplicated d-faces of the complex as cell objects (lex order)."""
    anchors, spans = complex_.face_arrays(d)
    return [
        DyadicCell(complex_.level, tuple(map(int, a)), tuple(map(bool, s)))
        for a, s in zip(anchors, spans)
    ]


def subdivide(root: RootCube, level: int, hits: Callable) -> CellComplex:
    """Level-j cubes of the root whose closed realization meets the oracle set.

    ``hits(lo, hi)`` decides intersection with a closed box.  Oracles may
    expose ``bboxes()`` (a list of world-space boxes bounding the set) to
    avoid full-grid enumeration, and ``hits_boxes(los, his)`` for batched
    evaluation.
    """
    if level < 0:
        raise ValueError("level must be nonnegative")
    if level > MAX_LEVEL:
        raise ResolutionLimit(
            f"level {level} gives cell side {root.side * 2.0 ** -level:.3e}, "
            f"below the float64 geometry floor (max level {MAX_LEVEL})"
        )
    n, top = root.n, 1 << level
    h = root.cell_side(level)
    corner = root.corner_array

    bboxes = getattr(hits, "bboxes", None)
    if bboxes is not None:
        boxes = bboxes()
        cand_parts = []
        for lo, hi in boxes:
            lo_i = np.floor((np.asarray(lo) - corner) / h).astype(np.int64)
            hi_i = np.floor((np.asarray(hi) - corner) / h).astype(np.int64)
            lo_i = np.clip(lo_i, 0, top - 1)
            hi_i = np.clip(hi_i, 0, top - 1)
            ranges = [np.arange(lo_i[k], hi_i[k] + 1) for k in range(n)]
            grids = np.meshgrid(*ranges, indexing="ij")
            cand_parts.append(np.stack([g.ravel() for g in grids], axis=1))
        if cand_parts:
            candidates = np.unique(np.concatenate(cand_parts, axis=0), axis=0)
        else:
            candidates = np.zeros((0, n), dtype=np.int64)
    else:
        total = top ** n
        if total > FULL_SCAN_BUDGET:
            raise BudgetExceeded(
                f"full scan of {total} cells at level {level} exceeds the "
                f"{FULL_SCAN_BUDGET} cell budget and the oracle has no bboxes()"
            )
        ranges = [np.arange(top)] * n
        grids = np.meshgrid(*ranges, indexing="ij")
        candidates = np.stack([g.ravel() for g in grids], axis=1)

    if len(candidates) == 0:
        return CellComplex(root, level, candidates)

    los = corner[None, :] + candidates.astype(float) * h
    his = los + h
    batch = getattr(hits, "hits_boxes", None)
    if batch is not None:
        mask = np.asarray(batch(los, his), dtype=bool)
    else:
        mask = np.fromiter(
            (bool(hits(lo, hi)) for lo, hi in zip(los, his)),
            dtype=bool,
            count=len(candidates),
        )
    return CellComplex(root, level, candidates[mask])


def skeleton_distance(complex_: CellComplex, d: int, points: np.ndarray) -> np.ndarray:
    """Exact distance from each point to the union of d-faces.

    Per-face distance is the norm of the clamped offset (exact for boxes);
    the skeleton distance is the minimum over faces.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    lo, hi = complex_.face_boxes(d)
    if len(lo) == 0:
        return np.full(len(points), np.inf)
    out = np.full(len(points), np.inf)
    # Chunk over faces to bound the (P, F, n) intermediate.
    step = max(1, int(4_000_000 / max(1, len(points))))
    for start in range(0, len(lo), step):
        l, h = lo[start : start + step], hi[start : start + step]
        clamped = np.clip(points[:, None, :], l[None], h[None])
        dist = np.linalg.norm(points[:, None, :] - clamped, axis=2)
        out = np.minimum(out, dist.min(axis=1))
    return out


def skeleton_contains(complex_: CellComplex, d: int, point, tol: float) -> bool:
    """True iff the point lies within ``tol`` of the d-skeleton."""
    if tol < 0:
        raise ValueError("tolerance must be nonnegative")
    return bool(skeleton_distance(complex_, d, np.asarray(point, float))[0] <= tol)


class EverythingOracle:
    """Membership oracle for the whole ambient space (S = Q)."""

    def __call__(self, lo, hi) -> bool:
        return True

    def hits_boxes(self, los, his):
        return np.ones(len(los), dtype=bool)
