"""Multi-resolution tiling of a raster: cell geometry, the leaf frontier,
and refinement of selected cells into finer children.

A level-k cell nominally spans eta**k pixels per axis; cells at the raster
edge are clipped rather than padded, so the frontier always tiles the grid
exactly. Only the frontier is materialized - refinement replaces one leaf
with its children and leaves everything else untouched.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class HierarchyConfig:
    """Tiling constants: branching factor eta (>= 2) and coarsest level."""

    eta: int
    max_level: int

    def __post_init__(self):
        if int(self.eta) != self.eta or self.eta < 2:
            raise ValueError(f"eta must be an integer >= 2, got {self.eta}")
        if int(self.max_level) != self.max_level or self.max_level < 1:
            raise ValueError(f"max_level must be an integer >= 1, got {self.max_level}")

    def nominal_side(self, level: int) -> int:
        return self.eta ** level


@dataclass(frozen=True)
class CellId:
    """One cell of the tiling.

    side_rows/side_cols are actual extents after clipping at the raster edge;
    the nominal extent at level k is eta**k on both axes. The pixel set is
    [row0, row0+side_rows) x [col0, col0+side_cols) and is never empty.
    """

    level: int
    row0: int
    col0: int
    side_rows: int
    side_cols: int

    def __post_init__(self):
        if self.level < 0 or self.row0 < 0 or self.col0 < 0:
            raise ValueError(f"invalid cell {self}")
        if self.side_rows < 1 or self.side_cols < 1:
            raise ValueError(f"empty cell {self}")

    def slices(self) -> tuple[slice, slice]:
        return (slice(self.row0, self.row0 + self.side_rows),
                slice(self.col0, self.col0 + self.side_cols))

    @property
    def pixel_count(self) -> int:
        return self.side_rows * self.side_cols


def canonical_key(cell: CellId) -> tuple[int, int]:
    # leaves are disjoint, so the top-left pixel identifies a leaf uniquely
    return (cell.row0, cell.col0)


@dataclass(frozen=True)
class Frontier:
    """Immutable snapshot of the current leaf set (mixed levels permitted).

    Leaves are kept in canonical order (row-major by top-left pixel); that
    order defines the atom indexing used everywhere downstream.
    """

    rows: int
    cols: int
    config: HierarchyConfig
    leaves: tuple[CellId, ...]

    def __post_init__(self):
        object.__setattr__(self, "_index", {c: i for i, c in enumerate(self.leaves)})
        object.__setattr__(self, "_owner", None)

    def __len__(self) -> int:
        return len(self.leaves)

    def __contains__(self, cell: CellId) -> bool:
        return cell in self._index

    def index_of(self, cell: CellId) -> int:
        try:
            return self._index[cell]
        except KeyError:
            raise KeyError(f"not a leaf of this frontier: {cell}") from None

    def owner_map(self) -> np.ndarray:
        """Integer grid assigning every pixel the index of its covering leaf."""
        if self._owner is None:
            owner = np.full((self.rows, self.cols), -1, dtype=np.int32)
            for i, cell in enumerate(self.leaves):
                owner[cell.slices()] = i
            if (owner < 0).any():
                raise AssertionError("frontier does not cover the raster")
            owner.setflags(write=False)
            object.__setattr__(self, "_owner", owner)
        return self._owner

    def paint(self, per_leaf: np.ndarray) -> np.ndarray:
        """Expand one value per leaf into a dense pixel map."""
        per_leaf = np.asarray(per_leaf)
        if per_leaf.shape != (len(self.leaves),):
            raise ValueError(f"expected {len(self.leaves)} leaf values, "
                             f"got shape {per_leaf.shape}")
        return per_leaf[self.owner_map()]


def _sorted(leaves: Iterable[CellId]) -> tuple[CellId, ...]:
    return tuple(sorted(leaves, key=canonical_key))


def build_root(rows: int, cols: int, config: HierarchyConfig) -> Frontier:
    """Frontier of level-max_level cells tiling the raster, clipped at edges."""
    if rows < 1 or cols < 1:
        raise ValueError(f"invalid raster dims {rows}x{cols}")
    side = config.nominal_side(config.max_level)
    leaves = []
    for r0 in range(0, rows, side):
        for c0 in range(0, cols, side):
            leaves.append(CellId(level=config.max_level, row0=r0, col0=c0,
                                 side_rows=min(side, rows - r0),
                                 side_cols=min(side, cols - c0)))
    return Frontier(rows=rows, cols=cols, config=config, leaves=_sorted(leaves))


def children_of(cell: CellId, config: HierarchyConfig) -> tuple[CellId, ...]:
    """The level-(k-1) cells tiling this cell's pixel set exactly."""
    if cell.level < 1:
        raise ValueError(f"level-0 cell has no children: {cell}")
    side = config.nominal_side(cell.level - 1)
    out = []
    for r0 in range(cell.row0, cell.row0 + cell.side_rows, side):
        for c0 in range(cell.col0, cell.col0 + cell.side_cols, side):
            out.append(CellId(level=cell.level - 1, row0=r0, col0=c0,
                              side_rows=min(side, cell.row0 + cell.side_rows - r0),
                              side_cols=min(side, cell.col0 + cell.side_cols - c0)))
    return tuple(out)


def refine(frontier: Frontier, cells: Iterable[CellId]) -> Frontier:
    """Replace each selected leaf by its children; all other leaves unchanged.

    Raises:
        ValueError: a selected cell is not a leaf of this frontier, or is at
            level 0 (nothing finer exists).
    """
    cells = set(cells)
    if not cells:
        return frontier
    for cell in cells:
        if cell not in frontier:
            raise ValueError(f"cannot refine: not a leaf of this frontier: {cell}")
        if cell.level < 1:
            raise ValueError(f"cannot refine a level-0 cell: {cell}")
    leaves = []
    for leaf in frontier.leaves:
        if leaf in cells:
            leaves.extend(children_of(leaf, frontier.config))
        else:
            leaves.append(leaf)
    return Frontier(rows=frontier.rows, cols=frontier.cols,
                    config=frontier.config, leaves=_sorted(leaves))


def cell_mean(plane: np.ndarray, cell: CellId) -> float:
    """Arithmetic mean of a feature plane over the cell's pixels."""
    plane = np.asarray(plane)
    if cell.row0 + cell.side_rows > plane.shape[0] or \
       cell.col0 + cell.side_cols > plane.shape[1]:
        raise ValueError(f"cell {cell} out of bounds for plane {plane.shape}")
    return float(plane[cell.slices()].mean())


def leaf_means(plane: np.ndarray, frontier: Frontier) -> np.ndarray:
    """Per-leaf means of a plane, in canonical leaf order (vectorized)."""
    owner = frontier.owner_map()
    counts = np.bincount(owner.ravel(), minlength=len(frontier))
    sums = np.bincount(owner.ravel(), weights=np.asarray(plane, dtype=np.float64).ravel(),
                       minlength=len(frontier))
    return sums / counts


def adjacency_index_pairs(frontier: Frontier) -> np.ndarray:
    """Leaf-index pairs (i, j), i < j, whose rectangles share a boundary
    segment of at least one pixel (4-adjacency); sorted lexicographically."""
    owner = frontier.owner_map()
    segs = []
    if owner.shape[1] > 1:
        segs.append(np.stack([owner[:, :-1].ravel(), owner[:, 1:].ravel()], axis=1))
    if owner.shape[0] > 1:
        segs.append(np.stack([owner[:-1, :].ravel(), owner[1:, :].ravel()], axis=1))
    if not segs:
        return np.empty((0, 2), dtype=np.int64)
    both = np.concatenate(segs, axis=0)
    both = both[both[:, 0] != both[:, 1]]
    if both.size == 0:
        return np.empty((0, 2), dtype=np.int64)
    lo = both.min(axis=1)
    hi = both.max(axis=1)
    return np.unique(np.stack([lo, hi], axis=1), axis=0).astype(np.int64)


def leaf_adjacency(frontier: Frontier) -> set:
    """Unordered adjacent leaf pairs as (CellId, CellId) in canonical order."""
    pairs = set()
    for i, j in adjacency_index_pairs(frontier):
        a, b = frontier.leaves[int(i)], frontier.leaves[int(j)]
        if canonical_key(a) > canonical_key(b):
            a, b = b, a
        pairs.add((a, b))
    return pairs


# ---------------------------------------------------------------------------
# Frontier CSV export
# ---------------------------------------------------------------------------

FRONTIER_CSV_HEADER = "level,row0,col0,side_rows,side_cols"


def save_frontier(frontier: Frontier, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(FRONTIER_CSV_HEADER + "\n")
        for c in frontier.leaves:
            fh.write(f"{c.level},{c.row0},{c.col0},{c.side_rows},{c.side_cols}\n")


def load_frontier(path: str | os.PathLike, rows: int, cols: int,
                  config: HierarchyConfig) -> Frontier:
    leaves = []
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().strip()
        if header != FRONTIER_CSV_HEADER:
            raise ValueError(f"{path}: bad frontier header {header!r}")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            level, r0, c0, sr, sc = (int(p) for p in line.split(","))
            leaves.append(CellId(level, r0, c0, sr, sc))
    return Frontier(rows=rows, cols=cols, config=config, leaves=_sorted(leaves))
