"""Raster framework: feature stacks, label maps, sparse labels, and their file formats.

Binary payloads are little-endian float32 throughout so that golden files are
portable across platforms.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

RASTER_MAGIC = "SKIHL-RASTER"
RASTER_VERSION = 1

_F32 = np.dtype("<f4")


class RasterFormatError(ValueError):
    """Malformed raster/label file: bad header, truncated body, or invalid values."""


@dataclass(frozen=True)
class FeatureStack:
    """Per-pixel explanatory feature bands plus an elevation plane on one grid.

    ``values`` has shape (bands, rows, cols) — band plane by band plane,
    row-major within a plane. ``elevation`` has shape (rows, cols), meters.
    """

    rows: int
    cols: int
    bands: int
    values: np.ndarray
    elevation: np.ndarray

    def __post_init__(self):
        if self.rows <= 0 or self.cols <= 0 or self.bands < 1:
            raise ValueError(f"invalid dims: {self.rows}x{self.cols}x{self.bands}")
        if self.values.shape != (self.bands, self.rows, self.cols):
            raise ValueError(f"values shape {self.values.shape} != "
                             f"({self.bands}, {self.rows}, {self.cols})")
        if self.elevation.shape != (self.rows, self.cols):
            raise ValueError(f"elevation shape {self.elevation.shape} != "
                             f"({self.rows}, {self.cols})")
        _require_finite(self.values, "feature values")
        _require_finite(self.elevation, "elevation")

    def band(self, b: int) -> np.ndarray:
        return self.values[b]


@dataclass(frozen=True)
class LabelMap:
    """Dense per-pixel map of values in [0, 1]: a probability map or a binary mask."""

    rows: int
    cols: int
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (self.rows, self.cols):
            raise ValueError(f"values shape {self.values.shape} != ({self.rows}, {self.cols})")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("label map contains non-finite values")
        if self.values.min() < 0.0 or self.values.max() > 1.0:
            raise ValueError("label map values outside [0, 1]")

    def binarized(self, threshold: float = 0.5) -> np.ndarray:
        """Boolean mask: value >= threshold counts as the positive (flood) class."""
        return self.values >= threshold


@dataclass(frozen=True)
class SparseLabels:
    """Sparse ground observations: (row, col, label) with label 1 = flood, 0 = dry."""

    entries: tuple = field(default_factory=tuple)

    def __post_init__(self):
        seen = set()
        for row, col, label in self.entries:
            if label not in (0, 1):
                raise ValueError(f"label at ({row},{col}) must be 0 or 1, got {label}")
            if (row, col) in seen:
                raise ValueError(f"duplicate sparse label coordinate ({row},{col})")
            seen.add((row, col))

    def __len__(self) -> int:
        return len(self.entries)

    def check_bounds(self, rows: int, cols: int) -> None:
        for row, col, _ in self.entries:
            if not (0 <= row < rows and 0 <= col < cols):
                raise ValueError(f"sparse label ({row},{col}) out of bounds for "
                                 f"{rows}x{cols} grid")

    def mask(self, rows: int, cols: int) -> np.ndarray:
        """Boolean grid marking labeled pixels."""
        m = np.zeros((rows, cols), dtype=bool)
        for row, col, _ in self.entries:
            m[row, col] = True
        return m


def _require_finite(arr: np.ndarray, what: str) -> None:
    flat = np.asarray(arr).ravel()
    bad = np.flatnonzero(~np.isfinite(flat))
    if bad.size:
        raise ValueError(f"non-finite {what} at index {int(bad[0])}")


# ---------------------------------------------------------------------------
# SKIHL-RASTER v1
# ---------------------------------------------------------------------------


def save_raster(stack: FeatureStack, path: str | os.PathLike) -> None:
    """Write a feature stack in SKIHL-RASTER v1 format.

    Layout: ASCII header line ``SKIHL-RASTER 1 <rows> <cols> <bands>``, then
    rows*cols*bands little-endian f32 feature values (plane by plane, row-major
    within a plane), then rows*cols little-endian f32 elevation values.
    """
    header = f"{RASTER_MAGIC} {RASTER_VERSION} {stack.rows} {stack.cols} {stack.bands}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(stack.values, dtype=_F32).tobytes())
        fh.write(np.ascontiguousarray(stack.elevation, dtype=_F32).tobytes())


def load_raster(path: str | os.PathLike) -> FeatureStack:
    """Load and validate a SKIHL-RASTER v1 file.

    Raises:
        RasterFormatError: malformed header, truncated body, or non-finite
            payload values (the error names the offending float index).
    """
    with open(path, "rb") as fh:
        header = fh.readline()
        body = fh.read()
    try:
        parts = header.decode("ascii").split()
    except UnicodeDecodeError as exc:
        raise RasterFormatError(f"{path}: header is not ASCII") from exc
    if len(parts) != 5 or parts[0] != RASTER_MAGIC:
        raise RasterFormatError(f"{path}: bad header {header!r}, "
                                f"expected '{RASTER_MAGIC} {RASTER_VERSION} <rows> <cols> <bands>'")
    if parts[1] != str(RASTER_VERSION):
        raise RasterFormatError(f"{path}: unsupported version {parts[1]}")
    try:
        rows, cols, bands = (int(p) for p in parts[2:5])
    except ValueError as exc:
        raise RasterFormatError(f"{path}: non-integer dims in header {header!r}") from exc
    if rows <= 0 or cols <= 0 or bands < 1:
        raise RasterFormatError(f"{path}: invalid dims {rows}x{cols}x{bands}")

    n_feature = rows * cols * bands
    n_total = n_feature + rows * cols
    expected = n_total * 4
    if len(body) != expected:
        raise RasterFormatError(f"{path}: body has {len(body)} bytes "
                                f"({len(body) // 4} floats), expected {expected} "
                                f"({n_total} floats)")

    data = np.frombuffer(body, dtype=_F32).astype(np.float32)
    bad = np.flatnonzero(~np.isfinite(data))
    if bad.size:
        raise RasterFormatError(f"{path}: non-finite value at float index {int(bad[0])}")

    values = data[:n_feature].reshape(bands, rows, cols)
    elevation = data[n_feature:].reshape(rows, cols)
    values.setflags(write=False)
    elevation.setflags(write=False)
    return FeatureStack(rows=rows, cols=cols, bands=bands,
                        values=values, elevation=elevation)


# ---------------------------------------------------------------------------
# Probability maps: PGM (P5, maxval 255) plus raw f32 sidecar
# ---------------------------------------------------------------------------


def probability_to_byte(values: np.ndarray) -> np.ndarray:
    """Scale [0,1] to [0,255] with half-up rounding: round(255*p)."""
    return np.floor(np.asarray(values, dtype=np.float64) * 255.0 + 0.5).astype(np.uint8)


def save_pgm(values01: np.ndarray, path: str | os.PathLike) -> None:
    rows, cols = values01.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(probability_to_byte(values01).tobytes())


def save_f32(values: np.ndarray, path: str | os.PathLike) -> None:
    """Headerless little-endian f32 dump, row-major."""
    with open(path, "wb") as fh:
        fh.write(np.ascontiguousarray(values, dtype=_F32).tobytes())


def load_f32(path: str | os.PathLike, rows: int, cols: int) -> np.ndarray:
    with open(path, "rb") as fh:
        body = fh.read()
    if len(body) != rows * cols * 4:
        raise RasterFormatError(f"{path}: expected {rows * cols} f32 values, "
                                f"got {len(body) // 4}")
    return np.frombuffer(body, dtype=_F32).astype(np.float64).reshape(rows, cols)


def sidecar_path(pgm_path: str) -> str:
    root, _ = os.path.splitext(str(pgm_path))
    return root + ".f32"


def save_label_map(label_map: LabelMap, path: str | os.PathLike) -> None:
    """Export a probability map as PGM P5 (maxval 255) plus a raw f32 sidecar.

    The sidecar sits next to the PGM with extension ``.f32`` and preserves the
    full-precision values; the PGM bytes are round(255*p), half-up.
    """
    save_pgm(label_map.values, path)
    save_f32(label_map.values, sidecar_path(str(path)))


def load_label_map(path: str | os.PathLike) -> LabelMap:
    """Load a probability map written by :func:`save_label_map`.

    Dimensions come from the PGM header; values come from the f32 sidecar when
    present (full precision), else from the PGM bytes divided by 255.
    """
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P5":
            raise RasterFormatError(f"{path}: not a P5 PGM")
        dims = fh.readline().split()
        maxval = fh.readline().strip()
        if len(dims) != 2 or maxval != b"255":
            raise RasterFormatError(f"{path}: unsupported PGM header")
        cols, rows = int(dims[0]), int(dims[1])
        body = fh.read()
    if len(body) != rows * cols:
        raise RasterFormatError(f"{path}: PGM body has {len(body)} bytes, "
                                f"expected {rows * cols}")
    side = sidecar_path(str(path))
    if os.path.exists(side):
        values = load_f32(side, rows, cols)
    else:
        values = np.frombuffer(body, dtype=np.uint8).astype(np.float64).reshape(rows, cols) / 255.0
    return LabelMap(rows=rows, cols=cols, values=values)


# ---------------------------------------------------------------------------
# Sparse labels CSV
# ---------------------------------------------------------------------------


def save_sparse_labels(labels: SparseLabels, path: str | os.PathLike) -> None:
    """Write sparse labels as headerless CSV lines ``row,col,label``."""
    with open(path, "w", encoding="ascii") as fh:
        for row, col, label in labels.entries:
            fh.write(f"{row},{col},{label}\n")


def load_sparse_labels(path: str | os.PathLike, rows: int, cols: int) -> SparseLabels:
    """Load a ``row,col,label`` CSV, rejecting duplicates, out-of-bounds
    coordinates, and labels outside {0, 1}."""
    entries = []
    seen = set()
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise RasterFormatError(f"{path}:{lineno}: expected 'row,col,label', got {line!r}")
            try:
                row, col, label = (int(p) for p in parts)
            except ValueError as exc:
                raise RasterFormatError(f"{path}:{lineno}: non-integer field in {line!r}") from exc
            if label not in (0, 1):
                raise RasterFormatError(f"{path}:{lineno}: label must be 0 or 1, got {label}")
            if not (0 <= row < rows and 0 <= col < cols):
                raise RasterFormatError(f"{path}:{lineno}: coordinate ({row},{col}) out of "
                                        f"bounds for {rows}x{cols} grid")
            if (row, col) in seen:
                raise RasterFormatError(f"{path}:{lineno}: duplicate coordinate ({row},{col})")
            seen.add((row, col))
            entries.append((row, col, label))
    return SparseLabels(entries=tuple(entries))
