"""Deterministic synthetic flood scenarios: elevation, hydrologically
consistent truth, noisy feature bands, and sparse label sampling.

All randomness comes from numpy's Philox generator (a 64-bit counter-based
algorithm), seeded from the config, with a fixed draw order: bump centers,
bump amplitudes, bump widths, per-band noise planes, then label sampling.
Identical configs therefore produce byte-identical scenarios.

Elevation is a sum of Gaussian bumps min-max normalized to [0, 100] m. The
flood truth is the 4-connected region of pixels with elevation <= water_level
that contains the global elevation minimum; isolated low basins elsewhere
stay dry, so elevation reasoning alone cannot recover the truth. Feature
band b is alpha_b * truth + beta_b * (elevation/100) + N(0, noise_sigma)
with the (alpha, beta) pairs below cycled per band.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .raster import (FeatureStack, LabelMap, SparseLabels, save_label_map,
                     save_raster, save_sparse_labels)

# per-band (alpha, beta): flood signal strength and elevation leakage
BAND_COEFFS = ((1.0, -0.5), (0.8, 0.3), (-0.6, 0.8))

_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=int)


@dataclass(frozen=True)
class ScenarioConfig:
    rows: int
    cols: int
    seed: int = 0
    n_bumps: int = 12
    water_level: float = 35.0
    noise_sigma: float = 0.3
    n_sparse_labels: int = 8
    bands: int = 3

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"invalid dims {self.rows}x{self.cols}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.n_sparse_labels < 1:
            raise ValueError("n_sparse_labels must be >= 1")
        if self.n_bumps < 1 or self.bands < 1:
            raise ValueError(f"invalid n_bumps={self.n_bumps} bands={self.bands}")


def _elevation(config: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    rows, cols = config.rows, config.cols
    scale = min(rows, cols)
    centers = rng.uniform(0.0, [rows, cols], size=(config.n_bumps, 2))
    amps = rng.uniform(0.5, 2.0, size=config.n_bumps)
    widths = rng.uniform(scale / 8.0, scale / 3.0, size=config.n_bumps)
    rr, cc = np.mgrid[0:rows, 0:cols]
    elev = np.zeros((rows, cols), dtype=np.float64)
    for (cr, ccol), amp, sig in zip(centers, amps, widths):
        elev += amp * np.exp(-(((rr - cr) ** 2) + ((cc - ccol) ** 2)) / (2.0 * sig * sig))
    lo, hi = elev.min(), elev.max()
    if hi > lo:
        elev = (elev - lo) / (hi - lo) * 100.0
    else:
        elev = np.zeros_like(elev)
    return elev


def _flood_truth(elev: np.ndarray, water_level: float) -> np.ndarray:
    if water_level < elev.min():
        warnings.warn(f"water_level {water_level} below minimum elevation "
                      f"{elev.min():.3f}: flood truth is empty")
        return np.zeros_like(elev, dtype=bool)
    below = elev <= water_level
    components, _ = ndimage.label(below, structure=_FOUR_CONN)
    seed_pixel = np.unravel_index(int(np.argmin(elev)), elev.shape)
    return components == components[seed_pixel]


def generate(config: ScenarioConfig):
    """Build one scenario.

    Returns:
        (FeatureStack, truth LabelMap with binary values, SparseLabels).
        Sparse labels are sampled uniformly without replacement over all
        pixels; when n_sparse_labels >= 2 and both classes exist, the last
        draw is re-sampled from the missing class if needed so at least one
        label per class is present.
    """
    rng = np.random.Generator(np.random.Philox(config.seed))
    elev = _elevation(config, rng)
    truth = _flood_truth(elev, config.water_level)

    rows, cols = config.rows, config.cols
    bands = np.empty((config.bands, rows, cols), dtype=np.float64)
    truth_f = truth.astype(np.float64)
    elev01 = elev / 100.0
    for b in range(config.bands):
        alpha, beta = BAND_COEFFS[b % len(BAND_COEFFS)]
        noise = rng.normal(0.0, config.noise_sigma, size=(rows, cols)) \
            if config.noise_sigma > 0 else 0.0
        bands[b] = alpha * truth_f + beta * elev01 + noise

    n = config.n_sparse_labels
    if n > rows * cols:
        raise ValueError(f"n_sparse_labels={n} exceeds pixel count {rows * cols}")
    flat = rng.choice(rows * cols, size=n, replace=False)
    chosen = list(flat)
    labels_at = truth.ravel()[chosen]
    if n >= 2 and truth.any() and not truth.all():
        for cls in (True, False):
            if not np.any(labels_at == cls):
                pool = np.flatnonzero(truth.ravel() == cls)
                pool = pool[~np.isin(pool, chosen)]
                chosen[-1] = int(rng.choice(pool))
                labels_at = truth.ravel()[chosen]
    entries = tuple(sorted((int(i // cols), int(i % cols), int(truth.ravel()[i]))
                           for i in chosen))

    stack = FeatureStack(rows=rows, cols=cols, bands=config.bands,
                         values=bands, elevation=elev)
    truth_map = LabelMap(rows=rows, cols=cols, values=truth.astype(np.float64))
    return stack, truth_map, SparseLabels(entries=entries)


def describe(config: ScenarioConfig) -> dict:
    """Provenance record: the full config plus derived scenario statistics.

    The record is sufficient to regenerate the scenario exactly (see
    config_from_record).
    """
    stack, truth, sparse = generate(config)
    flood_fraction = float(truth.values.mean())
    return {
        "generator": "skihl.synth",
        "rng": "philox64 counter-based",
        "config": asdict(config),
        "flood_fraction": flood_fraction,
        "elevation_min": float(stack.elevation.min()),
        "elevation_max": float(stack.elevation.max()),
        "n_flood_labels": int(sum(lab for _, _, lab in sparse.entries)),
        "n_dry_labels": int(sum(1 - lab for _, _, lab in sparse.entries)),
        "band_coeffs": [list(BAND_COEFFS[b % len(BAND_COEFFS)])
                        for b in range(config.bands)],
    }


def config_from_record(record: dict) -> ScenarioConfig:
    return ScenarioConfig(**record["config"])


def write_scenario(config: ScenarioConfig, outdir: str | os.PathLike) -> dict:
    """Generate and write all scenario artifacts into a directory.

    Writes scene.raster (features + elevation), truth.pgm/.f32, labels.csv,
    and provenance.json; returns the path map.
    """
    os.makedirs(outdir, exist_ok=True)
    stack, truth, sparse = generate(config)
    paths = {
        "raster": os.path.join(outdir, "scene.raster"),
        "truth": os.path.join(outdir, "truth.pgm"),
        "labels": os.path.join(outdir, "labels.csv"),
        "provenance": os.path.join(outdir, "provenance.json"),
    }
    save_raster(stack, paths["raster"])
    save_label_map(truth, paths["truth"])
    save_sparse_labels(sparse, paths["labels"])
    with open(paths["provenance"], "w", encoding="ascii") as fh:
        json.dump(describe(config), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths
