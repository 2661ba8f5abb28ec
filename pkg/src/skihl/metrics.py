"""Classification metrics and the accuracy-versus-uncertainty (AvU) measure.

Flood is the positive class; predictions binarize at 0.5. Degenerate
denominators report the metric as 0 and add a flag rather than raising.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .raster import LabelMap, SparseLabels


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class AvUCounts:
    n_ac: int  # accurate and certain
    n_au: int  # accurate and uncertain
    n_ic: int  # inaccurate and certain
    n_iu: int  # inaccurate and uncertain
    t_u: float

    @property
    def total(self) -> int:
        return self.n_ac + self.n_au + self.n_ic + self.n_iu


def _as_exclude_mask(exclude, rows: int, cols: int) -> np.ndarray:
    if exclude is None:
        return np.zeros((rows, cols), dtype=bool)
    if isinstance(exclude, SparseLabels):
        return exclude.mask(rows, cols)
    mask = np.asarray(exclude, dtype=bool)
    if mask.shape != (rows, cols):
        raise ValueError(f"exclude mask shape {mask.shape} != ({rows}, {cols})")
    return mask


def _binary(map_or_array) -> np.ndarray:
    if isinstance(map_or_array, LabelMap):
        return map_or_array.values >= 0.5
    return np.asarray(map_or_array, dtype=np.float64) >= 0.5


def confusion(pred, truth, exclude=None) -> Confusion:
    p = _binary(pred)
    t = _binary(truth)
    if p.shape != t.shape:
        raise ValueError(f"prediction {p.shape} vs truth {t.shape} shape mismatch")
    keep = ~_as_exclude_mask(exclude, *p.shape)
    p, t = p[keep], t[keep]
    return Confusion(tp=int(np.sum(p & t)), fp=int(np.sum(p & ~t)),
                     tn=int(np.sum(~p & ~t)), fn=int(np.sum(~p & t)))


def _prf(tp: int, fp: int, fn: int, cls: str, flags: list) -> dict:
    if tp + fp > 0:
        precision = tp / (tp + fp)
    else:
        precision = 0.0
        flags.append(f"{cls}_precision_undefined")
    if tp + fn > 0:
        recall = tp / (tp + fn)
    else:
        recall = 0.0
        flags.append(f"{cls}_recall_undefined")
    if precision + recall > 0:
        f1 = 2.0 * precision * recall / (precision + recall)
    else:
        f1 = 0.0
        flags.append(f"{cls}_f1_undefined")
    return {"precision": precision, "recall": recall, "f1": f1,
            "support": tp + fn}


def classification_report(pred, truth, exclude=None) -> dict:
    """Per-class precision/recall/F1, macro-F1, and accuracy.

    Pixels marked by `exclude` (typically the sparse training labels) are
    left out of every tally. Truth must be binary after thresholding.
    """
    c = confusion(pred, truth, exclude)
    flags: list = []
    flood = _prf(c.tp, c.fp, c.fn, "flood", flags)
    dry = _prf(c.tn, c.fn, c.fp, "dry", flags)
    accuracy = (c.tp + c.tn) / c.total if c.total > 0 else 0.0
    if c.total == 0:
        flags.append("no_pixels_evaluated")
    return {
        "per_class": {"flood": flood, "dry": dry},
        "macro_f1": 0.5 * (flood["f1"] + dry["f1"]),
        "accuracy": accuracy,
        "confusion": {"tp": c.tp, "fp": c.fp, "tn": c.tn, "fn": c.fn},
        "flags": flags,
    }


def avu(pred, truth, uncertainty: np.ndarray, t_u: float, exclude=None) -> dict:
    """Accuracy-versus-uncertainty over aligned pixel maps.

    A pixel is certain iff its uncertainty is < t_u; accurate iff the
    binarized prediction matches truth. avu_a = n_ac/(n_ac+n_au) and
    avu_i = n_iu/(n_ic+n_iu); avu is their harmonic mean. An empty accurate
    or inaccurate partition makes the component undefined: it and avu are
    reported as 0 with a flag.
    """
    p = _binary(pred)
    t = _binary(truth)
    u = np.asarray(uncertainty, dtype=np.float64)
    if not (p.shape == t.shape == u.shape):
        raise ValueError(f"shape mismatch: pred {p.shape}, truth {t.shape}, "
                         f"uncertainty {u.shape}")
    if t_u < 0:
        raise ValueError(f"t_u must be >= 0, got {t_u}")
    keep = ~_as_exclude_mask(exclude, *p.shape)
    accurate = (p == t)[keep]
    certain = (u < t_u)[keep]
    counts = AvUCounts(
        n_ac=int(np.sum(accurate & certain)),
        n_au=int(np.sum(accurate & ~certain)),
        n_ic=int(np.sum(~accurate & certain)),
        n_iu=int(np.sum(~accurate & ~certain)),
        t_u=float(t_u),
    )
    return avu_from_counts(counts)


def avu_from_counts(counts: AvUCounts) -> dict:
    flags: list = []
    n_acc = counts.n_ac + counts.n_au
    n_inacc = counts.n_ic + counts.n_iu
    if n_acc > 0:
        avu_a = counts.n_ac / n_acc
    else:
        avu_a = 0.0
        flags.append("avu_a_undefined")
    if n_inacc > 0:
        avu_i = counts.n_iu / n_inacc
    else:
        avu_i = 0.0
        flags.append("avu_i_undefined")
    if flags or (avu_a + avu_i) == 0:
        score = 0.0
        if not flags:
            flags.append("avu_undefined")
    else:
        score = 2.0 * avu_a * avu_i / (avu_a + avu_i)
    return {
        "avu_a": avu_a,
        "avu_i": avu_i,
        "avu": score,
        "counts": {"n_ac": counts.n_ac, "n_au": counts.n_au,
                   "n_ic": counts.n_ic, "n_iu": counts.n_iu},
        "t_u": counts.t_u,
        "flags": flags,
    }


def write_metrics_json(report: dict, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="ascii") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
