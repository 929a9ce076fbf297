"""Geometric Matching Index and the Dice coefficient it is built on.

For every test pair ``(a, b)`` the two Successor reconstructions
``S_B(a)`` and ``S_A(b)`` are binarised and compared with Dice; a pair counts
as matched when its Dice is strictly below the threshold.  Low overlap means
the two synthesised structures sit side by side rather than on top of each
other.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np
import torch
from skimage.filters import threshold_otsu

from .errors import ValidationError
from .networks import ModelBundle, inference_mode, module_dtype

log = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (0.1, 0.2, 0.3)


def binarize(img, method: str = "fixed", threshold: float = 0.5) -> np.ndarray:
    """Foreground where the intensity, mapped from [-1, 1] to [0, 1], exceeds the threshold."""
    x = (np.asarray(img, dtype=np.float64) + 1.0) / 2.0
    if not np.isfinite(x).all():
        raise ValidationError("img", "image contains non-finite values")
    if method == "otsu":
        if np.ptp(x) == 0:
            warnings.warn("Otsu threshold undefined on a constant image; using 0.5", RuntimeWarning)
            threshold = 0.5
        else:
            threshold = float(threshold_otsu(x))
    elif method != "fixed":
        raise ValidationError("method", f"unknown binarisation {method!r}")
    return x > threshold


def dsc(x, y) -> float:
    """Dice similarity ``2|x & y| / (|x| + |y|)``; 0 when both masks are empty."""
    x = np.asarray(x, bool)
    y = np.asarray(y, bool)
    if x.shape != y.shape:
        raise ValidationError("y", f"mask shape {y.shape} does not match {x.shape}")
    total = int(x.sum()) + int(y.sum())
    if total == 0:
        return 0.0
    return 2.0 * int(np.logical_and(x, y).sum()) / total


@dataclass
class GmiReport:
    pair_ids: List[str]
    dsc_values: List[float]
    thresholds: List[float]
    matched_fraction: Dict[float, float]
    n_pairs: int
    degenerate: List[str] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["pair_id", "dsc"])
            for pid, d in zip(self.pair_ids, self.dsc_values):
                w.writerow([pid, repr(float(d))])
            for t in self.thresholds:
                w.writerow(["TS", repr(float(t)), "matched_fraction", repr(self.matched_fraction[t])])

    @classmethod
    def read_csv(cls, path) -> "GmiReport":
        ids, values, thresholds, fractions = [], [], [], {}
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][:2] != ["pair_id", "dsc"]:
            raise ValidationError("report", f"{path}:1: missing 'pair_id,dsc' header")
        for lineno, row in enumerate(rows[1:], 2):
            try:
                if row and row[0] == "TS":
                    if len(row) != 4 or row[2] != "matched_fraction":
                        raise ValueError("malformed summary row")
                    t = float(row[1])
                    thresholds.append(t)
                    fractions[t] = float(row[3])
                elif len(row) == 2:
                    ids.append(row[0])
                    values.append(float(row[1]))
                else:
                    raise ValueError(f"expected 2 fields, got {len(row)}")
            except ValueError as exc:
                raise ValidationError("report", f"{path}:{lineno}: {exc}") from None
        return cls(ids, values, thresholds, fractions, len(ids))


def matched_fractions(dsc_values: Sequence[float], thresholds: Sequence[float]) -> Dict[float, float]:
    n = len(dsc_values)
    if n == 0:
        raise ValidationError("test_pairs", "GMI needs at least one pair")
    out = {}
    for t in thresholds:
        if not 0.0 < t <= 1.0:
            raise ValidationError("thresholds", f"{t} is outside (0, 1]")
        out[float(t)] = sum(1 for d in dsc_values if d < t) / n
    return out


def gmi_from_images(pairs, thresholds=DEFAULT_THRESHOLDS, method: str = "fixed") -> GmiReport:
    """GMI over ``(pair_id, rec_of_a, rec_of_b)`` triples of reconstructed images."""
    pairs = sorted(pairs, key=lambda p: p[0])
    ids, values, degenerate = [], [], []
    for pid, x, y in pairs:
        mx, my = binarize(x, method), binarize(y, method)
        if not mx.any() and not my.any():
            degenerate.append(pid)
            log.debug("GMI pair %s: both masks empty, Dice taken as 0", pid)
        ids.append(pid)
        values.append(dsc(mx, my))
    fractions = matched_fractions(values, thresholds)
    return GmiReport(ids, values, [float(t) for t in thresholds], fractions, len(ids), degenerate)


def reconstruct_pairs(test_pairs, bundle: ModelBundle, domain_a: str = "membrane",
                      batch_size: int = 64):
    """Yield ``(pair_id, S_B(a), S_A(b))`` in inference mode."""
    domain_b = "nuclei" if domain_a == "membrane" else "membrane"
    dtype = module_dtype(bundle)
    out = []
    with inference_mode(bundle):
        for i in range(0, len(test_pairs), batch_size):
            chunk = test_pairs[i:i + batch_size]
            a = torch.as_tensor(np.stack([getattr(p, domain_a) for p in chunk])[:, None], dtype=dtype)
            b = torch.as_tensor(np.stack([getattr(p, domain_b) for p in chunk])[:, None], dtype=dtype)
            rec_b = bundle.S_B(a).numpy()
            rec_a = bundle.S_A(b).numpy()
            for p, rb, ra in zip(chunk, rec_b, rec_a):
                out.append((p.pair_id, rb[0], ra[0]))
    return out


def compute_gmi(test_pairs, bundle: ModelBundle, thresholds=DEFAULT_THRESHOLDS,
                binarize_method: str = "fixed", domain_a: str = "membrane") -> GmiReport:
    if len(test_pairs) == 0:
        raise ValidationError("test_pairs", "GMI needs at least one pair")
    recs = reconstruct_pairs(test_pairs, bundle, domain_a)
    return gmi_from_images(recs, thresholds, binarize_method)


def gmi_from_masks(mask_pairs, thresholds=DEFAULT_THRESHOLDS) -> GmiReport:
    """GMI over ``(pair_id, mask_x, mask_y)`` triples of ready-made masks."""
    mask_pairs = sorted(mask_pairs, key=lambda p: p[0])
    ids = [p[0] for p in mask_pairs]
    values = [dsc(x, y) for _, x, y in mask_pairs]
    return GmiReport(ids, values, [float(t) for t in thresholds],
                     matched_fractions(values, thresholds), len(ids))
