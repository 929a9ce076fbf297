"""Procedural membrane/nuclei image pairs with exact ground-truth masks.

Cells are non-overlapping ellipses.  The membrane channel draws each cell
boundary as a band of ``membrane_thickness`` pixels; the nuclei channel draws
one disc per cell, placed far enough inside the cell that it can never touch
the band.  Masks are computed on the pixel grid without antialiasing, images
are rendered on a supersampled grid and box-averaged.
"""
from __future__ import annotations

import hashlib
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Tuple

import numpy as np
from scipy import ndimage

from .errors import DataError, ValidationError
from .pngio import save_image_png, save_mask_png

log = logging.getLogger(__name__)

SUPERSAMPLE = 4
BACKGROUND = -0.8
FOREGROUND = 0.8
# free pixels kept between a nucleus and the membrane band, and between cells
NUCLEUS_MARGIN = 1.0
CELL_GAP = 2.0
NUCLEUS_JITTER = 2.0
MAX_LAYOUT_RESTARTS = 200
MAX_CELL_ATTEMPTS = 400


@dataclass(frozen=True)
class EmbryoSpec:
    cell_count: int = 3
    canvas_size: int = 64
    membrane_thickness: float = 2.0
    nucleus_radius_range: Tuple[float, float] = (3.0, 5.0)
    noise_sigma: float = 0.05
    seed: int = 0

    def validate(self) -> "EmbryoSpec":
        if int(self.cell_count) != self.cell_count or self.cell_count < 1:
            raise ValidationError("cell_count", f"must be an integer >= 1, got {self.cell_count}")
        if self.canvas_size < 16:
            raise ValidationError("canvas_size", f"must be >= 16, got {self.canvas_size}")
        if self.membrane_thickness <= 0:
            raise ValidationError("membrane_thickness", f"must be > 0, got {self.membrane_thickness}")
        lo, hi = self.nucleus_radius_range
        if lo <= 0 or hi < lo:
            raise ValidationError("nucleus_radius_range",
                                  f"need 0 < min <= max, got ({lo}, {hi})")
        if not 0.0 <= self.noise_sigma < 1.0:
            raise ValidationError("noise_sigma", f"must lie in [0, 1), got {self.noise_sigma}")
        if 2 * (self.min_semi_axis + CELL_GAP) > self.canvas_size:
            raise ValidationError(
                "nucleus_radius_range",
                f"cells need a semi-axis of at least {self.min_semi_axis:.1f}px to hold the "
                f"nucleus, which does not fit a {self.canvas_size}px canvas",
            )
        return self

    @property
    def min_semi_axis(self) -> float:
        """Smallest cell inradius that keeps nuclei clear of the membrane band."""
        return self.nucleus_radius_range[1] + self.membrane_thickness + NUCLEUS_MARGIN + 1.0

    @property
    def max_semi_axis(self) -> float:
        return min(self.min_semi_axis + max(2.0, self.canvas_size / 12), self.canvas_size / 2 - CELL_GAP)


@dataclass
class Cell:
    cx: float
    cy: float
    a: float  # semi-axis along angle
    b: float
    angle: float
    nucleus: Tuple[float, float, float] = (0.0, 0.0, 0.0)  # x, y, radius


@dataclass
class GroundTruthPair:
    membrane_image: np.ndarray
    nuclei_image: np.ndarray
    membrane_mask: np.ndarray
    nuclei_mask: np.ndarray
    seed: int
    cells: List[Cell] = field(default_factory=list, repr=False)


def _ellipse_inside(cell: Cell, xs, ys, grow: float = 0.0):
    """Points inside the ellipse whose semi-axes are enlarged by ``grow``."""
    c, s = math.cos(cell.angle), math.sin(cell.angle)
    dx, dy = xs - cell.cx, ys - cell.cy
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (u / (cell.a + grow)) ** 2 + (v / (cell.b + grow)) ** 2 <= 1.0


def _grid(size: int, factor: int = 1):
    # pixel centres in canvas units
    coords = (np.arange(size * factor) + 0.5) / factor
    return np.meshgrid(coords, coords)


def _layout(spec: EmbryoSpec, rng: np.random.Generator) -> List[Cell]:
    size = spec.canvas_size
    xs, ys = _grid(size)
    lo, hi = spec.min_semi_axis, spec.max_semi_axis
    for _ in range(MAX_LAYOUT_RESTARTS):
        cells: List[Cell] = []
        occupied = np.zeros((size, size), bool)
        for _ in range(spec.cell_count):
            for _ in range(MAX_CELL_ATTEMPTS):
                a, b = rng.uniform(lo, hi, size=2)
                angle = rng.uniform(0, math.pi)
                r = max(a, b) + CELL_GAP
                if 2 * r >= size:
                    continue
                cx, cy = rng.uniform(r, size - r, size=2)
                cell = Cell(cx, cy, a, b, angle)
                if not (occupied & _ellipse_inside(cell, xs, ys, grow=CELL_GAP)).any():
                    occupied |= _ellipse_inside(cell, xs, ys)
                    cells.append(cell)
                    break
            else:
                break
        if len(cells) == spec.cell_count:
            return cells
    raise ValidationError("cell_count",
                          f"could not pack {spec.cell_count} cells on a {size}px canvas")


def _cell_masks(cells, size, factor, thickness):
    """Filled interior, membrane band and distance-to-outside on a grid."""
    xs, ys = _grid(size, factor)
    filled = np.zeros(xs.shape, bool)
    for cell in cells:
        filled |= _ellipse_inside(cell, xs, ys)
    # distance in canvas pixels from each inside sample to the nearest outside sample
    depth = ndimage.distance_transform_edt(filled) / factor
    band = filled & (depth <= thickness)
    return filled, band, depth


def _place_nuclei(cells, spec, depth, rng):
    """One nucleus per cell, jittered around the cell centre, clear of the band."""
    size = spec.canvas_size
    xs, ys = _grid(size)
    lo, hi = spec.nucleus_radius_range
    thickness = spec.membrane_thickness
    for cell in cells:
        r = rng.uniform(lo, hi)
        near = (xs - cell.cx) ** 2 + (ys - cell.cy) ** 2 <= NUCLEUS_JITTER ** 2
        ok = near & _ellipse_inside(cell, xs, ys) & (depth > thickness + r + NUCLEUS_MARGIN)
        cand = np.flatnonzero(ok)
        if cand.size == 0:
            # inradius guarantees the ellipse centre qualifies
            cell.nucleus = (cell.cx, cell.cy, r)
            continue
        k = cand[rng.integers(cand.size)]
        cell.nucleus = (float(xs.flat[k]), float(ys.flat[k]), r)


def _nuclei_mask(cells, size, factor):
    xs, ys = _grid(size, factor)
    mask = np.zeros(xs.shape, bool)
    for cell in cells:
        x, y, r = cell.nucleus
        mask |= (xs - x) ** 2 + (ys - y) ** 2 <= r * r
    return mask


def _coverage(fine_mask, factor):
    n = fine_mask.shape[0] // factor
    return fine_mask.reshape(n, factor, n, factor).mean(axis=(1, 3))


def _render(coverage, gain, noise_sigma, rng):
    img = BACKGROUND + (FOREGROUND - BACKGROUND) * gain * coverage
    if noise_sigma > 0:
        # noise_sigma is a fraction of the full [-1, 1] range
        img = img + rng.normal(0.0, 2.0 * noise_sigma, size=img.shape)
    return np.clip(img, -1.0, 1.0)


def generate_pair(spec: EmbryoSpec) -> GroundTruthPair:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    size = spec.canvas_size
    cells = _layout(spec, rng)

    _, membrane_mask, depth = _cell_masks(cells, size, 1, spec.membrane_thickness)
    _place_nuclei(cells, spec, depth, rng)
    nuclei_mask = _nuclei_mask(cells, size, 1)

    _, fine_band, _ = _cell_masks(cells, size, SUPERSAMPLE, spec.membrane_thickness)
    fine_nuclei = _nuclei_mask(cells, size, SUPERSAMPLE)
    gains = rng.uniform(0.85, 1.0, size=2)
    membrane = _render(_coverage(fine_band, SUPERSAMPLE), gains[0], spec.noise_sigma, rng)
    nuclei = _render(_coverage(fine_nuclei, SUPERSAMPLE), gains[1], spec.noise_sigma, rng)
    return GroundTruthPair(membrane, nuclei, membrane_mask, nuclei_mask, spec.seed, cells)


def pair_seed(template_seed: int, index: int) -> int:
    """Per-pair seed derived from the template seed; stable across platforms."""
    digest = hashlib.sha256(f"{template_seed}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def split_indices(n: int, test_fraction: float, seed: int):
    """Deterministic train/test index split; the test size is floor(n * fraction)."""
    if not 0.0 < test_fraction < 1.0:
        raise ValidationError("test_fraction", f"must lie in (0, 1), got {test_fraction}")
    n_test = int(math.floor(n * test_fraction + 1e-9))
    order = np.random.default_rng(seed).permutation(n)
    test = sorted(order[:n_test].tolist())
    train = sorted(order[n_test:].tolist())
    return train, test


@dataclass(frozen=True)
class ManifestEntry:
    pair_id: str
    split: str
    membrane_path: str
    nuclei_path: str
    membrane_mask_path: str
    nuclei_mask_path: str
    seed: int

    def to_line(self) -> str:
        return ",".join([self.pair_id, self.split, self.membrane_path, self.nuclei_path,
                         self.membrane_mask_path, self.nuclei_mask_path, str(self.seed)])


def write_manifest(entries, path) -> None:
    Path(path).write_text("".join(e.to_line() + "\n" for e in entries))


def read_manifest(path) -> List[ManifestEntry]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc.strerror}") from exc
    entries = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 7:
            raise ValidationError("manifest", f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
        try:
            seed = int(parts[6])
        except ValueError:
            raise ValidationError("manifest", f"{path}:{lineno}: seed {parts[6]!r} is not an integer")
        if parts[1] not in ("train", "test"):
            raise ValidationError("manifest", f"{path}:{lineno}: split must be train or test")
        entries.append(ManifestEntry(*parts[:6], seed))
    return entries


def resolve(manifest_path, rel: str) -> Path:
    """Manifest paths are relative to the manifest's directory."""
    p = Path(rel)
    return p if p.is_absolute() else Path(manifest_path).parent / p


def generate_dataset(spec_template: EmbryoSpec, n_pairs: int, out_dir, test_fraction: float = 0.1):
    """Write ``n_pairs`` pairs plus masks under ``out_dir`` and a ``manifest.csv``.

    Returns the list of manifest entries.  Output bytes depend only on the
    template and ``n_pairs``.
    """
    if int(n_pairs) != n_pairs or n_pairs < 1:
        raise ValidationError("n_pairs", f"must be an integer >= 1, got {n_pairs}")
    spec_template.validate()
    out = Path(out_dir)
    try:
        for sub in ("membrane", "nuclei", "membrane_mask", "nuclei_mask"):
            (out / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc.strerror}") from exc

    _, test = split_indices(n_pairs, test_fraction, spec_template.seed)
    test = set(test)
    entries = []
    for i in range(n_pairs):
        seed = pair_seed(spec_template.seed, i)
        pair = generate_pair(replace(spec_template, seed=seed))
        pid = f"pair{i:05d}"
        rel = {sub: os.path.join(sub, pid + ".png")
               for sub in ("membrane", "nuclei", "membrane_mask", "nuclei_mask")}
        try:
            save_image_png(pair.membrane_image, out / rel["membrane"])
            save_image_png(pair.nuclei_image, out / rel["nuclei"])
            save_mask_png(pair.membrane_mask, out / rel["membrane_mask"])
            save_mask_png(pair.nuclei_mask, out / rel["nuclei_mask"])
        except OSError as exc:
            raise DataError(f"cannot write pair {pid} under {out}: {exc}") from exc
        entries.append(ManifestEntry(pid, "test" if i in test else "train", rel["membrane"],
                                     rel["nuclei"], rel["membrane_mask"], rel["nuclei_mask"], seed))
    write_manifest(entries, out / "manifest.csv")
    log.info("wrote %d pairs (%d test) to %s", n_pairs, len(test), out)
    return entries
