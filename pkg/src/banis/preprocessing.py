"""Image conditioning: grayscale, Gaussian denoise, resize, crop, normalise.

Input images are 8-bit (0..255).  Float inputs are refused so that an image
already mapped to [-1, 1] is never normalised a second time.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .datagen import ManifestEntry, read_manifest, resolve, split_indices
from .errors import ValidationError
from .pngio import load_mask_png, load_png

log = logging.getLogger(__name__)

LUMA = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class PreprocessConfig:
    gaussian_sigma: float = 1.0
    intermediate_size: int = 128
    crop_size: int = 64
    test_fraction: float = 0.10

    def __post_init__(self):
        if self.crop_size > self.intermediate_size:
            raise ValidationError("crop_size", f"{self.crop_size} exceeds intermediate_size "
                                  f"{self.intermediate_size}")
        if self.crop_size < 1:
            raise ValidationError("crop_size", f"must be >= 1, got {self.crop_size}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValidationError("test_fraction", f"must lie in (0, 1), got {self.test_fraction}")
        if self.gaussian_sigma < 0:
            raise ValidationError("gaussian_sigma", f"must be >= 0, got {self.gaussian_sigma}")


@dataclass
class ImagePair:
    pair_id: str
    membrane: np.ndarray
    nuclei: np.ndarray
    split: str = "train"
    membrane_mask: Optional[np.ndarray] = None
    nuclei_mask: Optional[np.ndarray] = None


def to_grayscale(raw: np.ndarray) -> np.ndarray:
    if raw.ndim == 2:
        return raw.astype(np.float64)
    if raw.ndim == 3 and raw.shape[2] in (3, 4):
        rgb = raw[..., :3].astype(np.float64)
        return rgb @ np.asarray(LUMA)
    raise ValidationError("raw", f"expected (H, W) or (H, W, 3) image, got shape {raw.shape}")


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma == 0:
        return img
    return ndimage.gaussian_filter(img, sigma, mode="reflect", truncate=4.0)


def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres and no antialiasing."""
    if img.shape == (size, size):
        return img
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float64))[None, None]
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False, antialias=False)
    return out[0, 0].numpy()


def crop(img: np.ndarray, size: int, center: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Square crop of side ``size``; ``center`` is (row, col), default image centre."""
    h, w = img.shape
    if center is None:
        top, left = (h - size) // 2, (w - size) // 2
    else:
        top, left = int(center[0]) - size // 2, int(center[1]) - size // 2
    if top < 0 or left < 0 or top + size > h or left + size > w:
        raise ValidationError(
            "crop_center",
            f"{size}x{size} window at rows {top}..{top + size - 1}, cols {left}..{left + size - 1} "
            f"falls outside the {h}x{w} image (center={center})",
        )
    return img[top:top + size, left:left + size]


def normalize(img: np.ndarray) -> np.ndarray:
    return np.clip(img / 127.5 - 1.0, -1.0, 1.0)


def preprocess_image(raw, cfg: PreprocessConfig = PreprocessConfig(), crop_center=None,
                     return_stages: bool = False):
    """Run the conditioning chain on one 8-bit image.

    With ``return_stages=True`` returns ``(out, stages)`` where ``stages`` maps
    each stage name to its intermediate array, in execution order.
    """
    raw = np.asarray(raw)
    if raw.size == 0:
        raise ValidationError("raw", "empty image")
    if not np.issubdtype(raw.dtype, np.integer):
        raise ValidationError("raw", f"expected 8-bit integer pixels, got dtype {raw.dtype}; "
                              "normalised images cannot be preprocessed again")
    if raw.min() < 0 or raw.max() > 255:
        raise ValidationError("raw", "pixel values outside 0..255")

    stages = {}
    x = stages["grayscale"] = to_grayscale(raw)
    x = stages["blur"] = gaussian_blur(x, cfg.gaussian_sigma)
    x = stages["resize"] = resize_bilinear(x, cfg.intermediate_size)
    x = stages["crop"] = crop(x, cfg.crop_size, crop_center)
    x = stages["normalize"] = normalize(x)
    if return_stages:
        return x, stages
    return x


def load_pair(manifest_path, entry: ManifestEntry, cfg: PreprocessConfig) -> ImagePair:
    raw_m = load_png(resolve(manifest_path, entry.membrane_path))
    raw_n = load_png(resolve(manifest_path, entry.nuclei_path))
    if raw_m.shape[:2] != raw_n.shape[:2]:
        raise ValidationError("pair", f"{entry.pair_id}: membrane {raw_m.shape[:2]} and nuclei "
                              f"{raw_n.shape[:2]} differ in size")
    masks = [None, None]
    for i, rel in enumerate((entry.membrane_mask_path, entry.nuclei_mask_path)):
        if rel:
            m = load_mask_png(resolve(manifest_path, rel))
            if m.shape == (cfg.crop_size, cfg.crop_size):
                masks[i] = m
    return ImagePair(entry.pair_id, preprocess_image(raw_m, cfg), preprocess_image(raw_n, cfg),
                     entry.split, masks[0], masks[1])


def build_splits(manifest, cfg: PreprocessConfig = PreprocessConfig(),
                 seed: Optional[int] = None) -> Tuple[List[ImagePair], List[ImagePair]]:
    """Load every pair of a manifest and split it into (train, test).

    ``seed=None`` keeps the split recorded in the manifest; an integer seed
    reshuffles with ``floor(n * test_fraction)`` test pairs.  Both images of a
    pair always land in the same split.
    """
    entries = read_manifest(manifest)
    if not entries:
        raise ValidationError("manifest", f"{manifest} lists no pairs")
    pairs = []
    for e in entries:
        try:
            pairs.append(load_pair(manifest, e, cfg))
        except OSError as exc:
            raise type(exc)(f"pair {e.pair_id}: {exc}") from exc
    if seed is not None:
        _, test_idx = split_indices(len(pairs), cfg.test_fraction, seed)
        test_idx = set(test_idx)
        for i, p in enumerate(pairs):
            p.split = "test" if i in test_idx else "train"
    train = [p for p in pairs if p.split == "train"]
    test = [p for p in pairs if p.split == "test"]
    return train, test


def stack_domain(pairs: List[ImagePair], domain: str) -> np.ndarray:
    """(N, 1, H, W) float32 array of the membrane or nuclei images."""
    attr = {"membrane": "membrane", "nuclei": "nuclei"}[domain]
    return np.stack([getattr(p, attr) for p in pairs])[:, None].astype(np.float32)
