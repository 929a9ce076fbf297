"""8-bit PNG encoding of [-1, 1] images and binary masks."""
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError


def to_uint8(img) -> np.ndarray:
    """Map [-1, 1] to 0..255 via round((v + 1) * 127.5)."""
    v = np.clip(np.asarray(img, dtype=np.float64), -1.0, 1.0)
    return np.round((v + 1.0) * 127.5).astype(np.uint8)


def from_uint8(arr) -> np.ndarray:
    return np.asarray(arr, dtype=np.float64) / 127.5 - 1.0


def save_image_png(img, path) -> None:
    Image.fromarray(to_uint8(img), mode="L").save(path, optimize=False)


def save_mask_png(mask, path) -> None:
    arr = np.where(np.asarray(mask, bool), 255, 0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, optimize=False)


def load_png(path) -> np.ndarray:
    """Raw pixel array (uint8, 2-D for grayscale or 3-D for RGB)."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB" if "A" in im.mode or im.mode == "P" else "L")
            return np.array(im)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def load_mask_png(path) -> np.ndarray:
    arr = load_png(path)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return arr > 127
