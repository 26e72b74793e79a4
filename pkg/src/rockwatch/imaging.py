"""Image buffers: numpy arrays, ``(H, W)`` grayscale or ``(H, W, 3)`` RGB, uint8."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp", ".gif"}

# BT.601 luma weights
LUMA_WEIGHTS = (0.299, 0.587, 0.114)
LUMA_WEIGHTS_MILLI = (299, 587, 114)


def to_luma(img) -> np.ndarray:
    """Float64 BT.601 luma of a grayscale or RGB(A) buffer."""
    a = np.asarray(img)
    if a.ndim == 2:
        return a.astype(np.float64)
    if a.ndim == 3 and a.shape[2] in (3, 4):
        rgb = a[..., :3].astype(np.float64)
        return rgb @ np.array(LUMA_WEIGHTS)
    raise ValueError(f"expected (H, W) or (H, W, 3|4) image, got shape {a.shape}")


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        im.load()
        if im.mode in ("L", "P", "I;16", "I", "F", "1") and "transparency" not in im.info:
            if im.mode == "P":
                return np.asarray(im.convert("RGB"))
            return np.asarray(im.convert("L"))
        return np.asarray(im.convert("RGB"))


def save_image(path, img: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    im = Image.fromarray(np.ascontiguousarray(img))
    if Path(path).suffix.lower() == ".png":
        # sensor noise barely compresses; a fast zlib level is nearly as small
        im.save(path, compress_level=1)
    else:
        im.save(path)


def is_image_path(path: Path) -> bool:
    return path.suffix.lower() in IMAGE_SUFFIXES


def to_uint8(a: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(a), 0, 255).astype(np.uint8)
