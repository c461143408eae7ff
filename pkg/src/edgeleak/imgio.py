"""Image file helpers: 8-bit PNG in, float arrays in [0,1] out."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

LUMA = (0.299, 0.587, 0.114)


def to_gray(img: np.ndarray) -> np.ndarray:
    """Collapse an (H,W,3) array to (H,W) with ITU-R 601 luma weights."""
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[2] == 3:
        return img @ np.asarray(LUMA, dtype=img.dtype)
    raise ValueError(f"expected (H,W) or (H,W,3) image, got shape {img.shape}")


def load_image(path: str | Path, grayscale: bool = True, size: int | None = None) -> np.ndarray:
    """Load a PNG as float32 in [0,1]; optionally resize to (size, size)."""
    with Image.open(path) as im:
        im = im.convert("L" if grayscale else "RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr


def load_for_model(path: str | Path, preprocess: dict) -> np.ndarray:
    """Load + resize + normalize into a (C, H, W) float32 model input.

    `preprocess` carries resolution, grayscale flag, and the per-channel
    mean/std computed from the training split.
    """
    arr = load_image(path, grayscale=preprocess.get("grayscale", True),
                     size=int(preprocess["resolution"]))
    if arr.ndim == 2:
        arr = arr[None, :, :]
    else:
        arr = np.moveaxis(arr, -1, 0)
    mean = np.asarray(preprocess.get("mean", 0.0), dtype=np.float32).reshape(-1, 1, 1)
    std = np.asarray(preprocess.get("std", 1.0), dtype=np.float32).reshape(-1, 1, 1)
    return (arr - mean) / std


def save_image(path: str | Path, img: np.ndarray) -> None:
    """Write a float image in [0,1] as 8-bit PNG (intensity = round(255*v))."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("refusing to write an empty image")
    data = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    mode = "L" if data.ndim == 2 else "RGB"
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data, mode=mode).save(path, format="PNG")
