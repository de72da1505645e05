"""Image IO and the fixed-size resampling used by the selection stage.

Convention everywhere: RGB, float32, values in [0,1], arrays shaped (H, W, 3).
"""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from .types import Box

LOCAL_PATCH_SIZE = 224
THUMBNAIL_SIZE = 64


class ImagingError(Exception):
    pass


def load_image(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise ImagingError(f"cannot read image {path}: {exc}")
    return arr


def save_image_png(image: np.ndarray, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def _pixel_window(box: Box, width: int, height: int) -> tuple[int, int, int, int]:
    # snap a float box outward to the integer pixel grid
    x1 = max(0, int(np.floor(box.x1)))
    y1 = max(0, int(np.floor(box.y1)))
    x2 = min(width, int(np.ceil(box.x2)))
    y2 = min(height, int(np.ceil(box.y2)))
    return x1, y1, x2, y2


def crop_local(image: np.ndarray, box: Box) -> np.ndarray:
    """Resample the box region to a 224x224 patch with bilinear interpolation."""
    h, w = image.shape[:2]
    if box.violations(w, h):
        raise ImagingError(f"box {box.as_list()} invalid for {w}x{h} frame")
    if box.area < 1.0:
        raise ImagingError(f"degenerate box with area {box.area:.3f} < 1 px^2")
    x1, y1, x2, y2 = _pixel_window(box, w, h)
    region = image[y1:y2, x1:x2]
    if region.shape[0] == LOCAL_PATCH_SIZE and region.shape[1] == LOCAL_PATCH_SIZE:
        return region.copy()
    return cv2.resize(region, (LOCAL_PATCH_SIZE, LOCAL_PATCH_SIZE), interpolation=cv2.INTER_LINEAR)


def thumbnail(image: np.ndarray) -> np.ndarray:
    """Resample the whole frame to 64x64, same convention as crop_local."""
    if image.size == 0:
        raise ImagingError("empty image")
    if image.shape[0] == THUMBNAIL_SIZE and image.shape[1] == THUMBNAIL_SIZE:
        return image.copy()
    return cv2.resize(image, (THUMBNAIL_SIZE, THUMBNAIL_SIZE), interpolation=cv2.INTER_LINEAR)
