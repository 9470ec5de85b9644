"""PNG round-trips between float arrays and 8-bit images."""

import numpy as np
from PIL import Image

from .errors import DatasetError


def save_rgb(path, img):
    """Save a (3, H, W) float array in [0, 1] as an RGB PNG."""
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DatasetError(f"expected (3, H, W) image, got shape {arr.shape}")
    u8 = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8.transpose(1, 2, 0), mode="RGB").save(path)


def load_rgb(path):
    """Load an RGB PNG as a (3, H, W) float32 array in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr.transpose(2, 0, 1) / 255.0


def save_mask(path, mask):
    """Save a binary (H, W) array as a grayscale PNG with values 0/255."""
    arr = np.asarray(mask)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise DatasetError(f"expected (H, W) mask, got shape {arr.shape}")
    u8 = np.where(arr >= 0.5, 255, 0).astype(np.uint8)
    Image.fromarray(u8, mode="L").save(path)


def load_mask(path):
    """Load a 0/255 grayscale PNG as a binary (H, W) float32 array."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr >= 128).astype(np.float32)


def save_gray(path, arr):
    """Save an (H, W) float array in [0, 1] as a grayscale PNG; used for
    probability maps and attention heatmaps."""
    a = np.asarray(arr)
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise DatasetError(f"expected (H, W) array, got shape {a.shape}")
    u8 = np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8, mode="L").save(path)
