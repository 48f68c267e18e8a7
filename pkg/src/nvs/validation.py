"""Input validation helpers shared by the estimators."""

from __future__ import annotations

import numpy as np

from .exceptions import BadConfig, ShapeError


def check_image(x, *, name="image", allow_gray=True) -> np.ndarray:
    """Return ``x`` as a float64 ``(H, W, C)`` (or ``(H, W)``) array in [0, 1]."""
    arr = np.asarray(x)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    else:
        arr = arr.astype(np.float64)
    if arr.ndim == 2 and allow_gray:
        pass
    elif arr.ndim != 3 or arr.shape[-1] not in (1, 3):
        raise ShapeError(f"{name}: expected (H, W, 3) array, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name}: contains non-finite values")
    if arr.min() < -1e-6 or arr.max() > 1 + 1e-6:
        raise ValueError(f"{name}: values must lie in [0, 1]")
    return arr


def check_same_shape(a, b, names=("x", "y")):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"{names[0]} has shape {a.shape} but {names[1]} has shape {b.shape}")


def check_image_pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    check_same_shape(x, y)
    return check_image(x, name="x"), check_image(y, name="y")


def check_image_set(images, masks=None, patch_size: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Validate ``(N, H, W, 3)`` images and composite them over white.

    Returns float32 images and float32 masks of shape ``(N, H, W)``.
    """
    imgs = np.asarray(images)
    if imgs.dtype == np.uint8:
        imgs = imgs.astype(np.float32) / 255.0
    imgs = imgs.astype(np.float32)
    if imgs.ndim == 3:
        imgs = imgs[None]
    if imgs.ndim != 4 or imgs.shape[-1] != 3 or imgs.shape[0] < 1:
        raise ShapeError(f"expected (N, H, W, 3) images, got {imgs.shape}")
    if imgs.min() < -1e-6 or imgs.max() > 1 + 1e-6:
        raise ValueError("image values must lie in [0, 1]")
    if masks is None:
        m = np.ones(imgs.shape[:3], np.float32)
    else:
        m = np.asarray(masks, dtype=np.float32)
        if m.ndim == 2:
            m = m[None]
        if m.shape != imgs.shape[:3]:
            raise ShapeError(f"mask shape {m.shape} does not match images {imgs.shape[:3]}")
    if patch_size is not None:
        H, W = imgs.shape[1:3]
        if H % patch_size or W % patch_size:
            raise ShapeError(f"image size {H}x{W} not divisible by patch size {patch_size}")
    comp = imgs * m[..., None] + (1.0 - m[..., None])
    return comp, m


def check_positive_int(value, key, minimum=1) -> int:
    if not isinstance(value, (int, np.integer)) or value < minimum:
        raise BadConfig(key, f"must be an integer >= {minimum}, got {value!r}")
    return int(value)
