"""Input checks shared by the estimators.

Each helper returns the validated array (converted to float) or raises a
``ShapeMismatchError`` / ``ValueError`` naming the offending argument.
"""
from __future__ import annotations

import numpy as np

from .exceptions import ShapeMismatchError


def check_images(X, image_size=None, name="X") -> np.ndarray:
    """(N, H, W, 3) finite images in [0, 1]."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ShapeMismatchError(f"{name} must be (N, H, W, 3), got {X.shape}")
    if image_size is not None and tuple(X.shape[1:3]) != tuple(image_size):
        raise ShapeMismatchError(f"{name} resolution {X.shape[1:3]} does not match {tuple(image_size)}")
    if not np.isfinite(X).all():
        raise ValueError(f"{name} contains non-finite values")
    if X.size and (X.min() < 0 or X.max() > 1):
        raise ValueError(f"{name} values must lie in [0, 1], got [{X.min():.3g}, {X.max():.3g}]")
    return X


def check_boxes(y, n=None, image_size=None, name="y") -> np.ndarray:
    """(N, 4) boxes with x1 < x2, y1 < y2, optionally inside the image."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or y.shape[1] != 4:
        raise ShapeMismatchError(f"{name} must be (N, 4), got {y.shape}")
    if n is not None and len(y) != n:
        raise ShapeMismatchError(f"{name} has {len(y)} boxes for {n} images")
    if not np.isfinite(y).all():
        raise ValueError(f"{name} contains non-finite values")
    if (y[:, 2] <= y[:, 0]).any() or (y[:, 3] <= y[:, 1]).any():
        raise ValueError(f"{name} contains boxes with non-positive width or height")
    if image_size is not None:
        h, w = image_size
        if (y[:, :2] < 0).any() or (y[:, 2] > w).any() or (y[:, 3] > h).any():
            raise ValueError(f"{name} contains boxes outside the {h}x{w} image")
    return y


def check_texels(texels, texture_size=None, name="texels") -> np.ndarray:
    """(H_t, W_t, 3) texture in [0, 1]."""
    t = np.asarray(texels, dtype=np.float64)
    if t.ndim != 3 or t.shape[-1] != 3:
        raise ShapeMismatchError(f"{name} must be (H_t, W_t, 3), got {t.shape}")
    if texture_size is not None and tuple(t.shape[:2]) != tuple(texture_size):
        raise ShapeMismatchError(f"{name} size {t.shape[:2]} does not match {tuple(texture_size)}")
    if not np.isfinite(t).all() or t.min() < 0 or t.max() > 1:
        raise ValueError(f"{name} must be finite and lie in [0, 1]")
    return t
