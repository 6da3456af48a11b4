"""Input validation for image-to-image estimators."""
import numpy as np
from sklearn.utils.validation import check_array


def check_images(X, channels=None, divisor=1):
    """Validate a (N, H, W, C) stack of label maps and return it as float32.

    A single (H, W, C) image is promoted to a batch of one.
    """
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float32)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"expected images shaped (N, H, W, C), got {X.shape}")
    if channels is not None and X.shape[-1] != channels:
        raise ValueError(f"expected {channels} channels, got {X.shape[-1]}")
    h, w = X.shape[1:3]
    if h % divisor or w % divisor:
        raise ValueError(f"image size {h}x{w} is not divisible by {divisor}")
    return X


def check_targets(y, X):
    """Validate (N, H, W) field maps matching the images in ``X``."""
    y = check_array(y, allow_nd=True, ensure_2d=False, dtype=np.float32)
    if y.ndim == 4 and y.shape[-1] == 1:
        y = y[..., 0]
    if y.shape != X.shape[:3]:
        raise ValueError(f"targets {y.shape} do not match images {X.shape[:3]}")
    return y
