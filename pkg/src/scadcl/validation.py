"""Input checks shared by the estimator and the runner."""
from __future__ import annotations

import numpy as np


def check_images(X, image_size: int | None = None, channels: int = 3) -> np.ndarray:
    """Return ``X`` as a C-contiguous float32 (n, C, H, W) array in channel-first layout."""
    X = np.ascontiguousarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"expected images of shape (n, C, H, W), got {X.shape}")
    if X.shape[1] != channels:
        raise ValueError(f"expected {channels} channels, got {X.shape[1]}")
    if image_size is not None and X.shape[2:] != (image_size, image_size):
        raise ValueError(f"expected {image_size}x{image_size} images, got {X.shape[2]}x{X.shape[3]}")
    if not np.isfinite(X).all():
        raise ValueError("images contain NaN or infinity")
    return X


def check_multilabel(Y, n_samples: int | None = None, n_classes: int | None = None) -> np.ndarray:
    """Return ``Y`` as a uint8 multi-hot (n, C) matrix."""
    Y = np.asarray(Y)
    if Y.ndim != 2:
        raise ValueError(f"expected a 2-D multi-hot label matrix, got shape {Y.shape}")
    if not np.isin(Y, (0, 1)).all():
        raise ValueError("labels must be 0/1 valued")
    if n_samples is not None and Y.shape[0] != n_samples:
        raise ValueError(f"got {Y.shape[0]} label rows for {n_samples} samples")
    if n_classes is not None and Y.shape[1] != n_classes:
        raise ValueError(f"expected {n_classes} label columns, got {Y.shape[1]}")
    return Y.astype(np.uint8)


def check_class_list(classes, n_classes: int) -> list[int]:
    out = sorted({int(c) for c in classes})
    bad = [c for c in out if not 0 <= c < n_classes]
    if bad:
        raise ValueError(f"class ids {bad} outside [0, {n_classes})")
    return out
