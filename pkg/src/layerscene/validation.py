"""Input checks shared by the estimator and the command line."""
from __future__ import annotations

import numpy as np


def check_images(X, size: int | None = None, dtype=np.float32, allow_single: bool = False) -> np.ndarray:
    """Return ``X`` as a ``[n, 3, N, N]`` array of finite values in ``[0, 1]``.

    A single ``[3, N, N]`` image is accepted when ``allow_single`` is set.
    """
    arr = np.asarray(X)
    if arr.dtype.kind not in "fiub":
        raise TypeError(f"images must be numeric, got dtype {arr.dtype}")
    if allow_single and arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != 3 or arr.shape[2] != arr.shape[3]:
        raise ValueError(f"expected images of shape [n, 3, N, N], got {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError("no images given")
    if size is not None and arr.shape[2] != size:
        raise ValueError(f"expected {size}x{size} images, got {arr.shape[2]}x{arr.shape[3]}")
    arr = arr.astype(dtype)
    if not np.all(np.isfinite(arr)):
        raise ValueError("images contain NaN or infinite values")
    if arr.min() < 0 or arr.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    return arr


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


__all__ = ["check_images", "check_positive_int"]
