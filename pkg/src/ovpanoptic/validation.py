"""Input checks shared by the estimator and the CLI."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .panoptic import PanopticMap


def check_images(X, multiple_of: int = 1) -> np.ndarray:
    """Return ``X`` as a (n, H, W, 3) uint8 array.

    Float input must lie in [0, 1] and is scaled to 0..255.
    """
    if isinstance(X, (list, tuple)):
        if not X:
            raise ValueError("empty image list")
        shapes = {np.shape(x) for x in X}
        if len(shapes) != 1:
            raise ValueError(f"images differ in shape: {sorted(shapes)}")
    arr = np.asarray(X)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"expected images of shape (n, H, W, 3), got {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0 or arr.shape[2] == 0:
        raise ValueError("images must be non-empty")
    if multiple_of > 1 and (arr.shape[1] % multiple_of or arr.shape[2] % multiple_of):
        raise ValueError(f"image height and width must be multiples of {multiple_of}, got {arr.shape[1:3]}")
    if arr.dtype == np.uint8:
        return arr
    if np.issubdtype(arr.dtype, np.floating):
        if not np.isfinite(arr).all() or arr.min() < 0 or arr.max() > 1:
            raise ValueError("float images must be finite and lie in [0, 1]")
        return np.rint(arr * 255).astype(np.uint8)
    if np.issubdtype(arr.dtype, np.integer):
        if arr.min() < 0 or arr.max() > 255:
            raise ValueError("integer images must lie in [0, 255]")
        return arr.astype(np.uint8)
    raise ValueError(f"unsupported image dtype {arr.dtype}")


def check_panoptic_targets(y: Sequence[PanopticMap], n: int, shape: tuple[int, int],
                           num_categories: int) -> list[PanopticMap]:
    y = list(y)
    if len(y) != n:
        raise ValueError(f"got {len(y)} targets for {n} images")
    for i, pan in enumerate(y):
        if not isinstance(pan, PanopticMap):
            raise TypeError(f"target {i} is not a PanopticMap")
        if pan.shape != tuple(shape):
            raise ValueError(f"target {i} has shape {pan.shape}, expected {tuple(shape)}")
        pan.validate()
        for s in pan.segments:
            if not 0 <= s.category < num_categories:
                raise ValueError(f"target {i}: category {s.category} outside [0, {num_categories})")
    return y


def check_vocabulary(categories: Sequence[str], isthing: Sequence[bool]) -> tuple[list[str], list[bool]]:
    categories = [str(c) for c in categories]
    isthing = [bool(t) for t in isthing]
    if len(categories) != len(isthing):
        raise ValueError("categories and isthing differ in length")
    if not any(isthing) or all(isthing):
        raise ValueError("need at least one thing and one stuff category")
    return categories, isthing
