"""K-means clustering of dense diffusion features for visualization."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from sklearn.cluster import KMeans

from .model import OpenVocabSegmenter, images_to_tensor


def cluster_feature_map(features: np.ndarray, k: int, seed: int = 0, max_iter: int = 100) -> np.ndarray:
    """Cluster a (C, h, w) feature map into ``k`` groups; returns (h, w) labels."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 3:
        raise ValueError("feature map must be (C, h, w)")
    c, h, w = features.shape
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > h * w:
        raise ValueError(f"k={k} exceeds the number of feature pixels ({h * w})")
    flat = features.reshape(c, -1).T
    km = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=max_iter, random_state=seed)
    labels = km.fit_predict(flat)
    return labels.reshape(h, w).astype(np.int64)


def cluster_features(model: OpenVocabSegmenter, image: np.ndarray, k: int, level: int = -1,
                     seed: int = 0) -> np.ndarray:
    """Labels at image resolution from one pyramid level (default: the finest)."""
    x = images_to_tensor(image, model.dtype)
    with torch.no_grad():
        pyramid = model.features(x, eps_seed=model.config.seed)
    if level < 0:
        level = int(np.argmin(pyramid.strides))
    fmap = pyramid.levels[level][0].double().cpu().numpy()
    labels = cluster_feature_map(fmap, k, seed)
    up = F.interpolate(torch.from_numpy(labels)[None, None].double(), size=x.shape[-2:], mode="nearest")
    return up[0, 0].long().numpy()


def palette(k: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(k, 3), dtype=np.uint8)


def save_label_image(labels: np.ndarray, path: str | Path, k: int | None = None, seed: int = 0) -> Path:
    """Write labels as an indexed-color (mode P) PNG."""
    k = int(labels.max()) + 1 if k is None else k
    if k > 256:
        raise ValueError("indexed PNG supports at most 256 colors")
    arr = np.ascontiguousarray(labels, dtype=np.uint8)
    img = Image.frombytes("P", (arr.shape[1], arr.shape[0]), arr.tobytes())
    img.putpalette(palette(k, seed).reshape(-1).tolist())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path, format="PNG")
    return path
