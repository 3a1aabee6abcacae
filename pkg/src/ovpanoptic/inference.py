"""Open-vocabulary inference: fusion of the two classifiers and output assembly."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .encoders import Vocabulary
from .masks import masked_pool
from .panoptic import PanopticMap, Segment

VOID = -1


@dataclass
class FusedPrediction:
    probs: np.ndarray   # p_final over the K test categories
    category: int
    confidence: float
    rejection: float    # null-row probability from the diffusion-path classifier


def pool_discriminative_embedding(feature_map: Tensor, mask: Tensor) -> Tensor:
    """L2-normalized masked pooling of the frozen image encoder's feature map.

    ``feature_map`` is (d, h, w) (or batched); ``mask`` is (H, W) or (N, H, W)
    and is binarized at 0.5 when soft.
    """
    if mask.is_floating_point():
        mask = mask >= 0.5
    return F.normalize(masked_pool(feature_map, mask), dim=-1)


def fuse_predictions(p_diff, p_disc, lam: float = 0.65):
    """Geometric mixture ``p_diff**lam * p_disc**(1-lam)``, renormalized.

    Works on numpy arrays or tensors whose last axis indexes categories.
    Computed in log space; the endpoints return the matching input exactly
    up to renormalization.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    if torch.is_tensor(p_diff):
        if lam == 1.0:
            return p_diff / p_diff.sum(-1, keepdim=True)
        if lam == 0.0:
            return p_disc / p_disc.sum(-1, keepdim=True)
        log = lam * p_diff.clamp_min(1e-300).log() + (1 - lam) * p_disc.clamp_min(1e-300).log()
        return log.softmax(-1)
    p_diff = np.asarray(p_diff, dtype=np.float64)
    p_disc = np.asarray(p_disc, dtype=np.float64)
    if lam == 1.0:
        return p_diff / p_diff.sum(-1, keepdims=True)
    if lam == 0.0:
        return p_disc / p_disc.sum(-1, keepdims=True)
    with np.errstate(divide="ignore"):
        log = lam * np.log(p_diff) + (1 - lam) * np.log(p_disc)
    log = log - log.max(-1, keepdims=True)
    out = np.exp(log)
    return out / out.sum(-1, keepdims=True)


def mask_confidence(max_prob: float, mask_prob: np.ndarray, threshold: float = 0.5) -> float:
    """Max class probability times mean in-mask foreground probability."""
    support = mask_prob >= threshold
    if not support.any():
        return 0.0
    return float(max_prob * mask_prob[support].mean())


def panoptic_assemble(mask_probs: np.ndarray, fused: Sequence[FusedPrediction], vocab: Vocabulary,
                      conf_thresh: float = 0.25, reject_thresh: float = 0.5, overlap_keep: float = 0.8,
                      min_area: int = 16, threshold: float = 0.5) -> PanopticMap:
    """Greedy panoptic merge of N soft masks.

    ``mask_probs`` is (N, H, W) foreground probabilities. Surviving queries
    claim pixels in descending confidence; a query keeps its segment only if
    at least ``overlap_keep`` of its binarized area is still free. Stuff
    segments of one category are merged, then segments below ``min_area``
    pixels are dropped and ids renumbered 1..S.
    """
    mask_probs = np.asarray(mask_probs)
    binary = mask_probs >= threshold
    h, w = binary.shape[1:]
    ids = np.zeros((h, w), dtype=np.int64)
    keep = [i for i, f in enumerate(fused) if f.rejection <= reject_thresh and f.confidence >= conf_thresh]
    order = sorted(keep, key=lambda i: -fused[i].confidence)
    records: list[tuple[int, bool, float]] = []   # (category, isthing, score) by provisional id - 1
    stuff_ids: dict[int, int] = {}
    for i in order:
        area = int(binary[i].sum())
        if area == 0:
            continue
        free = binary[i] & (ids == 0)
        if free.sum() / area < overlap_keep:
            continue
        cat = fused[i].category
        isthing = bool(vocab.isthing[cat])
        if not isthing and cat in stuff_ids:
            ids[free] = stuff_ids[cat]
            continue
        records.append((cat, isthing, fused[i].confidence))
        sid = len(records)
        ids[free] = sid
        if not isthing:
            stuff_ids[cat] = sid
    out = np.zeros_like(ids)
    segments = []
    for sid, (cat, isthing, score) in enumerate(records, start=1):
        region = ids == sid
        if region.sum() < min_area:
            continue
        new_id = len(segments) + 1
        out[region] = new_id
        segments.append(Segment(new_id, cat, isthing, score))
    return PanopticMap(out, segments)


def semantic_from_panoptic(pan: PanopticMap, vocab: Vocabulary | None = None) -> np.ndarray:
    """Per-pixel category index; void pixels are ``VOID``."""
    sem = np.full(pan.shape, VOID, dtype=np.int64)
    for s in pan.segments:
        sem[pan.segment_ids == s.id] = s.category
    return sem


@dataclass
class Proposal:
    mask: np.ndarray
    category: int | None
    score: float


def instance_proposals(mask_probs: np.ndarray, fused: Sequence[FusedPrediction], vocab: Vocabulary,
                       top_k: int = 100, reject_thresh: float = 0.5, class_agnostic: bool = False,
                       threshold: float = 0.5) -> list[Proposal]:
    """Thing-category masks ranked by confidence, at most ``top_k``."""
    mask_probs = np.asarray(mask_probs)
    if top_k > len(fused):
        top_k = len(fused)
    cands = [i for i, f in enumerate(fused) if f.rejection <= reject_thresh and vocab.isthing[f.category]]
    cands.sort(key=lambda i: -fused[i].confidence)
    return [Proposal(mask_probs[i] >= threshold, None if class_agnostic else fused[i].category,
                     fused[i].confidence) for i in cands[:top_k]]
