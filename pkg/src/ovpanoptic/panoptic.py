"""Panoptic map container shared by inference, metrics and file IO."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Segment:
    id: int
    category: int
    isthing: bool
    score: float = 1.0


@dataclass
class PanopticMap:
    """Per-pixel segment ids (0 = void) plus one record per segment."""

    segment_ids: np.ndarray
    segments: list[Segment] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.segment_ids = np.asarray(self.segment_ids)
        if self.segment_ids.ndim != 2:
            raise ValueError("segment id map must be 2-D")
        if self.segment_ids.size and self.segment_ids.min() < 0:
            raise ValueError("segment ids must be non-negative")

    @property
    def shape(self) -> tuple[int, int]:
        return self.segment_ids.shape

    def segment(self, sid: int) -> Segment:
        for s in self.segments:
            if s.id == sid:
                return s
        raise KeyError(sid)

    def validate(self) -> "PanopticMap":
        """Check the id/segment bijection; raise ValueError on violation."""
        ids = [s.id for s in self.segments]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate segment ids")
        if any(i <= 0 for i in ids):
            raise ValueError("segment ids must be positive")
        present = set(np.unique(self.segment_ids).tolist()) - {0}
        if present != set(ids):
            missing = present - set(ids)
            extra = set(ids) - present
            raise ValueError(f"segment table mismatch: unlisted ids {sorted(missing)}, empty ids {sorted(extra)}")
        return self

    def is_contiguous(self) -> bool:
        return sorted(s.id for s in self.segments) == list(range(1, len(self.segments) + 1))

    def masks(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(M, H, W) bool masks, category indices, isthing flags, in segment order."""
        if not self.segments:
            h, w = self.shape
            return np.zeros((0, h, w), bool), np.zeros(0, np.int64), np.zeros(0, bool)
        masks = np.stack([self.segment_ids == s.id for s in self.segments])
        cats = np.array([s.category for s in self.segments], dtype=np.int64)
        things = np.array([s.isthing for s in self.segments], dtype=bool)
        return masks, cats, things

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PanopticMap):
            return NotImplemented
        return (np.array_equal(self.segment_ids, other.segment_ids)
                and sorted(self.segments, key=lambda s: s.id) == sorted(other.segments, key=lambda s: s.id))


def from_masks(masks: np.ndarray, categories, isthing, scores=None) -> PanopticMap:
    """Build a map from disjoint binary masks; ids are assigned 1..M in order."""
    masks = np.asarray(masks, dtype=bool)
    if masks.ndim != 3:
        raise ValueError("masks must be (M, H, W)")
    if masks.shape[0] and masks.sum(0).max() > 1:
        raise ValueError("masks overlap")
    ids = np.zeros(masks.shape[1:], dtype=np.int64)
    segments = []
    for i, m in enumerate(masks):
        ids[m] = i + 1
        score = 1.0 if scores is None else float(scores[i])
        segments.append(Segment(i + 1, int(categories[i]), bool(isthing[i]), score))
    return PanopticMap(ids, segments)
