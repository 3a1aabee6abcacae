"""Panoptic quality, mean IoU, average recall and mask AP.

All accumulators are mergeable: per-image statistics can be computed
independently and combined in any order without changing the result.
IoU sums are kept as exact fractions so that ``pq == sq * rq`` holds per
category up to the final float conversion.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .encoders import Vocabulary
from .inference import VOID
from .panoptic import PanopticMap

IOU_THRESHOLDS = tuple(Fraction(50 + 5 * i, 100) for i in range(10))  # 0.50:0.05:0.95
_OFFSET = 1 << 32


@dataclass
class PQStatCat:
    iou_sum: Fraction = Fraction(0)
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __iadd__(self, other: "PQStatCat") -> "PQStatCat":
        self.iou_sum += other.iou_sum
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        return self

    @property
    def pq(self) -> Fraction:
        denom = self.tp + Fraction(self.fp, 2) + Fraction(self.fn, 2)
        return self.iou_sum / denom if denom else Fraction(0)

    @property
    def sq(self) -> Fraction:
        return self.iou_sum / self.tp if self.tp else Fraction(0)

    @property
    def rq(self) -> Fraction:
        denom = self.tp + Fraction(self.fp, 2) + Fraction(self.fn, 2)
        return self.tp / denom if denom else Fraction(0)


@dataclass
class PQResult:
    """Scores are on a 0-100 scale. ``per_category`` maps index -> stats."""

    pq: float
    sq: float
    rq: float
    n: int
    things: dict[str, float]
    stuff: dict[str, float]
    per_category: dict[int, PQStatCat]

    def as_dict(self) -> dict:
        return {"PQ": self.pq, "SQ": self.sq, "RQ": self.rq, "N": self.n,
                "PQ_th": self.things["pq"], "SQ_th": self.things["sq"], "RQ_th": self.things["rq"],
                "PQ_st": self.stuff["pq"], "SQ_st": self.stuff["sq"], "RQ_st": self.stuff["rq"]}


class PQStat:
    def __init__(self) -> None:
        self.per_cat: dict[int, PQStatCat] = {}

    def __getitem__(self, cat: int) -> PQStatCat:
        return self.per_cat.setdefault(cat, PQStatCat())

    def __setitem__(self, cat: int, stat: PQStatCat) -> None:
        self.per_cat[cat] = stat

    def __iadd__(self, other: "PQStat") -> "PQStat":
        for cat, stat in other.per_cat.items():
            self[cat] += stat
        return self

    def update(self, pred: PanopticMap, gt: PanopticMap, num_categories: int | None = None) -> "PQStat":
        self += pq_stat_single(pred, gt, num_categories)
        return self

    def result(self, vocab: Vocabulary) -> PQResult:
        def average(isthing: bool | None) -> dict[str, float]:
            cats = [c for c, s in sorted(self.per_cat.items())
                    if s.tp + s.fp + s.fn > 0 and (isthing is None or vocab.isthing[c] == isthing)]
            if not cats:
                return {"pq": 0.0, "sq": 0.0, "rq": 0.0, "n": 0}
            n = len(cats)
            return {"pq": 100 * float(sum(self.per_cat[c].pq for c in cats) / n),
                    "sq": 100 * float(sum(self.per_cat[c].sq for c in cats) / n),
                    "rq": 100 * float(sum(self.per_cat[c].rq for c in cats) / n),
                    "n": n}
        overall = average(None)
        return PQResult(overall["pq"], overall["sq"], overall["rq"], overall["n"],
                        average(True), average(False), dict(self.per_cat))


def pq_stat_single(pred: PanopticMap, gt: PanopticMap, num_categories: int | None = None) -> PQStat:
    """Match segments of one image: same category and IoU > 0.5.

    Void ground-truth pixels are removed from the union; a predicted segment
    that is mostly (> 50%) void is not counted as a false positive.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"image sizes differ: {pred.shape} vs {gt.shape}")
    gt_segs = {s.id: s for s in gt.segments}
    pred_segs = {s.id: s for s in pred.segments}
    if num_categories is not None:
        for s in list(gt.segments) + list(pred.segments):
            if not 0 <= s.category < num_categories:
                raise ValueError(f"category index {s.category} outside vocabulary")
    g = gt.segment_ids.astype(np.int64).ravel()
    p = pred.segment_ids.astype(np.int64).ravel()
    uniq, counts = np.unique(g * _OFFSET + p, return_counts=True)
    inter = {(int(u // _OFFSET), int(u % _OFFSET)): int(c) for u, c in zip(uniq, counts)}
    gt_area: dict[int, int] = {}
    pred_area: dict[int, int] = {}
    for (gi, pi), c in inter.items():
        gt_area[gi] = gt_area.get(gi, 0) + c
        pred_area[pi] = pred_area.get(pi, 0) + c
    for gi in gt_area:
        if gi and gi not in gt_segs:
            raise ValueError(f"ground-truth id {gi} has no segment record")
    for pi in pred_area:
        if pi and pi not in pred_segs:
            raise ValueError(f"predicted id {pi} has no segment record")

    stat = PQStat()
    for s in list(gt_segs.values()) + list(pred_segs.values()):
        stat[s.category]
    matched_gt: set[int] = set()
    matched_pred: set[int] = set()
    for (gi, pi), c in inter.items():
        if gi == 0 or pi == 0:
            continue
        if gt_segs[gi].category != pred_segs[pi].category:
            continue
        union = pred_area[pi] + gt_area[gi] - c - inter.get((0, pi), 0)
        iou = Fraction(c, union)
        if iou > Fraction(1, 2):
            if gi in matched_gt or pi in matched_pred:
                raise AssertionError("IoU > 0.5 matching must be unique")
            cat = gt_segs[gi].category
            stat[cat].tp += 1
            stat[cat].iou_sum += iou
            matched_gt.add(gi)
            matched_pred.add(pi)
    for gi, s in gt_segs.items():
        if gi not in matched_gt:
            stat[s.category].fn += 1
    for pi, s in pred_segs.items():
        if pi in matched_pred:
            continue
        area = pred_area.get(pi, 0)
        if area and Fraction(inter.get((0, pi), 0), area) > Fraction(1, 2):
            continue
        stat[s.category].fp += 1
    return stat


def panoptic_quality(pred: PanopticMap, gt: PanopticMap, vocab: Vocabulary) -> PQResult:
    return pq_stat_single(pred, gt, len(vocab)).result(vocab)


class IoUAccumulator:
    def __init__(self, num_categories: int):
        self.intersection = np.zeros(num_categories, dtype=np.int64)
        self.union = np.zeros(num_categories, dtype=np.int64)
        self.gt_pixels = np.zeros(num_categories, dtype=np.int64)

    def update(self, pred: np.ndarray, gt: np.ndarray) -> "IoUAccumulator":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError("semantic maps differ in shape")
        k = len(self.union)
        valid = gt != VOID
        p = pred[valid]
        t = gt[valid]
        if t.size and (t.max() >= k or t.min() < 0):
            raise ValueError("ground-truth category outside vocabulary")
        p = np.where((p >= 0) & (p < k), p, k)  # void predictions get a spare bin
        conf = np.bincount(t * (k + 1) + p, minlength=k * (k + 1)).reshape(k, k + 1)
        tp = np.diag(conf[:, :k])
        self.intersection += tp
        self.gt_pixels += conf.sum(1)
        self.union += conf.sum(1) + conf[:, :k].sum(0) - tp
        return self

    def __iadd__(self, other: "IoUAccumulator") -> "IoUAccumulator":
        self.intersection += other.intersection
        self.union += other.union
        self.gt_pixels += other.gt_pixels
        return self

    def result(self) -> tuple[float, dict[int, float]]:
        present = np.nonzero(self.gt_pixels > 0)[0]
        per_cat = {int(c): 100.0 * self.intersection[c] / self.union[c] for c in present}
        miou = float(np.mean(list(per_cat.values()))) if per_cat else 0.0
        return miou, per_cat


def mean_iou(pred: np.ndarray, gt: np.ndarray, vocab: Vocabulary) -> tuple[float, dict[int, float]]:
    return IoUAccumulator(len(vocab)).update(pred, gt).result()


def _mask_ious(a: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Integer intersection and union counts, shape (len(a), len(b))."""
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)), np.int64), np.ones((len(a), len(b)), np.int64)
    fa = np.stack([np.asarray(m, bool).ravel() for m in a]).astype(np.int64)
    fb = np.stack([np.asarray(m, bool).ravel() for m in b]).astype(np.int64)
    inter = fa @ fb.T
    union = fa.sum(1)[:, None] + fb.sum(1)[None, :] - inter
    return inter, np.maximum(union, 1)


def _at_least(inter: np.ndarray, union: np.ndarray, thr: Fraction) -> np.ndarray:
    return inter * thr.denominator >= union * thr.numerator


class RecallAccumulator:
    """AR@k over IoU thresholds 0.50:0.05:0.95 with greedy best-IoU matching."""

    def __init__(self, k: int = 100):
        self.k = k
        self.matched = np.zeros(len(IOU_THRESHOLDS), dtype=np.int64)
        self.num_gt = 0

    def update(self, proposals: Sequence[np.ndarray], gt_masks: Sequence[np.ndarray]) -> "RecallAccumulator":
        props = list(proposals)[: self.k]
        self.num_gt += len(gt_masks)
        inter, union = _mask_ious(props, gt_masks)
        iou = inter / union
        for t, thr in enumerate(IOU_THRESHOLDS):
            ok = _at_least(inter, union, thr)
            used_p: set[int] = set()
            used_g: set[int] = set()
            pairs = sorted(((-iou[i, j], i, j) for i, j in zip(*np.nonzero(ok))))
            for _, i, j in pairs:
                if i in used_p or j in used_g:
                    continue
                used_p.add(i)
                used_g.add(j)
            self.matched[t] += len(used_g)
        return self

    def result(self) -> float:
        if self.num_gt == 0:
            return 0.0
        return float(100.0 * np.mean(self.matched / self.num_gt))


def average_recall(proposals: Sequence[np.ndarray], gt_masks: Sequence[np.ndarray], k: int = 100) -> float:
    return RecallAccumulator(k).update(proposals, gt_masks).result()


@dataclass
class _Det:
    image: int
    mask: np.ndarray
    category: int
    score: float


class APAccumulator:
    """COCO-style mask AP: 101-point interpolation, thresholds 0.50:0.05:0.95."""

    def __init__(self, categories: Iterable[int] | None = None):
        self.categories = None if categories is None else set(categories)
        self.dets: list[_Det] = []
        self.gts: dict[tuple[int, int], list[np.ndarray]] = {}
        self.num_images = 0

    def update(self, detections: Sequence[tuple[np.ndarray, int, float]],
               gt_instances: Sequence[tuple[np.ndarray, int]]) -> "APAccumulator":
        img = self.num_images
        self.num_images += 1
        for mask, cat, score in detections:
            self.dets.append(_Det(img, np.asarray(mask, bool), int(cat), float(score)))
        for mask, cat in gt_instances:
            self.gts.setdefault((img, int(cat)), []).append(np.asarray(mask, bool))
        return self

    def category_ap(self, cat: int) -> list[float]:
        gts = {img: masks for (img, c), masks in self.gts.items() if c == cat}
        n_gt = sum(len(m) for m in gts.values())
        dets = [d for d in self.dets if d.category == cat]
        order = sorted(range(len(dets)), key=lambda i: -dets[i].score)  # stable
        dets = [dets[i] for i in order]
        aps = []
        for thr in IOU_THRESHOLDS:
            used = {img: np.zeros(len(m), bool) for img, m in gts.items()}
            tps = np.zeros(len(dets), bool)
            for di, d in enumerate(dets):
                g = gts.get(d.image, [])
                if not g:
                    continue
                inter, union = _mask_ious([d.mask], g)
                best, best_j = -1.0, -1
                for j in range(len(g)):
                    if used[d.image][j] or not _at_least(inter[0:1, j:j + 1], union[0:1, j:j + 1], thr)[0, 0]:
                        continue
                    iou = inter[0, j] / union[0, j]
                    if iou > best:
                        best, best_j = iou, j
                if best_j >= 0:
                    used[d.image][best_j] = True
                    tps[di] = True
            aps.append(_interpolated_ap(tps, n_gt))
        return aps

    def result(self) -> float:
        cats = {c for (_, c) in self.gts}
        if self.categories is not None:
            cats &= self.categories
        if not cats:
            return 0.0
        return float(100.0 * np.mean([np.mean(self.category_ap(c)) for c in sorted(cats)]))


def _interpolated_ap(tps: np.ndarray, n_gt: int) -> float:
    if n_gt == 0:
        return 0.0
    if len(tps) == 0:
        return 0.0
    tp = np.cumsum(tps)
    fp = np.cumsum(~tps)
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    for i in range(len(precision) - 1, 0, -1):
        precision[i - 1] = max(precision[i - 1], precision[i])
    rec_thrs = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recall, rec_thrs, side="left")
    q = np.zeros(len(rec_thrs))
    valid = idx < len(precision)
    q[valid] = precision[idx[valid]]
    return float(q.mean())


def mask_map(detections: Sequence[tuple[np.ndarray, int, float]], gt_instances: Sequence[tuple[np.ndarray, int]],
             categories: Iterable[int] | None = None) -> float:
    return APAccumulator(categories).update(detections, gt_instances).result()


def format_pq_table(rows: dict[str, PQResult]) -> str:
    """Plain-text PQ / SQ / RQ table with overall, thing and stuff columns."""
    cols = ["PQ", "PQ_th", "PQ_st", "SQ", "SQ_th", "SQ_st", "RQ", "RQ_th", "RQ_st"]
    width = max([len("Method")] + [len(k) for k in rows]) + 2
    lines = ["Method".ljust(width) + "".join(c.rjust(8) for c in cols)]
    for name, res in rows.items():
        d = res.as_dict()
        lines.append(name.ljust(width) + "".join(f"{d[c]:8.1f}" for c in cols))
    return "\n".join(lines)


def category_rows(result: PQResult, vocab: Vocabulary) -> list[dict]:
    """Machine-readable per-category rows."""
    rows = []
    for cat, s in sorted(result.per_category.items()):
        rows.append({"category": vocab.names[cat], "isthing": bool(vocab.isthing[cat]),
                     "pq": 100 * float(s.pq), "sq": 100 * float(s.sq), "rq": 100 * float(s.rq),
                     "tp": s.tp, "fp": s.fp, "fn": s.fn, "iou_sum": float(s.iou_sum)})
    return rows


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)
