"""Synthetic shapes dataset and COCO panoptic JSON/PNG interchange."""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .encoders import Vocabulary
from .masks import GroundTruthMasks
from .panoptic import PanopticMap, Segment

PALETTE = {
    "red": (220, 30, 30),
    "yellow": (240, 220, 40),
    "orange": (245, 140, 20),
    "purple": (130, 40, 170),
    "white": (245, 245, 245),
    "black": (15, 15, 15),
    "pink": (245, 120, 190),
    "cyan": (40, 220, 230),
}

STUFF_COLORS = {
    "grass": (60, 150, 50),
    "sky": (110, 160, 235),
    "sand": (215, 190, 130),
    "water": (30, 80, 160),
    "wall": (150, 140, 135),
    "road": (80, 80, 85),
    "snow": (225, 230, 240),
    "floor": (150, 100, 60),
    "field": (160, 170, 70),
    "brick": (160, 70, 50),
}

MAX_ID = 256 ** 3 - 1


class PlacementError(RuntimeError):
    """Shapes could not be placed without overlap."""


class CocoFormatError(ValueError):
    """Malformed or inconsistent COCO panoptic files."""


@dataclass
class DatasetItem:
    image: np.ndarray        # H x W x 3 uint8
    panoptic: PanopticMap
    caption: str = ""
    name: str = ""

    @property
    def labels(self) -> list[int]:
        return [s.category for s in self.panoptic.segments]

    def ground_truth(self, dtype: torch.dtype = torch.float32) -> GroundTruthMasks:
        masks, cats, _ = self.panoptic.masks()
        return GroundTruthMasks(torch.from_numpy(masks).to(dtype), torch.from_numpy(cats))


@dataclass
class PanopticDataset:
    items: list[DatasetItem]
    categories: list[str]
    isthing: list[bool]
    captions: list[list[str]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, i: int) -> DatasetItem:
        return self.items[i]

    def vocabulary(self, templates: Sequence[str] | None = None) -> Vocabulary:
        if templates:
            return Vocabulary(list(self.categories), list(self.isthing), list(templates))
        return Vocabulary(list(self.categories), list(self.isthing))

    def images(self) -> np.ndarray:
        return np.stack([it.image for it in self.items])


def _color_for(name: str) -> tuple[int, int, int]:
    if name in STUFF_COLORS:
        return STUFF_COLORS[name]
    h = zlib.crc32(name.encode("utf-8"))
    return (h & 0xFF, (h >> 8) & 0xFF, (h >> 16) & 0xFF)


def _stuff_texture(name: str, shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Base color modulated by a per-category stripe pattern plus pixel noise."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    k = zlib.crc32(name.encode("utf-8"))
    angle = (k % 180) * np.pi / 180
    period = 4 + k % 5
    wave = np.sin((xx * np.cos(angle) + yy * np.sin(angle)) * 2 * np.pi / period)
    base = np.asarray(_color_for(name), dtype=np.float64)
    img = base[None, None] + 18.0 * wave[..., None] + rng.normal(0.0, 6.0, (h, w, 1))
    return img


def shape_mask(kind: str, size: int, canvas: tuple[int, int], top: int, left: int) -> np.ndarray:
    """Binary mask of a named shape inside a ``size`` x ``size`` box."""
    h, w = canvas
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    u, v = (xx - c) / (size / 2.0), (yy - c) / (size / 2.0)  # in [-1, 1]
    if kind in ("square", "box"):
        local = np.ones((size, size), bool)
    elif kind in ("circle", "disk", "disc"):
        local = u * u + v * v <= 1.0
    elif kind in ("triangle", "wedge"):
        local = (v >= -1.0) & (np.abs(u) <= (v + 1.0) / 2.0)
    elif kind in ("diamond", "rhombus"):
        local = np.abs(u) + np.abs(v) <= 1.0
    elif kind == "cross":
        local = (np.abs(u) <= 0.35) | (np.abs(v) <= 0.35)
    elif kind == "ring":
        r2 = u * u + v * v
        local = (r2 <= 1.0) & (r2 >= 0.3)
    elif kind == "hexagon":
        local = (np.abs(v) <= 0.87) & (np.abs(u) * 0.87 + np.abs(v) * 0.5 <= 0.87)
    elif kind == "oval":
        local = u * u + (v / 0.6) ** 2 <= 1.0
    else:
        # Unknown names fall back to a star-like blob determined by the name.
        k = zlib.crc32(kind.encode("utf-8"))
        lobes = 3 + k % 4
        theta = np.arctan2(v, u)
        local = np.sqrt(u * u + v * v) <= 0.65 + 0.35 * np.cos(lobes * theta)
    out = np.zeros((h, w), bool)
    out[top:top + size, left:left + size] = local
    return out


def _join(phrases: list[str]) -> str:
    if len(phrases) == 1:
        return phrases[0]
    return ", ".join(phrases[:-1]) + " and " + phrases[-1]


def generate_synthetic_dataset(num_images: int = 16, image_size: int = 64,
                               things: Sequence[str] = ("square", "circle", "triangle", "diamond"),
                               stuff: Sequence[str] = ("grass", "sky"), seed: int = 0,
                               min_things: int = 1, max_things: int = 3, min_size: int = 16,
                               max_size: int = 26, max_retries: int = 200,
                               max_stuff: int = 1) -> PanopticDataset:
    """Colored shapes on up to ``max_stuff`` (1 or 2) textured background regions.

    Category indices are things first, then stuff. Each image gets one
    caption naming every shape with its color, then the background regions.
    """
    if max_stuff not in (1, 2):
        raise ValueError("max_stuff must be 1 or 2")
    if len(things) < 2 or len(stuff) < 1:
        raise ValueError("need at least 2 thing and 1 stuff categories")
    if not 1 <= min_things <= max_things:
        raise ValueError("need 1 <= min_things <= max_things")
    if max_size > image_size or min_size < 3 or min_size > max_size:
        raise ValueError("shape sizes must satisfy 3 <= min_size <= max_size <= image_size")
    categories = list(things) + list(stuff)
    isthing = [True] * len(things) + [False] * len(stuff)
    rng = np.random.default_rng(seed)
    colors = list(PALETTE)
    items = []
    for n in range(num_images):
        h = w = image_size
        ids = np.zeros((h, w), np.int64)
        segments: list[Segment] = []
        canvas = np.zeros((h, w, 3), np.float64)
        n_stuff = 1 if len(stuff) == 1 or max_stuff == 1 else int(rng.integers(1, 3))
        picked = list(rng.choice(len(stuff), size=n_stuff, replace=False))
        if n_stuff == 1:
            regions = [np.ones((h, w), bool)]
        else:
            split = int(rng.integers(h // 3, 2 * h // 3 + 1))
            top = np.zeros((h, w), bool)
            top[:split] = True
            regions = [top, ~top]
        stuff_names = []
        for region, s in zip(regions, picked):
            name = stuff[s]
            canvas[region] = _stuff_texture(name, (h, w), rng)[region]
            segments.append(Segment(len(segments) + 1, len(things) + int(s), False))
            ids[region] = len(segments)
            stuff_names.append(name)

        occupied = np.zeros((h, w), bool)
        phrases = []
        for _ in range(int(rng.integers(min_things, max_things + 1))):
            kind_idx = int(rng.integers(len(things)))
            color = colors[int(rng.integers(len(colors)))]
            for _attempt in range(max_retries):
                size = int(rng.integers(min_size, max_size + 1))
                top_ = int(rng.integers(0, h - size + 1))
                left = int(rng.integers(0, w - size + 1))
                mask = shape_mask(things[kind_idx], size, (h, w), top_, left)
                # one-pixel margin keeps shapes from touching
                grown = np.zeros_like(occupied)
                grown[max(top_ - 1, 0):top_ + size + 1, max(left - 1, 0):left + size + 1] = True
                if not (grown & occupied).any() and mask.any():
                    break
            else:
                raise PlacementError(f"image {n}: could not place shape after {max_retries} attempts")
            occupied |= mask
            canvas[mask] = PALETTE[color]
            segments.append(Segment(len(segments) + 1, kind_idx, True))
            ids[mask] = len(segments)
            phrases.append(f"{'an' if color[0] in 'aeiou' else 'a'} {color} {things[kind_idx]}")
        # stuff regions fully covered by shapes cannot happen at these sizes, but guard anyway
        present = set(np.unique(ids).tolist())
        segments = [s for s in segments if s.id in present]
        pan = _renumber(PanopticMap(ids, segments))
        caption = f"{_join(phrases)} on {_join(stuff_names)}"
        image = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
        items.append(DatasetItem(image, pan, caption, f"{n:06d}"))
    return PanopticDataset(items, categories, isthing, [[it.caption] for it in items])


def _renumber(pan: PanopticMap) -> PanopticMap:
    out = np.zeros_like(pan.segment_ids)
    segs = []
    for new, s in enumerate(pan.segments, start=1):
        out[pan.segment_ids == s.id] = new
        segs.append(Segment(new, s.category, s.isthing, s.score))
    return PanopticMap(out, segs)


def id2rgb(ids: np.ndarray | int) -> np.ndarray:
    """Segment id to RGB with id = R + 256 G + 256^2 B."""
    arr = np.asarray(ids, dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() > MAX_ID):
        raise ValueError(f"segment ids must lie in [0, {MAX_ID}]")
    return np.stack([arr % 256, (arr // 256) % 256, arr // 65536], axis=-1).astype(np.uint8)


def rgb2id(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb).astype(np.int64)
    return rgb[..., 0] + 256 * rgb[..., 1] + 65536 * rgb[..., 2]


def _save_png(path: Path, array: np.ndarray) -> None:
    Image.fromarray(array).save(path, format="PNG", optimize=False, compress_level=6)


def write_coco_panoptic(root: str | Path, maps: Sequence[PanopticMap], categories: Sequence[str],
                        isthing: Sequence[bool], names: Sequence[str] | None = None,
                        images: Sequence[np.ndarray] | None = None,
                        captions: Sequence[str] | None = None) -> Path:
    """Write ``panoptic.json`` plus ``panoptic/<name>.png`` (and ``images/``) under ``root``.

    Category ids in the JSON are 1-based positions in ``categories``.
    """
    root = Path(root)
    (root / "panoptic").mkdir(parents=True, exist_ok=True)
    if images is not None:
        (root / "images").mkdir(parents=True, exist_ok=True)
    names = list(names) if names is not None else [f"{i:06d}" for i in range(len(maps))]
    if len(set(names)) != len(names):
        raise ValueError("image names must be unique")
    img_entries, anns = [], []
    for i, (pan, name) in enumerate(zip(maps, names)):
        pan.validate()
        h, w = pan.shape
        entry = {"id": i, "file_name": f"{name}.png", "height": int(h), "width": int(w)}
        if captions is not None:
            entry["captions"] = [captions[i]] if isinstance(captions[i], str) else list(captions[i])
        img_entries.append(entry)
        if images is not None:
            _save_png(root / "images" / f"{name}.png", np.asarray(images[i], np.uint8))
        _save_png(root / "panoptic" / f"{name}.png", id2rgb(pan.segment_ids))
        areas = dict(zip(*np.unique(pan.segment_ids, return_counts=True)))
        infos = [{"id": int(s.id), "category_id": int(s.category) + 1, "iscrowd": 0,
                  "area": int(areas.get(s.id, 0)), "score": float(s.score)} for s in pan.segments]
        anns.append({"image_id": i, "file_name": f"{name}.png", "segments_info": infos})
    cats = [{"id": k + 1, "name": n, "isthing": int(bool(t))} for k, (n, t) in enumerate(zip(categories, isthing))]
    doc = {"images": img_entries, "annotations": anns, "categories": cats}
    path = root / "panoptic.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True), encoding="utf-8")
    return path


def write_dataset(root: str | Path, dataset: PanopticDataset) -> Path:
    caps = dataset.captions or [[it.caption] for it in dataset.items]
    return write_coco_panoptic(root, [it.panoptic for it in dataset.items], dataset.categories,
                               dataset.isthing, [it.name for it in dataset.items],
                               [it.image for it in dataset.items], caps)


def read_coco_panoptic(json_path: str | Path, png_dir: str | Path | None = None,
                       image_dir: str | Path | None = None) -> PanopticDataset:
    """Inverse of :func:`write_coco_panoptic`. A directory argument means ``<dir>/panoptic.json``."""
    json_path = Path(json_path)
    if json_path.is_dir():
        json_path = json_path / "panoptic.json"
    root = json_path.parent
    png_dir = Path(png_dir) if png_dir is not None else root / "panoptic"
    image_dir = Path(image_dir) if image_dir is not None else root / "images"
    try:
        doc = json.loads(json_path.read_text(encoding="utf-8"))
        cats = sorted(doc["categories"], key=lambda c: c["id"])
        anns = doc["annotations"]
        img_entries = {e["id"]: e for e in doc.get("images", [])}
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CocoFormatError(f"{json_path}: malformed panoptic JSON ({exc})") from exc
    cat_index = {c["id"]: k for k, c in enumerate(cats)}
    names = [c["name"] for c in cats]
    flags = [bool(c.get("isthing", 1)) for c in cats]
    items, captions = [], []
    for ann in anns:
        try:
            file_name = ann["file_name"]
            infos = ann["segments_info"]
        except (KeyError, TypeError) as exc:
            raise CocoFormatError(f"{json_path}: malformed annotation ({exc})") from exc
        rgb = np.asarray(Image.open(png_dir / file_name).convert("RGB"))
        ids = rgb2id(rgb)
        segs = []
        for info in infos:
            if info["category_id"] not in cat_index:
                raise CocoFormatError(f"{file_name}: unknown category_id {info['category_id']}")
            k = cat_index[info["category_id"]]
            segs.append(Segment(int(info["id"]), k, flags[k], float(info.get("score", 1.0))))
        listed = {s.id for s in segs}
        present = set(np.unique(ids).tolist()) - {0}
        if present - listed:
            raise CocoFormatError(f"{file_name}: ids {sorted(present - listed)} missing from segments_info")
        pan = PanopticMap(ids, segs)
        entry = img_entries.get(ann.get("image_id"), {})
        caps = list(entry.get("captions", []))
        image_path = image_dir / entry.get("file_name", file_name)
        if image_path.exists():
            image = np.asarray(Image.open(image_path).convert("RGB"))
        else:
            image = np.zeros(ids.shape + (3,), np.uint8)
        items.append(DatasetItem(image, pan, caps[0] if caps else "", Path(file_name).stem))
        captions.append(caps)
    return PanopticDataset(items, names, flags, captions)
