"""Training loop and dataset evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .classifier import GroundingItem, category_loss, grounding_loss, objectness_loss
from .config import RunConfig
from .data import PanopticDataset, generate_synthetic_dataset, read_coco_panoptic
from .encoders import Vocabulary, embed_words, extract_nouns
from .inference import semantic_from_panoptic
from .masks import hungarian_match, mask_loss
from .metrics import APAccumulator, IoUAccumulator, PQStat, RecallAccumulator, category_rows
from .model import OpenVocabSegmenter, images_to_tensor
from .panoptic import PanopticMap, Segment

log = logging.getLogger(__name__)

TASKS = ("panoptic", "semantic", "instance", "proposals")


class TrainingDiverged(RuntimeError):
    """The loss became NaN or infinite."""


@dataclass
class TrainResult:
    model: OpenVocabSegmenter
    checkpoint: Checkpoint
    records: list[dict[str, Any]] = field(default_factory=list)


def load_dataset(config: RunConfig) -> PanopticDataset:
    d = config.data
    if d.path:
        return read_coco_panoptic(d.path)
    return generate_synthetic_dataset(d.num_images, d.image_size, d.things, d.stuff, config.seed,
                                      d.min_things, d.max_things, d.min_size, d.max_size,
                                      max_stuff=d.max_stuff)


def learning_rate(config: RunConfig, iteration: int) -> float:
    """Step decay by ``gamma`` at each milestone fraction of the iteration budget."""
    o = config.optim
    passed = sum(iteration >= int(round(m * o.iterations)) for m in o.milestones)
    return o.lr * o.gamma ** passed


def batch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_indices(seed: int, iteration: int, n: int, batch_size: int) -> list[int]:
    """Seed-determined batch for a given iteration; epochs are fresh permutations."""
    start = iteration * batch_size
    out = []
    for pos in range(start, start + batch_size):
        epoch, offset = divmod(pos, n)
        out.append(int(batch_order(seed, epoch, n)[offset]))
    return out


def build_optimizer(model: OpenVocabSegmenter, config: RunConfig) -> torch.optim.AdamW:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        (no_decay if name.startswith(("tau_", "null_embedding")) else decay).append(p)
    return torch.optim.AdamW([{"params": decay, "weight_decay": config.optim.weight_decay},
                              {"params": no_decay, "weight_decay": 0.0}], lr=config.optim.lr)


def _caption_for(dataset: PanopticDataset, i: int, seed: int, epoch: int) -> str:
    caps = dataset.captions[i] if dataset.captions and dataset.captions[i] else [dataset.items[i].caption]
    if len(caps) == 1:
        return caps[0]
    return caps[int(np.random.default_rng([seed, epoch, i]).integers(len(caps)))]


def compute_losses(model: OpenVocabSegmenter, dataset: PanopticDataset, indices: list[int], vocab: Vocabulary,
                   iteration: int = 0, word_cache: dict | None = None) -> dict[str, torch.Tensor]:
    cfg = model.config
    dtype = model.dtype
    images = images_to_tensor(np.stack([dataset.items[i].image for i in indices]), dtype)
    masks = model(images, eps_seed=cfg.seed * 100003 + iteration)
    text = model.vocabulary_embedding(vocab)
    word_cache = {} if word_cache is None else word_cache
    l_mask, l_cls = [], []
    grounding = []
    epoch = iteration * cfg.optim.batch_size // max(len(dataset), 1)
    for b, i in enumerate(indices):
        gt = dataset.items[i].ground_truth(dtype)
        pred = masks[b]
        a = hungarian_match(pred, gt, cfg.masks.cost.bce, cfg.masks.cost.dice)
        l_mask.append(mask_loss(pred, gt, a, cfg.masks.loss.bce, cfg.masks.loss.dice))
        null = model.null_embedding if cfg.cls.null_category else None
        if cfg.supervision == "label":
            l_cls.append(category_loss(pred.embeddings, gt.labels, a, text, model.tau_cls, null, cfg.cls.null_weight))
        else:
            caption = _caption_for(dataset, i, cfg.seed, epoch)
            if caption not in word_cache:
                nouns = extract_nouns(caption, cfg.grounding.k_word)
                with torch.no_grad():
                    word_cache[caption] = embed_words(nouns, model.text_encoder, vocab.templates).to(dtype)
            words = word_cache[caption]
            if words.shape[0] == 0:
                # no nouns: the item leaves the grounding batch
                continue
            # queries with an empty mask predict no region and carry no grounding term
            has_region = (pred.mask_logits.detach() >= 0).flatten(1).any(1)
            grounding.append(GroundingItem(pred.embeddings * has_region[:, None].to(dtype), words))
            if null is not None:
                l_cls.append(objectness_loss(pred.embeddings, a, words, model.tau_cls, null, cfg.cls.null_weight))
    losses = {"mask": torch.stack(l_mask).mean()}
    total = losses["mask"]
    if l_cls:
        key = "cls" if cfg.supervision == "label" else "objectness"
        losses[key] = torch.stack(l_cls).mean()
        total = total + cfg.cls.weight * losses[key]
    if grounding:
        losses["grounding"] = grounding_loss(grounding, model.tau_cls.value.detach(), model.tau_grounding)
        total = total + cfg.grounding.weight * losses["grounding"]
    losses["total"] = total
    return losses


def train(config: RunConfig, dataset: PanopticDataset | None = None, resume: str | Path | Checkpoint | None = None,
          out_dir: str | Path | None = None, force: bool = False) -> TrainResult:
    """Run the optimization loop; writes ``metrics.jsonl`` and ``final.ckpt`` when ``out_dir`` is set."""
    torch.manual_seed(config.seed)
    dataset = dataset if dataset is not None else load_dataset(config)
    if config.supervision == "caption" and not any(it.caption for it in dataset.items):
        raise ValueError("caption supervision requires captions in the dataset")
    vocab = dataset.vocabulary(config.templates)
    model = OpenVocabSegmenter(config)
    optimizer = build_optimizer(model, config)
    start = 0
    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume, config.hash(), force)
        if ckpt.config_hash != config.hash() and not force:
            raise ValueError("checkpoint config hash does not match the run config")
        model.load_trainable(ckpt.params)
        if ckpt.optimizer is not None:
            optimizer.load_state_dict(ckpt.optimizer)
        start = ckpt.iteration
    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = (out / "metrics.jsonl").open("a" if resume is not None else "w", encoding="utf-8")
    records: list[dict[str, Any]] = []

    def emit(record: dict[str, Any]) -> None:
        records.append(record)
        if log_file is not None:
            log_file.write(json.dumps(record, sort_keys=True) + "\n")
            log_file.flush()

    word_cache: dict[str, torch.Tensor] = {}
    n_iter = config.optim.iterations
    model.train()
    try:
        for it in range(start, n_iter):
            lr = learning_rate(config, it)
            for group in optimizer.param_groups:
                group["lr"] = lr
            idx = batch_indices(config.seed, it, len(dataset), config.optim.batch_size)
            losses = compute_losses(model, dataset, idx, vocab, it, word_cache)
            total = losses["total"]
            if not torch.isfinite(total):
                raise TrainingDiverged(f"non-finite loss at iteration {it}: {total.item()}")
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            params = [p for p in model.parameters() if p.requires_grad]
            grad_norm = torch.nn.utils.clip_grad_norm_(params, config.optim.clip_norm)
            optimizer.step()
            step = it + 1
            if config.log.every and (step % config.log.every == 0 or step == n_iter):
                emit({"iter": step, "lr": lr, "grad_norm": float(grad_norm),
                      "tau_cls": model.tau_cls.value.item(), "tau_grounding": model.tau_grounding.value.item(),
                      **{f"loss_{k}": v.item() for k, v in losses.items()}})
            if config.log.eval_every and step % config.log.eval_every == 0:
                rep = evaluate(model, dataset, vocab, "panoptic")
                emit({"iter": step, "eval": rep["summary"]})
                model.train()
            if out is not None and config.log.checkpoint_every and step % config.log.checkpoint_every == 0:
                save_checkpoint(out / f"iter_{step:06d}.ckpt", model.to_checkpoint(step, optimizer.state_dict()))
        model.check_census()
        ckpt = model.to_checkpoint(max(n_iter, start), optimizer.state_dict())
        if out is not None:
            save_checkpoint(out / "final.ckpt", ckpt)
    finally:
        if log_file is not None:
            log_file.close()
    model.eval()
    return TrainResult(model, ckpt, records)


def map_categories(dataset: PanopticDataset, vocab: Vocabulary, tokenizer) -> dict[int, int]:
    """Dataset category index -> vocabulary index, matched by canonical name."""
    canon = {tokenizer.canonical_name(n): k for k, n in enumerate(vocab.names)}
    mapping = {}
    for k, name in enumerate(dataset.categories):
        key = tokenizer.canonical_name(name)
        if key not in canon:
            raise ValueError(f"dataset category {name!r} has no counterpart in the evaluation vocabulary")
        mapping[k] = canon[key]
    return mapping


def remap(pan: PanopticMap, mapping: dict[int, int], vocab: Vocabulary) -> PanopticMap:
    segs = [Segment(s.id, mapping[s.category], bool(vocab.isthing[mapping[s.category]]), s.score)
            for s in pan.segments]
    return PanopticMap(pan.segment_ids, segs)


def evaluate(model: OpenVocabSegmenter | Checkpoint | str | Path, dataset: PanopticDataset, vocab: Vocabulary,
             task: str = "panoptic", batch_size: int = 8, force: bool = False) -> dict[str, Any]:
    """Run inference over ``dataset`` with ``vocab`` and score it.

    The vocabulary may differ from the training one; ground-truth
    categories are matched to it by canonical (synonym-resolved) name.
    """
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}, got {task!r}")
    if not isinstance(model, OpenVocabSegmenter):
        ckpt = model if isinstance(model, Checkpoint) else load_checkpoint(model)
        model = OpenVocabSegmenter.from_checkpoint(ckpt)
    mapping = map_categories(dataset, vocab, model.text_encoder.tokenizer)
    gts = [remap(it.panoptic, mapping, vocab) for it in dataset.items]
    if task in ("instance", "proposals") and not any(any(s.isthing for s in g.segments) for g in gts):
        raise ValueError(f"task {task!r} needs instance (thing) ground truth")
    pq, iou = PQStat(), IoUAccumulator(len(vocab))
    recall, ap = RecallAccumulator(model.config.infer.top_k), APAccumulator(
        [k for k, t in enumerate(vocab.isthing) if t])
    predictions: list[PanopticMap] = []
    for s in range(0, len(dataset), batch_size):
        chunk = list(range(s, min(s + batch_size, len(dataset))))
        images = images_to_tensor(np.stack([dataset.items[i].image for i in chunk]), model.dtype)
        if task in ("panoptic", "semantic"):
            for i, pred in zip(chunk, model.predict_panoptic(images, vocab)):
                predictions.append(pred)
                if task == "panoptic":
                    pq.update(pred, gts[i], len(vocab))
                else:
                    iou.update(semantic_from_panoptic(pred, vocab), semantic_from_panoptic(gts[i], vocab))
        else:
            props = model.predict_proposals(images, vocab, class_agnostic=(task == "proposals"))
            for i, plist in zip(chunk, props):
                masks, cats, things = gts[i].masks()
                inst = [(m, int(c)) for m, c, t in zip(masks, cats, things) if t]
                if task == "proposals":
                    recall.update([p.mask for p in plist], [m for m, _ in inst])
                else:
                    ap.update([(p.mask, p.category, p.score) for p in plist], inst)
    report: dict[str, Any] = {"task": task, "num_images": len(dataset), "vocabulary": list(vocab.names)}
    if task == "panoptic":
        res = pq.result(vocab)
        report["summary"] = res.as_dict()
        report["categories"] = category_rows(res, vocab)
        report["result"] = res
    elif task == "semantic":
        miou, per_cat = iou.result()
        report["summary"] = {"mIoU": miou}
        report["categories"] = [{"category": vocab.names[k], "iou": v} for k, v in sorted(per_cat.items())]
    elif task == "proposals":
        report["summary"] = {f"AR@{recall.k}": recall.result()}
    else:
        report["summary"] = {"mAP": ap.result()}
    report["predictions"] = predictions
    return report
