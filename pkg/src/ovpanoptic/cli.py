"""Command line entry point: ``ovpanoptic {train,eval,infer,cluster,generate}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .checkpoint import CheckpointError, load_checkpoint
from .cluster import cluster_features, save_label_image
from .config import ConfigError, config_from_dict, dump_config, load_config
from .data import CocoFormatError, PanopticDataset, read_coco_panoptic, write_coco_panoptic, write_dataset
from .encoders import Vocabulary
from .metrics import format_pq_table, report_json
from .model import OpenVocabSegmenter, images_to_tensor
from .training import TASKS, TrainingDiverged, evaluate, load_dataset, train

log = logging.getLogger("ovpanoptic")


def _load_model(path: str, force: bool = False) -> OpenVocabSegmenter:
    ckpt = load_checkpoint(path)
    config = config_from_dict(ckpt.config)
    if config.hash() != ckpt.config_hash and not force:
        raise CheckpointError(f"{path}: stored config does not match its hash")
    return OpenVocabSegmenter.from_checkpoint(ckpt, config)


def _load_image(path: str) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def _load_vocab(spec: str, model: OpenVocabSegmenter, dataset: PanopticDataset | None = None) -> Vocabulary:
    """A vocabulary file, or ``train`` for the training categories."""
    if spec == "train":
        ds = dataset if dataset is not None else load_dataset(model.config)
        return ds.vocabulary(model.config.templates)
    return Vocabulary.from_file(spec, model.config.templates)


def cmd_train(args: argparse.Namespace) -> int:
    config = load_config(args.config, args.set)
    out = Path(args.out or config.log.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(config), encoding="utf-8")
    result = train(config, resume=args.resume, out_dir=out, force=args.force)
    rep = evaluate(result.model, load_dataset(config), load_dataset(config).vocabulary(config.templates), "panoptic")
    (out / "train_eval.json").write_text(report_json({k: v for k, v in rep.items()
                                                      if k not in ("result", "predictions")}), encoding="utf-8")
    print(format_pq_table({"train": rep["result"]}))
    print(f"checkpoint: {out / 'final.ckpt'}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    model = _load_model(args.checkpoint, args.force)
    dataset = load_dataset(model.config) if args.dataset == "train" else read_coco_panoptic(args.dataset)
    vocab = _load_vocab(args.vocab, model, dataset)
    rep = evaluate(model, dataset, vocab, args.task)
    payload = {k: v for k, v in rep.items() if k not in ("result", "predictions")}
    if args.out:
        Path(args.out).write_text(report_json(payload), encoding="utf-8")
    if args.task == "panoptic":
        print(format_pq_table({Path(args.checkpoint).stem: rep["result"]}))
    else:
        print(json.dumps(rep["summary"]))
    return 0


def cmd_infer(args: argparse.Namespace) -> int:
    model = _load_model(args.checkpoint, args.force)
    vocab = _load_vocab(args.vocab, model)
    image = _load_image(args.image)
    pan = model.predict_panoptic(images_to_tensor(image, model.dtype), vocab)[0]
    write_coco_panoptic(args.out, [pan], vocab.names, vocab.isthing, [Path(args.image).stem], [image])
    for s in pan.segments:
        print(f"{s.id}\t{vocab.names[s.category]}\t{'thing' if s.isthing else 'stuff'}\t{s.score:.3f}")
    return 0


def cmd_cluster(args: argparse.Namespace) -> int:
    model = _load_model(args.checkpoint, args.force)
    labels = cluster_features(model, _load_image(args.image), args.k, seed=args.seed)
    save_label_image(labels, args.out, args.k, args.seed)
    print(f"wrote {args.out}")
    return 0


def cmd_generate(args: argparse.Namespace) -> int:
    config = load_config(args.config, args.set)
    write_dataset(args.out, load_dataset(config))
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ovpanoptic", description="Open-vocabulary panoptic segmentation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", required=False)
    t.add_argument("--resume")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--out", help="output directory (default: log.out_dir)")
    t.add_argument("--force", action="store_true", help="resume even if the config hash differs")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True, help="COCO panoptic directory or 'train'")
    e.add_argument("--vocab", required=True, help="vocabulary file or 'train'")
    e.add_argument("--task", choices=TASKS, default="panoptic")
    e.add_argument("--out", help="write the JSON report here")
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="segment one image")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--vocab", required=True)
    i.add_argument("--out", required=True, help="output directory (COCO panoptic layout)")
    i.add_argument("--force", action="store_true")
    i.set_defaults(func=cmd_infer)

    c = sub.add_parser("cluster", help="k-means visualization of diffusion features")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--image", required=True)
    c.add_argument("--k", type=int, required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--force", action="store_true")
    c.set_defaults(func=cmd_cluster)

    g = sub.add_parser("generate", help="write the synthetic dataset in COCO panoptic format")
    g.add_argument("--config")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, CocoFormatError, TrainingDiverged, ValueError, KeyError,
            FileNotFoundError, OSError) as exc:
        print(f"ovpanoptic {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
