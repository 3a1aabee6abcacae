"""Scikit-learn style wrapper around training and inference."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import RunConfig, config_from_dict
from .data import DatasetItem, PanopticDataset
from .encoders import Vocabulary
from .metrics import PQStat
from .model import images_to_tensor
from .panoptic import PanopticMap
from .training import map_categories, remap, train
from .validation import check_images, check_panoptic_targets, check_vocabulary


class OpenVocabPanopticSegmenter(BaseEstimator):
    """Open-vocabulary panoptic segmenter.

    ``fit`` takes images plus ground-truth panoptic maps (and captions when
    ``supervision='caption'``); ``predict`` accepts any vocabulary, not only
    the training categories.

    Parameters
    ----------
    supervision : {"label", "caption"}
    iterations, lr, batch_size : optimization budget
    num_queries : number of mask queries
    timesteps : diffusion time steps whose features are concatenated
    captioner_mode : {"implicit", "empty"}
    lam : weight of the diffusion-path classifier in the fused prediction
    seed : run seed
    dtype : {"float32", "float64"}
    overrides : optional nested dict of further config keys
    """

    def __init__(self, supervision: str = "label", iterations: int = 2000, lr: float = 1e-4, batch_size: int = 8,
                 num_queries: int = 20, timesteps: Sequence[int] = (0,), captioner_mode: str = "implicit",
                 lam: float = 0.65, seed: int = 0, dtype: str = "float32", overrides: dict | None = None):
        self.supervision = supervision
        self.iterations = iterations
        self.lr = lr
        self.batch_size = batch_size
        self.num_queries = num_queries
        self.timesteps = timesteps
        self.captioner_mode = captioner_mode
        self.lam = lam
        self.seed = seed
        self.dtype = dtype
        self.overrides = overrides

    def _config(self, image_size: int, categories: list[str], isthing: list[bool]) -> RunConfig:
        values = {
            "seed": self.seed, "supervision": self.supervision, "dtype": self.dtype,
            "timesteps": list(self.timesteps),
            "data": {"image_size": image_size,
                     "things": [c for c, t in zip(categories, isthing) if t],
                     "stuff": [c for c, t in zip(categories, isthing) if not t]},
            "captioner": {"mode": self.captioner_mode},
            "masks": {"num_queries": self.num_queries},
            "infer": {"lambda": self.lam},
            "optim": {"lr": self.lr, "iterations": self.iterations, "batch_size": self.batch_size},
            "log": {"every": 0},
        }
        _merge(values, self.overrides or {})
        return config_from_dict(values)

    def fit(self, X, y: Sequence[PanopticMap], categories: Sequence[str], isthing: Sequence[bool],
            captions: Sequence[str] | None = None) -> "OpenVocabPanopticSegmenter":
        X = check_images(X)
        categories, isthing = check_vocabulary(categories, isthing)
        y = check_panoptic_targets(y, len(X), X.shape[1:3], len(categories))
        if X.shape[1] != X.shape[2]:
            raise ValueError("training images must be square")
        if self.supervision == "caption":
            if captions is None or len(captions) != len(X):
                raise ValueError("caption supervision needs one caption per image")
        caps = list(captions) if captions is not None else [""] * len(X)
        items = [DatasetItem(x, pan, c, f"{i:06d}") for i, (x, pan, c) in enumerate(zip(X, y, caps))]
        dataset = PanopticDataset(items, categories, isthing, [[c] for c in caps])
        config = self._config(int(X.shape[1]), categories, isthing)
        result = train(config, dataset)
        self.model_ = result.model
        self.checkpoint_ = result.checkpoint
        self.vocabulary_ = dataset.vocabulary(config.templates)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _vocab(self, vocabulary: Vocabulary | None) -> Vocabulary:
        return self.vocabulary_ if vocabulary is None else vocabulary

    def predict(self, X, vocabulary: Vocabulary | None = None) -> list[PanopticMap]:
        check_is_fitted(self, "model_")
        X = check_images(X, self.model_.extractor.unet.downsample_factor)
        out = []
        for s in range(0, len(X), 8):
            out += self.model_.predict_panoptic(images_to_tensor(X[s:s + 8], self.model_.dtype), self._vocab(vocabulary))
        return out

    def transform(self, X) -> np.ndarray:
        """Finest pyramid level of the diffusion features, (n, C, h, w)."""
        check_is_fitted(self, "model_")
        X = check_images(X, self.model_.extractor.unet.downsample_factor)
        with torch.no_grad():
            pyr = self.model_.features(images_to_tensor(X, self.model_.dtype), eps_seed=self.seed)
        return pyr.levels[int(np.argmin(pyr.strides))].cpu().numpy()

    def score(self, X, y: Sequence[PanopticMap], vocabulary: Vocabulary | None = None) -> float:
        """Panoptic quality (0-100) against ``y`` labelled with the training categories."""
        check_is_fitted(self, "model_")
        vocab = self._vocab(vocabulary)
        preds = self.predict(X, vocab)
        y = check_panoptic_targets(y, len(preds), preds[0].shape, len(self.vocabulary_))
        train_ds = PanopticDataset([], self.vocabulary_.names, self.vocabulary_.isthing)
        mapping = map_categories(train_ds, vocab, self.model_.text_encoder.tokenizer)
        stat = PQStat()
        for pred, gt in zip(preds, y):
            stat.update(pred, remap(gt, mapping, vocab), len(vocab))
        return stat.result(vocab).pq


def _merge(base: dict, extra: dict) -> None:
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = v
