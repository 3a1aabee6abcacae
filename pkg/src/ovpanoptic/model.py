"""Full segmentation model: frozen backbones plus the trainable heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .captioner import FeatureExtractor, ImplicitCaptioner
from .checkpoint import Checkpoint, load_checkpoint
from .classifier import Temperature, class_logits
from .config import RunConfig
from .diffusion import FeaturePyramid, NoiseSchedule, PyramidProjection, TimeStepSpec, ToyUNet
from .encoders import ToyImageEncoder, ToyTextEncoder, Vocabulary, embed_vocabulary
from .inference import (FusedPrediction, fuse_predictions, instance_proposals, mask_confidence,
                        panoptic_assemble, pool_discriminative_embedding)
from .masks import MaskGenerator, MaskSet
from .panoptic import PanopticMap

TRAINABLE_PREFIXES = ("extractor.captioner.", "mask_generator.", "tau_cls.", "tau_grounding.", "null_embedding")


def dtype_of(name: str) -> torch.dtype:
    return {"float32": torch.float32, "float64": torch.float64}[name]


def images_to_tensor(images, dtype: torch.dtype = torch.float32) -> Tensor:
    """(B, H, W, 3) uint8 array or list of arrays -> (B, 3, H, W) in [0, 1]."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"expected (B, H, W, 3) images, got shape {arr.shape}")
    x = torch.from_numpy(np.array(arr, copy=True)).permute(0, 3, 1, 2)
    if arr.dtype == np.uint8:
        return x.to(dtype) / 255.0
    return x.to(dtype)


@dataclass
class ToyBackboneBundle:
    """Frozen text encoder T, image encoder V, denoising UNet and noise schedule."""

    text_encoder: ToyTextEncoder
    image_encoder: ToyImageEncoder
    unet: ToyUNet
    projection: PyramidProjection
    schedule: NoiseSchedule

    @classmethod
    def from_config(cls, config: RunConfig) -> "ToyBackboneBundle":
        t, v, u, p, s = config.text, config.image_encoder, config.unet, config.pyramid, config.schedule
        text = ToyTextEncoder(t.dim, t.context_length, t.layers, t.heads, t.vocab_size, t.seed)
        image = ToyImageEncoder(v.dim, v.width, v.stride, v.seed)
        unet = ToyUNet(t.dim, u.base_width, u.channel_mult, u.stem_stride, u.time_dim, u.heads, u.seed)
        if u.checkpoint:
            state = load_checkpoint(u.checkpoint).params
            unet.load_state_dict({k.removeprefix("unet."): v for k, v in state.items()})
        for q in unet.parameters():
            q.requires_grad_(False)
        taps = unet.tap_channels
        if any(i < 0 or i >= len(taps) for i in p.taps):
            raise ValueError(f"pyramid taps must index into {len(taps)} UNet stages")
        projection = PyramidProjection([taps[i] for i in p.taps], p.channels, p.seed)
        schedule = NoiseSchedule.linear(s.beta_start, s.beta_end, s.steps)
        return cls(text, image, unet, projection, schedule)


class OpenVocabSegmenter(nn.Module):
    """Feature extractor + mask generator + classification parameters.

    Trainable: captioner MLP, mask generator, the two temperatures and the
    null embedding. Everything else is frozen and rebuilt from seeds.
    """

    def __init__(self, config: RunConfig, bundle: ToyBackboneBundle | None = None):
        super().__init__()
        self.config = config
        bundle = bundle or ToyBackboneBundle.from_config(config)
        self.schedule = bundle.schedule
        self.spec = TimeStepSpec(config.timesteps, bundle.schedule.T)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            captioner = ImplicitCaptioner(config.image_encoder.dim, config.text.dim,
                                          config.captioner.pseudo_tokens, config.captioner.hidden_dim)
            self.extractor = FeatureExtractor(bundle.text_encoder, bundle.image_encoder, bundle.unet,
                                              bundle.projection, bundle.schedule, captioner,
                                              config.pyramid.taps, config.pyramid.strides, config.captioner.mode)
            m = config.masks
            in_channels = [config.pyramid.channels * len(self.spec)] * len(config.pyramid.taps)
            self.mask_generator = MaskGenerator(in_channels, config.text.dim, m.num_queries, m.hidden_dim,
                                                m.decoder_layers, m.heads, m.mask_stride, m.threshold)
            self.null_embedding = nn.Parameter(F.normalize(torch.randn(config.text.dim), dim=0))
        self.tau_cls = Temperature(config.cls.tau_init)
        self.tau_grounding = Temperature(config.grounding.tau_init)
        self.to(dtype_of(config.dtype))
        self.check_census()
        self._vocab_cache: dict[tuple, Tensor] = {}

    @property
    def dtype(self) -> torch.dtype:
        return self.null_embedding.dtype

    @property
    def text_encoder(self) -> ToyTextEncoder:
        return self.extractor.text_encoder

    def train(self, mode: bool = True) -> "OpenVocabSegmenter":
        super().train(mode)
        self.extractor.train(mode)
        return self

    def trainable_state(self) -> dict[str, Tensor]:
        return {n: p.detach().clone() for n, p in self.named_parameters() if p.requires_grad}

    def check_census(self) -> None:
        """Raise unless exactly the designated parameters are trainable."""
        for name, p in self.named_parameters():
            should = name.startswith(TRAINABLE_PREFIXES)
            if p.requires_grad != should:
                raise RuntimeError(f"parameter census violated at {name} (requires_grad={p.requires_grad})")

    def load_trainable(self, params: dict[str, Tensor]) -> None:
        own = dict(self.named_parameters())
        expected = {n for n, p in own.items() if p.requires_grad}
        if set(params) != expected:
            missing, extra = expected - set(params), set(params) - expected
            raise ValueError(f"checkpoint parameters mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        with torch.no_grad():
            for n, v in params.items():
                if own[n].shape != v.shape:
                    raise ValueError(f"shape mismatch for {n}: {tuple(v.shape)} vs {tuple(own[n].shape)}")
                own[n].copy_(v.to(own[n].dtype))

    def to_checkpoint(self, iteration: int = 0, optimizer: dict | None = None) -> Checkpoint:
        return Checkpoint(self.trainable_state(), iteration, self.config.hash(), self.config.to_dict(), optimizer)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, config: RunConfig | None = None) -> "OpenVocabSegmenter":
        from .config import config_from_dict
        config = config or config_from_dict(ckpt.config)
        model = cls(config)
        model.load_trainable(ckpt.params)
        return model

    def vocabulary_embedding(self, vocab: Vocabulary) -> Tensor:
        key = (tuple(vocab.names), tuple(vocab.templates))
        if key not in self._vocab_cache:
            with torch.no_grad():
                self._vocab_cache[key] = embed_vocabulary(vocab, self.text_encoder).to(self.dtype)
        return self._vocab_cache[key]

    def features(self, images: Tensor, eps_seed: int = 0) -> FeaturePyramid:
        return self.extractor(images, self.spec, eps_seed)

    def forward(self, images: Tensor, eps_seed: int = 0) -> MaskSet:
        pyramid = self.features(images, eps_seed)
        return self.mask_generator(pyramid, tuple(images.shape[-2:]))

    @torch.no_grad()
    def classify(self, images: Tensor, masks: MaskSet, vocab: Vocabulary) -> list[list[FusedPrediction]]:
        """Fused per-query predictions for a batch."""
        cfg = self.config.infer
        text = self.vocabulary_embedding(vocab)
        k = text.shape[0]
        use_null = self.config.cls.null_category
        rows = torch.cat([text, F.normalize(self.null_embedding, dim=-1)[None]]) if use_null else text
        disc_map = self.extractor.image_encoder(images).feature_map
        out = []
        for b in range(images.shape[0]):
            z = masks.embeddings[b]
            probs = class_logits(z, rows, self.tau_cls).double().softmax(-1)
            rejection = probs[:, k] if use_null else torch.zeros(z.shape[0], dtype=torch.float64)
            p_diff = probs[:, :k] / probs[:, :k].sum(-1, keepdim=True)
            mask_prob = masks.mask_logits[b].double().sigmoid()
            z_disc = pool_discriminative_embedding(disc_map[b], mask_prob >= self.mask_generator.threshold)
            p_disc = class_logits(z_disc.to(text.dtype), text, cfg.disc_tau).double().softmax(-1)
            p_final = fuse_predictions(p_diff, p_disc, cfg.lam)
            items = []
            mp = mask_prob.cpu().numpy()
            for i in range(z.shape[0]):
                pf = p_final[i].cpu().numpy()
                cat = int(np.argmax(pf))
                conf = mask_confidence(float(pf[cat]), mp[i], self.mask_generator.threshold)
                items.append(FusedPrediction(pf, cat, conf, float(rejection[i])))
            out.append(items)
        return out

    @torch.no_grad()
    def predict_raw(self, images: Tensor, vocab: Vocabulary) -> tuple[np.ndarray, list[list[FusedPrediction]]]:
        was_training = self.training
        self.eval()
        try:
            masks = self(images.to(self.dtype), eps_seed=self.config.seed)
            fused = self.classify(images.to(self.dtype), masks, vocab)
        finally:
            self.train(was_training)
        return masks.mask_logits.double().sigmoid().cpu().numpy(), fused

    def predict_panoptic(self, images: Tensor, vocab: Vocabulary) -> list[PanopticMap]:
        cfg = self.config.infer
        probs, fused = self.predict_raw(images, vocab)
        return [panoptic_assemble(probs[b], fused[b], vocab, cfg.conf_thresh, cfg.reject_thresh, cfg.overlap_keep,
                                  cfg.min_area, self.mask_generator.threshold) for b in range(len(fused))]

    def predict_proposals(self, images: Tensor, vocab: Vocabulary, class_agnostic: bool = False):
        cfg = self.config.infer
        probs, fused = self.predict_raw(images, vocab)
        top_k = min(cfg.top_k, self.mask_generator.num_queries)
        return [instance_proposals(probs[b], fused[b], vocab, top_k, cfg.reject_thresh, class_agnostic,
                                   self.mask_generator.threshold) for b in range(len(fused))]
