"""Implicit captioner: frozen image embedding -> trainable MLP -> pseudo-token sequence."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .diffusion import (FeaturePyramid, NoiseSchedule, PyramidProjection, TimeStepSpec, ToyUNet,
                        extract_features)
from .encoders import ToyImageEncoder, ToyTextEncoder, TokenSequence

MODES = ("implicit", "empty")


@dataclass
class ImplicitCaption:
    sequence: Tensor              # (B, L_c, d)
    padding: Tensor | None = None  # (B, L_c) bool; only set for the empty caption


class ImplicitCaptioner(nn.Module):
    """Two-hidden-layer GELU MLP from the pooled image embedding to ``pseudo_tokens`` text tokens."""

    def __init__(self, image_dim: int, text_dim: int, pseudo_tokens: int = 8, hidden_dim: int = 128):
        super().__init__()
        self.pseudo_tokens = pseudo_tokens
        self.text_dim = text_dim
        self.mlp = nn.Sequential(
            nn.Linear(image_dim, hidden_dim), nn.GELU(),
            nn.Linear(hidden_dim, hidden_dim), nn.GELU(),
            nn.Linear(hidden_dim, pseudo_tokens * text_dim),
        )

    def forward(self, pooled: Tensor) -> Tensor:
        return self.mlp(pooled).view(pooled.shape[0], self.pseudo_tokens, self.text_dim)


class FeatureExtractor(nn.Module):
    """Frozen diffusion UNet + frozen image encoder + trainable captioner MLP.

    Only ``captioner`` carries trainable parameters.
    """

    def __init__(self, text_encoder: ToyTextEncoder, image_encoder: ToyImageEncoder, unet: ToyUNet,
                 projection: PyramidProjection, schedule: NoiseSchedule, captioner: ImplicitCaptioner,
                 tap_indices, strides, mode: str = "implicit"):
        super().__init__()
        if mode not in MODES:
            raise ValueError(f"captioner mode must be one of {MODES}, got {mode!r}")
        self.text_encoder = text_encoder
        self.image_encoder = image_encoder
        self.unet = unet
        self.projection = projection
        self.captioner = captioner
        self.schedule = schedule
        self.tap_indices = tuple(tap_indices)
        self.strides = tuple(strides)
        self.mode = mode
        for module in (text_encoder, image_encoder, unet, projection):
            for p in module.parameters():
                p.requires_grad_(False)

    def train(self, mode: bool = True) -> "FeatureExtractor":
        super().train(mode)
        for module in (self.text_encoder, self.image_encoder, self.unet, self.projection):
            module.eval()
        return self

    def implicit_caption(self, images: Tensor, mode: str | None = None) -> ImplicitCaption:
        mode = mode or self.mode
        if mode == "empty":
            empty = TokenSequence((0,) * self.text_encoder.context_length)
            emb = self.text_encoder([empty] * images.shape[0])
            return ImplicitCaption(emb.sequence, emb.padding)
        if mode != "implicit":
            raise ValueError(f"unknown captioner mode {mode!r}")
        pooled = self.image_encoder(images).pooled
        return ImplicitCaption(self.captioner(pooled))

    def forward(self, images: Tensor, spec: TimeStepSpec, eps_seed: int = 0,
                mode: str | None = None) -> FeaturePyramid:
        caption = self.implicit_caption(images, mode)
        return extract_features(self.unet, self.projection, self.schedule, images, caption.sequence, spec,
                                eps_seed, self.tap_indices, self.strides, caption.padding)
