"""Query-based class-agnostic mask generation, masked pooling, matching and mask loss."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment
from torch import Tensor, nn

from .diffusion import FeaturePyramid


@dataclass
class MaskSet:
    mask_logits: Tensor  # (N, H, W) for one image or (B, N, H, W) for a batch
    embeddings: Tensor   # (N, d) or (B, N, d); L2-normalized

    @property
    def num_queries(self) -> int:
        return self.embeddings.shape[-2]

    def __getitem__(self, i: int) -> "MaskSet":
        return MaskSet(self.mask_logits[i], self.embeddings[i])

    def __len__(self) -> int:
        return self.mask_logits.shape[0] if self.mask_logits.ndim == 4 else 1


@dataclass
class GroundTruthMasks:
    masks: Tensor                 # (M, H, W) binary
    labels: Tensor | None = None  # (M,) long category indices

    def __post_init__(self) -> None:
        if self.masks.ndim != 3:
            raise ValueError("ground-truth masks must be (M, H, W)")
        if self.labels is not None and len(self.labels) != len(self.masks):
            raise ValueError("labels and masks differ in length")

    def __len__(self) -> int:
        return self.masks.shape[0]


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]
    unmatched: list[int] = field(default_factory=list)

    @property
    def queries(self) -> list[int]:
        return [q for q, _ in self.pairs]

    @property
    def targets(self) -> list[int]:
        return [g for _, g in self.pairs]


def _resize_mask(mask: Tensor, size: tuple[int, int], dtype: torch.dtype) -> Tensor:
    mask = mask.to(dtype)
    if tuple(mask.shape[-2:]) == tuple(size):
        return mask
    lead = mask.shape[:-2]
    m = mask.reshape(-1, 1, *mask.shape[-2:])
    # Area averaging when shrinking turns a binary mask into fractional coverage.
    if size[0] <= m.shape[-2] and size[1] <= m.shape[-1]:
        m = F.adaptive_avg_pool2d(m, size)
    else:
        m = F.interpolate(m, size=size, mode="nearest")
    return m.reshape(*lead, *size)


def masked_pool(feature_map: Tensor, mask: Tensor) -> Tensor:
    """Weighted mean of features under a (binary or soft) mask.

    ``feature_map`` is (..., d, h, w). ``mask`` is either (..., H, W), giving
    one d-vector per map, or (..., N, H, W), giving N vectors per map. The
    mask is resized to h x w first. Where a mask has no support the plain
    spatial mean is returned instead.
    """
    single = mask.ndim == feature_map.ndim - 1
    if single:
        mask = mask.unsqueeze(-3)
    weights = _resize_mask(mask, tuple(feature_map.shape[-2:]), feature_map.dtype).flatten(-2)
    total = weights.sum(-1, keepdim=True)
    empty = total <= 0
    weights = torch.where(empty, torch.full_like(weights, 1.0 / weights.shape[-1]),
                          weights / torch.where(empty, torch.ones_like(total), total))
    pooled = weights @ feature_map.flatten(-2).transpose(-1, -2)
    return pooled.squeeze(-2) if single else pooled


def _pos_encoding(h: int, w: int, dim: int, dtype: torch.dtype, device: torch.device) -> Tensor:
    """2-D sine positional encoding, (h*w, dim)."""
    quarter = dim // 4
    freqs = 1.0 / (100.0 ** (torch.arange(quarter, dtype=dtype, device=device) / quarter))
    ys = (torch.arange(h, dtype=dtype, device=device) + 0.5) / h * 2 * math.pi
    xs = (torch.arange(w, dtype=dtype, device=device) + 0.5) / w * 2 * math.pi
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    parts = [torch.sin(yy[..., None] * freqs), torch.cos(yy[..., None] * freqs),
             torch.sin(xx[..., None] * freqs), torch.cos(xx[..., None] * freqs)]
    pe = torch.cat(parts, dim=-1).reshape(h * w, 4 * quarter)
    if pe.shape[1] < dim:
        pe = F.pad(pe, (0, dim - pe.shape[1]))
    return pe


def _coords(h: int, w: int, like: Tensor) -> Tensor:
    ys = torch.linspace(-1, 1, h, dtype=like.dtype, device=like.device)
    xs = torch.linspace(-1, 1, w, dtype=like.dtype, device=like.device)
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([yy, xx]).expand(like.shape[0], 2, h, w)


def _conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1), nn.GroupNorm(8 if cout % 8 == 0 else 1, cout), nn.ReLU())


class _DecoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.cross = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, 2 * dim), nn.ReLU(), nn.Linear(2 * dim, dim))
        self.norm3 = nn.LayerNorm(dim)

    def forward(self, q: Tensor, qpos: Tensor, memory: Tensor, mpos: Tensor) -> Tensor:
        q = self.norm1(q + self.cross(q + qpos, memory + mpos, memory, need_weights=False)[0])
        q = self.norm2(q + self.self_attn(q + qpos, q + qpos, q, need_weights=False)[0])
        return self.norm3(q + self.ffn(q))


class MaskGenerator(nn.Module):
    """FPN pixel decoder plus a transformer decoder over learned queries.

    Mask logits are per-query embeddings dotted with a per-pixel feature map;
    mask embeddings are the L2-normalized masked pooling of an embedding map
    under each query's binarized mask.
    """

    def __init__(self, in_channels: Sequence[int], embed_dim: int, num_queries: int = 20, hidden_dim: int = 64,
                 decoder_layers: int = 3, heads: int = 4, mask_stride: int = 2, threshold: float = 0.5):
        super().__init__()
        self.num_queries = num_queries
        self.threshold = threshold
        self.mask_stride = mask_stride
        self.lateral = nn.ModuleList(nn.Conv2d(c, hidden_dim, 1) for c in in_channels)
        self.smooth = nn.ModuleList(_conv_block(hidden_dim, hidden_dim) for _ in in_channels)
        self.level_embed = nn.Parameter(torch.zeros(len(in_channels), hidden_dim))
        self.pixel_head = _conv_block(hidden_dim + 2, hidden_dim)
        self.upsample_head = nn.Conv2d(hidden_dim + 2, hidden_dim, 3, padding=1)
        self.embed_head = nn.Conv2d(hidden_dim, embed_dim, 1)
        self.query_feat = nn.Embedding(num_queries, hidden_dim)
        self.query_pos = nn.Embedding(num_queries, hidden_dim)
        self.layers = nn.ModuleList(_DecoderLayer(hidden_dim, heads) for _ in range(decoder_layers))
        self.query_norm = nn.LayerNorm(hidden_dim)
        self.mask_embed = nn.Sequential(nn.Linear(hidden_dim, hidden_dim), nn.ReLU(),
                                        nn.Linear(hidden_dim, hidden_dim), nn.ReLU(),
                                        nn.Linear(hidden_dim, hidden_dim))

    def forward(self, pyramid: FeaturePyramid, image_size: tuple[int, int]) -> MaskSet:
        # Top-down fusion from the coarsest level to the finest.
        order = sorted(range(len(pyramid.levels)), key=lambda i: -pyramid.strides[i])
        fused: dict[int, Tensor] = {}
        prev = None
        for i in order:
            x = self.lateral[i](pyramid.levels[i])
            if prev is not None:
                x = x + F.interpolate(prev, size=x.shape[-2:], mode="bilinear", align_corners=False)
            prev = self.smooth[i](x)
            fused[i] = prev
        finest = prev
        pix = self.pixel_head(torch.cat([finest, _coords(*finest.shape[-2:], finest)], dim=1))
        embed_map = self.embed_head(pix)

        h, w = image_size
        out_size = (math.ceil(h / self.mask_stride), math.ceil(w / self.mask_stride))
        if tuple(pix.shape[-2:]) != out_size:
            up = F.interpolate(pix, size=out_size, mode="bilinear", align_corners=False)
            mask_features = self.upsample_head(torch.cat([up, _coords(*out_size, up)], dim=1))
        else:
            mask_features = pix

        b = finest.shape[0]
        q = self.query_feat.weight.unsqueeze(0).expand(b, -1, -1)
        qpos = self.query_pos.weight.unsqueeze(0).expand(b, -1, -1)
        for j, layer in enumerate(self.layers):
            lvl = order[j % len(order)]
            mem = fused[lvl].flatten(2).transpose(1, 2)
            mpos = _pos_encoding(*fused[lvl].shape[-2:], mem.shape[-1], mem.dtype, mem.device)
            mpos = mpos.unsqueeze(0) + self.level_embed[lvl]
            q = layer(q, qpos, mem, mpos)
        q = self.query_norm(q)

        logits = torch.einsum("bqc,bchw->bqhw", self.mask_embed(q), mask_features)
        if tuple(logits.shape[-2:]) != (h, w):
            logits = F.interpolate(logits, size=(h, w), mode="bilinear", align_corners=False)
        support = (logits.detach().sigmoid() >= self.threshold)
        pooled = masked_pool(embed_map, support)  # (B, N, d)
        return MaskSet(mask_logits=logits, embeddings=F.normalize(pooled, dim=-1))


def _flat(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)


def pairwise_match_cost(logits: Tensor, gt: Tensor, w_bce: float = 1.0, w_dice: float = 1.0) -> Tensor:
    """(N, M) matrix of ``w_bce * mean BCE + w_dice * (1 - dice)``."""
    x = _flat(logits)
    y = _flat(gt).to(x.dtype)
    hw = x.shape[1]
    pos = F.binary_cross_entropy_with_logits(x, torch.ones_like(x), reduction="none")
    neg = F.binary_cross_entropy_with_logits(x, torch.zeros_like(x), reduction="none")
    bce = (pos @ y.T + neg @ (1 - y).T) / hw
    p = x.sigmoid()
    dice = (2 * p @ y.T + 1) / (p.sum(-1)[:, None] + y.sum(-1)[None, :] + 1)
    return w_bce * bce + w_dice * (1 - dice)


def match_cost(logits: Tensor, gt: Tensor, w_bce: float = 1.0, w_dice: float = 1.0) -> float:
    if logits.shape != gt.shape:
        raise ValueError("prediction and ground truth shapes differ")
    return float(pairwise_match_cost(logits[None], gt[None], w_bce, w_dice)[0, 0])


def assign(cost: np.ndarray) -> Assignment:
    """Minimum-cost one-to-one assignment of every column to a distinct row."""
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if m > n:
        raise ValueError(f"more ground-truth segments ({m}) than queries ({n})")
    if m == 0:
        return Assignment(pairs=[], unmatched=list(range(n)))
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted(zip(rows.tolist(), cols.tolist()), key=lambda p: p[1])
    taken = set(rows.tolist())
    return Assignment(pairs=pairs, unmatched=[q for q in range(n) if q not in taken])


@torch.no_grad()
def hungarian_match(pred: MaskSet, gt: GroundTruthMasks, w_bce: float = 1.0, w_dice: float = 1.0) -> Assignment:
    n = pred.mask_logits.shape[0]
    if len(gt) > n:
        raise ValueError(f"more ground-truth segments ({len(gt)}) than queries ({n})")
    if len(gt) == 0:
        return Assignment(pairs=[], unmatched=list(range(n)))
    cost = pairwise_match_cost(pred.mask_logits, gt.masks, w_bce, w_dice)
    return assign(cost.double().cpu().numpy())


def mask_loss(pred: MaskSet, gt: GroundTruthMasks, a: Assignment, w_bce: float = 1.0,
              w_dice: float = 1.0) -> Tensor:
    """Mean over matched pairs of per-pixel BCE plus weighted Dice loss."""
    logits = pred.mask_logits
    if not a.pairs:
        return logits.sum() * 0.0
    x = _flat(logits[a.queries])
    y = _flat(gt.masks[a.targets]).to(x.dtype)
    bce = F.binary_cross_entropy_with_logits(x, y, reduction="none").mean(-1)
    p = x.sigmoid()
    dice = 1 - (2 * (p * y).sum(-1) + 1) / (p.sum(-1) + y.sum(-1) + 1)
    return (w_bce * bce + w_dice * dice).mean()
