"""Forward noising, a toy text-conditioned UNet, and feature-pyramid tapping."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step multipliers ``alphas[k-1] = alpha_k`` for k = 1..T.

    ``alpha_bars[t]`` is the cumulative product up to step t, with the empty
    product ``alpha_bars[0] = 1``. Products are accumulated in float64.
    """

    alphas: np.ndarray

    def __post_init__(self) -> None:
        a = np.asarray(self.alphas, dtype=np.float64)
        if a.ndim != 1 or np.any(a <= 0) or np.any(a > 1):
            raise ValueError("alphas must be a 1-D array with entries in (0, 1]")
        object.__setattr__(self, "alphas", a)
        object.__setattr__(self, "alpha_bars", np.concatenate([[1.0], np.cumprod(a)]))

    @property
    def T(self) -> int:
        return len(self.alphas)

    @classmethod
    def linear(cls, beta_start: float = 1e-4, beta_end: float = 2e-2, steps: int = 1000) -> "NoiseSchedule":
        return cls(1.0 - np.linspace(beta_start, beta_end, steps, dtype=np.float64))


def alpha_bar(schedule: NoiseSchedule, t: int) -> float:
    if not 0 <= t <= schedule.T:
        raise ValueError(f"time step {t} outside [0, {schedule.T}]")
    return float(schedule.alpha_bars[t])


def add_noise(x: Tensor, t: int, eps: Tensor, schedule: NoiseSchedule) -> Tensor:
    """``sqrt(abar_t) * x + sqrt(1 - abar_t) * eps``; returns ``x`` itself at t = 0."""
    if eps.shape != x.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} does not match input {tuple(x.shape)}")
    ab = alpha_bar(schedule, t)
    if ab == 1.0:
        return x
    return math.sqrt(ab) * x + math.sqrt(1.0 - ab) * eps


@dataclass(frozen=True)
class TimeStepSpec:
    steps: tuple[int, ...]

    def __init__(self, steps: Sequence[int], T: int = 1000):
        steps = tuple(int(s) for s in steps)
        if not steps:
            raise ValueError("time step spec must be non-empty")
        if any(b < a for a, b in zip(steps, steps[1:])):
            raise ValueError("time steps must be sorted")
        if any(s < 0 or s > T for s in steps):
            raise ValueError(f"time steps must lie in [0, {T}]")
        object.__setattr__(self, "steps", steps)

    def __len__(self) -> int:
        return len(self.steps)


def timestep_embedding(t: Tensor, dim: int) -> Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = t[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def _groups(channels: int) -> int:
    return 8 if channels % 8 == 0 else 1


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.time = nn.Linear(time_dim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    """Visual tokens (queries) attend to the text sequence (keys, values)."""

    def __init__(self, channels: int, text_dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.q = nn.Linear(channels, channels, bias=False)
        self.k = nn.Linear(text_dim, channels, bias=False)
        self.v = nn.Linear(text_dim, channels, bias=False)
        self.out = nn.Linear(channels, channels)

    def forward(self, x: Tensor, text: Tensor, text_padding: Tensor | None = None) -> Tensor:
        b, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)  # (B, hw, C)
        dh = c // self.heads
        q = self.q(tokens).view(b, h * w, self.heads, dh).transpose(1, 2)
        k = self.k(text).view(b, text.shape[1], self.heads, dh).transpose(1, 2)
        v = self.v(text).view(b, text.shape[1], self.heads, dh).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        if text_padding is not None:
            mask = text_padding & ~text_padding.all(dim=1, keepdim=True)
            scores = scores.masked_fill(mask[:, None, None, :], float("-inf"))
        out = (scores.softmax(-1) @ v).transpose(1, 2).reshape(b, h * w, c)
        return x + self.out(out).transpose(1, 2).view(b, c, h, w)


class _Stage(nn.Module):
    def __init__(self, cin: int, cout: int, text_dim: int, time_dim: int, heads: int):
        super().__init__()
        self.res = ResBlock(cin, cout, time_dim)
        self.attn = CrossAttention(cout, text_dim, heads)

    def forward(self, x: Tensor, temb: Tensor, text: Tensor, padding: Tensor | None) -> Tensor:
        return self.attn(self.res(x, temb), text, padding)


class ToyUNet(nn.Module):
    """Three-resolution UNet with one residual and one cross-attention block per
    resolution on each side.

    A strided stem maps the image to a latent grid (stride ``stem_stride``);
    the encoder then halves the grid twice. The forward pass returns the
    noise prediction plus the list of per-stage activations, encoder stages
    first: ``[down0, down1, down2, up2, up1, up0]``.
    """

    def __init__(self, text_dim: int = 64, base_width: int = 32, channel_mult: Sequence[int] = (1, 2, 2),
                 stem_stride: int = 2, time_dim: int = 64, heads: int = 4, seed: int = 1003):
        super().__init__()
        if stem_stride < 1 or stem_stride & (stem_stride - 1):
            raise ValueError("stem_stride must be a power of two")
        self.stem_stride = stem_stride
        self.time_dim = time_dim
        widths = [base_width * m for m in channel_mult]
        self.widths = widths
        self.downsample_factor = stem_stride * 2 ** (len(widths) - 1)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.time_mlp = nn.Sequential(nn.Linear(time_dim, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim))
            self.stem = nn.Conv2d(3, widths[0], 3, stride=stem_stride, padding=1) if stem_stride > 1 \
                else nn.Conv2d(3, widths[0], 3, padding=1)
            self.down = nn.ModuleList()
            self.downsamplers = nn.ModuleList()
            cin = widths[0]
            for i, w in enumerate(widths):
                self.down.append(_Stage(cin, w, text_dim, time_dim, heads))
                if i < len(widths) - 1:
                    self.downsamplers.append(nn.Conv2d(w, w, 3, stride=2, padding=1))
                cin = w
            self.up = nn.ModuleList()
            self.upsamplers = nn.ModuleList()
            for i in reversed(range(len(widths))):
                # The deepest decoder stage continues from the encoder output directly.
                skip = widths[i] if i < len(widths) - 1 else 0
                self.up.append(_Stage(cin + skip, widths[i], text_dim, time_dim, heads))
                cin = widths[i]
                if i > 0:
                    self.upsamplers.append(nn.Conv2d(cin, cin, 3, padding=1))
            self.out_norm = nn.GroupNorm(_groups(widths[0]), widths[0])
            self.out = nn.Conv2d(widths[0], 3 * stem_stride ** 2, 3, padding=1)

    @property
    def tap_channels(self) -> list[int]:
        return self.widths + self.widths[::-1]

    def forward(self, x_t: Tensor, t: Tensor | int, text: Tensor,
                text_padding: Tensor | None = None) -> tuple[Tensor, list[Tensor]]:
        b, _, h, w = x_t.shape
        if h % self.downsample_factor or w % self.downsample_factor:
            raise ValueError(f"input size {h}x{w} not divisible by {self.downsample_factor}")
        if not torch.is_tensor(t):
            t = torch.full((b,), float(t), dtype=x_t.dtype, device=x_t.device)
        temb = self.time_mlp(timestep_embedding(t.to(x_t.dtype), self.time_dim))
        x = self.stem(x_t)
        taps: list[Tensor] = []
        skips: list[Tensor] = []
        for i, stage in enumerate(self.down):
            x = stage(x, temb, text, text_padding)
            taps.append(x)
            skips.append(x)
            if i < len(self.downsamplers):
                x = self.downsamplers[i](x)
        skips.pop()
        for j, stage in enumerate(self.up):
            if j > 0:
                x = torch.cat([x, skips.pop()], dim=1)
            x = stage(x, temb, text, text_padding)
            taps.append(x)
            if j < len(self.upsamplers):
                x = self.upsamplers[j](F.interpolate(x, scale_factor=2.0, mode="nearest"))
        eps = self.out(F.silu(self.out_norm(x)))
        if self.stem_stride > 1:
            eps = F.pixel_shuffle(eps, self.stem_stride)
        return eps, taps


@dataclass
class FeaturePyramid:
    levels: list[Tensor]  # each (B, C, h, w), ordered as the configured strides
    strides: tuple[int, ...]
    source_timesteps: tuple[int, ...]

    @property
    def channels(self) -> list[int]:
        return [lvl.shape[1] for lvl in self.levels]


class PyramidProjection(nn.Module):
    """Fixed 1x1 projections from tap widths to the pyramid channel width.

    Weights are seeded and frozen; every projection is square or widening,
    so no information from the tap is discarded.
    """

    def __init__(self, tap_channels: Sequence[int], channels: int, seed: int = 1004):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.proj = nn.ModuleList(nn.Conv2d(c, channels, 1) for c in tap_channels)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, i: int, x: Tensor) -> Tensor:
        return self.proj[i](x)


def build_feature_pyramid(taps: Sequence[Sequence[Tensor]], spec: TimeStepSpec, image_size: tuple[int, int],
                          tap_indices: Sequence[int], strides: Sequence[int],
                          projection: PyramidProjection) -> FeaturePyramid:
    """Select taps, resize bilinearly to each stride grid, project, and
    concatenate across timesteps along channels.

    ``taps`` holds one activation list per timestep in ``spec``.
    """
    if len(taps) != len(spec) or any(len(t) == 0 for t in taps):
        raise ValueError("need one non-empty activation list per time step")
    h, w = image_size
    levels = []
    for j, (idx, stride) in enumerate(zip(tap_indices, strides)):
        size = (math.ceil(h / stride), math.ceil(w / stride))
        per_step = []
        for step_taps in taps:
            x = step_taps[idx]
            if tuple(x.shape[-2:]) != size:
                x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
            per_step.append(projection(j, x))
        levels.append(torch.cat(per_step, dim=1) if len(per_step) > 1 else per_step[0])
    return FeaturePyramid(levels=levels, strides=tuple(strides), source_timesteps=spec.steps)


def sample_noise(shape: Sequence[int], seed: int, dtype: torch.dtype = torch.float32) -> Tensor:
    gen = torch.Generator().manual_seed(int(seed))
    return torch.randn(*shape, generator=gen, dtype=dtype)


def extract_features(unet: ToyUNet, projection: PyramidProjection, schedule: NoiseSchedule, x: Tensor,
                     text: Tensor, spec: TimeStepSpec, eps_seed: int, tap_indices: Sequence[int],
                     strides: Sequence[int], text_padding: Tensor | None = None) -> FeaturePyramid:
    """One UNet forward pass per time step; no iterative denoising.

    ``x`` is a (B, 3, H, W) image batch in [0, 1]; it is mapped to [-1, 1]
    before noising.
    """
    x = x * 2 - 1
    taps = []
    for i, t in enumerate(spec.steps):
        if alpha_bar(schedule, t) == 1.0:
            x_t = x
        else:
            eps = sample_noise(x.shape, eps_seed * 1009 + i, x.dtype).to(x.device)
            x_t = add_noise(x, t, eps, schedule)
        _, step_taps = unet(x_t, t, text, text_padding)
        taps.append(step_taps)
    return build_feature_pyramid(taps, spec, tuple(x.shape[-2:]), tap_indices, strides, projection)
