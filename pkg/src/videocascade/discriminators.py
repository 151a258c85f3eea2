"""The three discriminators and score assembly.

Every level uses a spatial discriminator (scores k randomly sampled
full-resolution frames individually) and a temporal discriminator (scores
spatially halved full-length clips). Upscaling levels add a matching
discriminator over (output, input) pairs: the output is reduced back to
the input geometry and concatenated on the channel axis, so the head can
tell valid upsamplings from mismatched pairs. All scores are concatenated
into one flat array before the hinge loss; no head contains normalization
layers and every weight is spectrally normalized.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import AlignmentError, ConfigError, DimensionError
from .nncore import (
    DiscResBlock2d,
    DiscResBlock3d,
    SNEmbedding,
    SNLinear,
    downsample_spatial_t,
    fold_time,
    init_module_orthogonal,
    subsample_temporal_t,
    unfold_time,
)

MIN_FEATURE_HW = 4  # blocks stop downsampling at this resolution


@dataclass
class DiscConfig:
    ch: int = 32
    multipliers: tuple = (1, 2, 4)
    k_frames: int = 8
    spatial_ds_factor: int = 2
    num_classes: int | None = None

    def __post_init__(self):
        self.multipliers = tuple(int(m) for m in self.multipliers)
        if not self.multipliers:
            raise ConfigError("multipliers must be nonempty")
        if self.k_frames < 1 or self.spatial_ds_factor < 1:
            raise ConfigError("k_frames and spatial_ds_factor must be positive")

    @property
    def conditional(self) -> bool:
        return self.num_classes is not None


def _downsample_flags(input_hw: int, n_blocks: int) -> list:
    flags = []
    hw = input_hw
    for _ in range(n_blocks):
        ds = hw >= 2 * MIN_FEATURE_HW
        flags.append(ds)
        if ds:
            hw //= 2
    return flags


class _ProjectionHead(nn.Module):
    """Sum-pool features, score with a linear map, and (when conditional)
    add the inner product with a learned class embedding."""

    def __init__(self, channels: int, num_classes: int | None):
        super().__init__()
        self.linear = SNLinear(channels, 1)
        self.embed = SNEmbedding(num_classes, channels) if num_classes else None

    def forward(self, pooled: torch.Tensor, y: torch.Tensor | None) -> torch.Tensor:
        score = self.linear(pooled)
        if self.embed is not None:
            if y is None:
                raise ValueError("class-conditional discriminator needs labels")
            score = score + (self.embed(y) * pooled).sum(dim=1, keepdim=True)
        return score


class SpatialDiscriminator(nn.Module):
    """Scores k sampled frames independently through a 2D stack."""

    def __init__(self, config: DiscConfig, input_hw: int, in_channels: int = 3, seed: int = 0):
        super().__init__()
        self.config = config
        flags = _downsample_flags(input_hw, len(config.multipliers))
        blocks, in_ch = [], in_channels
        for mult, ds in zip(config.multipliers, flags):
            blocks.append(DiscResBlock2d(in_ch, config.ch * mult, downsample=ds))
            in_ch = config.ch * mult
        self.blocks = nn.ModuleList(blocks)
        self.head = _ProjectionHead(in_ch, config.num_classes)
        init_module_orthogonal(self, seed)

    def sample_frame_indices(self, t: int, generator: torch.Generator | None = None) -> torch.Tensor:
        k = self.config.k_frames
        if t < k:
            raise ValueError(f"need at least {k} frames, got {t}")
        if self.training:
            return torch.randperm(t, generator=generator)[:k]
        return torch.linspace(0, t - 1, k).round().long()

    def forward(self, v: torch.Tensor, y: torch.Tensor | None = None,
                generator: torch.Generator | None = None) -> torch.Tensor:
        b, t = v.shape[:2]
        k = self.config.k_frames
        frames = []
        for i in range(b):
            idx = self.sample_frame_indices(t, generator)
            frames.append(v[i, idx])
        h = torch.cat(frames, dim=0)  # (B*k, C, H, W)
        for block in self.blocks:
            h = block(h)
        pooled = F.relu(h).sum(dim=(2, 3))
        y_rep = None if y is None else y.repeat_interleave(k)
        return self.head(pooled, y_rep)


class TemporalDiscriminator(nn.Module):
    """Scores full-length clips: bilinear spatial stem reduction, two 3D
    blocks, then 2D blocks framewise, one score per clip."""

    def __init__(self, config: DiscConfig, input_hw: int, in_channels: int = 3,
                 stem_downsample: bool = True, seed: int = 0):
        super().__init__()
        self.config = config
        self.stem_downsample = stem_downsample
        hw = input_hw // config.spatial_ds_factor if stem_downsample else input_hw
        flags = _downsample_flags(hw, len(config.multipliers))
        blocks, in_ch = [], in_channels
        for i, (mult, ds) in enumerate(zip(config.multipliers, flags)):
            cls = DiscResBlock3d if i < 2 else DiscResBlock2d
            blocks.append(cls(in_ch, config.ch * mult, downsample=ds))
            in_ch = config.ch * mult
        self.blocks = nn.ModuleList(blocks)
        self.head = _ProjectionHead(in_ch, config.num_classes)
        init_module_orthogonal(self, seed)

    def forward(self, v: torch.Tensor, y: torch.Tensor | None = None) -> torch.Tensor:
        b = v.shape[0]
        h = v
        if self.stem_downsample:
            k = self.config.spatial_ds_factor
            if h.shape[-2] % k or h.shape[-1] % k:
                raise DimensionError(
                    f"spatial extent {tuple(h.shape[-2:])} not divisible by {k}"
                )
            h = downsample_spatial_t(h, k)
        for block in self.blocks:
            if isinstance(block, DiscResBlock3d):
                h = block(h)
            else:
                h = unfold_time(block(fold_time(h)), b)
        pooled = F.relu(h).sum(dim=(1, 3, 4))
        return self.head(pooled, y)


def matching_pair(x_out: torch.Tensor, x_in: torch.Tensor, k_t: int, k_s: int) -> torch.Tensor:
    """Reduce x_out by (k_t, k_s) back to x_in's geometry and concatenate on
    the channel axis -> (B, T_in, 6, H_in, W_in)."""
    b, t_in, c, h_in, w_in = x_in.shape
    if x_out.shape[0] != b or x_out.shape[1] != k_t * t_in:
        raise AlignmentError(
            f"output has {tuple(x_out.shape[:2])}, expected ({b}, {k_t * t_in})"
        )
    if x_out.shape[-2] != k_s * h_in or x_out.shape[-1] != k_s * w_in:
        raise AlignmentError(
            f"output spatial {tuple(x_out.shape[-2:])}, expected {(k_s * h_in, k_s * w_in)}"
        )
    reduced = downsample_spatial_t(subsample_temporal_t(x_out, k_t), k_s)
    return torch.cat([reduced, x_in], dim=2)


def assemble_scores(level: int, parts: list, matching: bool = True) -> torch.Tensor:
    """Flat concatenation of per-head score arrays, in (spatial, temporal[,
    matching]) order, ready for the hinge losses."""
    expected = 2 if (level == 1 or not matching) else 3
    if len(parts) != expected:
        raise ValueError(f"level {level} expects {expected} score parts, got {len(parts)}")
    return torch.cat([p.reshape(-1) for p in parts])


class LevelDiscriminator(nn.Module):
    """The discriminator set for one cascade level."""

    def __init__(self, config: DiscConfig, level: int, video_hw: int,
                 k_t: int = 1, k_s: int = 1, matching: bool = True, seed: int = 0):
        super().__init__()
        if level < 1:
            raise ConfigError("level must be >= 1")
        self.level = level
        self.k_t, self.k_s = k_t, k_s
        self.spatial = SpatialDiscriminator(config, video_hw, seed=seed)
        self.temporal = TemporalDiscriminator(config, video_hw, seed=seed + 1)
        self.matching = None
        if level > 1 and matching:
            self.matching = TemporalDiscriminator(
                config, video_hw // k_s, in_channels=6, stem_downsample=False, seed=seed + 2
            )

    def forward(self, v: torch.Tensor, y: torch.Tensor | None = None,
                low: torch.Tensor | None = None,
                generator: torch.Generator | None = None) -> torch.Tensor:
        parts = [self.spatial(v, y, generator), self.temporal(v, y)]
        if self.matching is not None:
            if low is None:
                raise ValueError("matching discriminator needs the conditioning clip")
            parts.append(self.matching(matching_pair(v, low, self.k_t, self.k_s), y))
        return assemble_scores(self.level, parts, matching=self.matching is not None)
