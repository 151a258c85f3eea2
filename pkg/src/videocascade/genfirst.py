"""Level-1 generator: latent (+ class) -> low-resolution, temporally
subsampled video.

Units stack a ConvGRU with two 2D residual blocks; every unit except the
last doubles the spatial resolution in its first 2D block, taking the
4x4 seed to seed_hw * 2^(U-1). A final norm-relu-conv-tanh head maps to
RGB in (-1, 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError
from .nncore import (
    ConvGRU,
    GenResBlock2d,
    PerFrameCondBatchNorm,
    SNConv2d,
    SNLinear,
    init_module_orthogonal,
)

SEED_CHANNEL_MULT = 8  # seed tensor has 8*ch channels


@dataclass
class FirstLevelConfig:
    ch: int = 32
    multipliers: tuple = (4, 2)
    t1: int = 8
    seed_hw: int = 4
    d_z: int = 32
    num_classes: int | None = None
    d_y: int = 16

    def __post_init__(self):
        self.multipliers = tuple(int(m) for m in self.multipliers)
        if not self.multipliers:
            raise ConfigError("multipliers must be nonempty")
        if self.t1 < 1 or self.ch < 1 or self.seed_hw < 1 or self.d_z < 1:
            raise ConfigError("ch, t1, seed_hw and d_z must be positive")

    @property
    def conditional(self) -> bool:
        return self.num_classes is not None

    @property
    def cond_dim(self) -> int:
        return self.d_z + (self.d_y if self.conditional else 0)

    @property
    def output_hw(self) -> int:
        return self.seed_hw * 2 ** (len(self.multipliers) - 1)


class FirstLevelGenerator(nn.Module):
    def __init__(self, config: FirstLevelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        ch = config.ch
        self.embed = None
        if config.conditional:
            self.embed = nn.Embedding(config.num_classes, config.d_y)
        self.seed_linear = SNLinear(
            config.cond_dim, SEED_CHANNEL_MULT * ch * config.seed_hw * config.seed_hw
        )
        units = []
        in_ch = SEED_CHANNEL_MULT * ch
        last = len(config.multipliers) - 1
        for u, mult in enumerate(config.multipliers):
            hid = ch * mult
            units.append(
                nn.ModuleDict(
                    {
                        "gru": ConvGRU(in_ch, hid),
                        "block_a": GenResBlock2d(hid, hid, config.cond_dim, upsample=(u < last)),
                        "block_b": GenResBlock2d(hid, hid, config.cond_dim),
                    }
                )
            )
            in_ch = hid
        self.units = nn.ModuleList(units)
        self.head_bn = PerFrameCondBatchNorm(in_ch, config.cond_dim)
        self.head_conv = SNConv2d(in_ch, 3, 3, padding=1)
        init_module_orthogonal(self, seed)

    def condition(self, z: torch.Tensor, y: torch.Tensor | None) -> torch.Tensor:
        if self.config.conditional:
            if y is None:
                raise ValueError("class-conditional model needs labels")
            if y.min() < 0 or y.max() >= self.config.num_classes:
                raise ValueError(f"label out of range [0, {self.config.num_classes})")
            return torch.cat([z, self.embed(y)], dim=1)
        if y is not None:
            raise ValueError("unconditional model got labels")
        return z

    def seed_latent(self, z: torch.Tensor, y: torch.Tensor | None, t: int | None = None) -> torch.Tensor:
        """(B, d_z) noise -> (B, T, 8*ch, seed_hw, seed_hw), identical frames."""
        t = t or self.config.t1
        cond = self.condition(z, y)
        s = self.seed_linear(cond)
        b = z.shape[0]
        s = s.reshape(b, SEED_CHANNEL_MULT * self.config.ch, self.config.seed_hw, self.config.seed_hw)
        return s[:, None].expand(-1, t, -1, -1, -1).contiguous()

    def forward(self, z: torch.Tensor, y: torch.Tensor | None = None, t: int | None = None) -> torch.Tensor:
        """Generate (B, T, 3, H, W) videos with values in (-1, 1)."""
        cond = self.condition(z, y)
        h = self.seed_latent(z, y, t)
        for unit in self.units:
            h = unit["gru"](h)
            h = unit["block_a"](h, cond)
            h = unit["block_b"](h, cond)
        h = F.relu(self.head_bn(h, cond))
        b, tt, c, hh, ww = h.shape
        out = self.head_conv(h.reshape(b * tt, c, hh, ww)).reshape(b, tt, 3, hh, ww)
        return torch.tanh(out)
