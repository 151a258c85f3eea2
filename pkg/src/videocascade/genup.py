"""Conditional upsampling generator: low-resolution clip + noise (+ class)
-> spatially upscaled, temporally interpolated clip.

The input clip is nearest-neighbor interpolated in time, concatenated
channelwise with a spatially constant noise map and passed through a 1x1
stem. Units stack a temporal layer (a separable-3D residual block or a
ConvGRU) with two 2D residual blocks; the last log2(K_S) units double the
resolution, so most of the network runs at input resolution where the
low-resolution clip is re-injected after every unit through 1x1-mapped
nearest-neighbor resizes. Feature maps larger than the input resolution
get no such residual connection. The network has no length-dependent
weights, so it unrolls over inputs of any length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DimensionError
from .nncore import (
    ConvGRU,
    GenResBlock2d,
    GenResBlock3d,
    PerFrameCondBatchNorm,
    SNConv2d,
    fold_time,
    init_module_orthogonal,
    temporal_interpolate_nn_t,
    unfold_time,
)
from .videodata import VideoBatch

RECURRENT_KINDS = ("convgru", "separable3d")


@dataclass
class UpLevelConfig:
    ch: int = 16
    multipliers: tuple = (4, 2, 1)
    d_z: int = 32
    num_classes: int | None = None
    d_y: int = 16
    k_t: int = 2
    k_s: int = 4
    window_w: int = 4
    recurrent_kind: str = "separable3d"

    def __post_init__(self):
        self.multipliers = tuple(int(m) for m in self.multipliers)
        if not self.multipliers:
            raise ConfigError("multipliers must be nonempty")
        if self.recurrent_kind not in RECURRENT_KINDS:
            raise ConfigError(f"recurrent_kind must be one of {RECURRENT_KINDS}")
        if self.k_t < 1 or self.k_s < 1 or self.window_w < 1:
            raise ConfigError("k_t, k_s and window_w must be positive")
        n_up = math.log2(self.k_s)
        if n_up != int(n_up):
            raise ConfigError(f"k_s must be a power of two, got {self.k_s}")
        if int(n_up) > len(self.multipliers):
            raise ConfigError(
                f"{len(self.multipliers)} units cannot realize spatial factor {self.k_s}"
            )

    @property
    def conditional(self) -> bool:
        return self.num_classes is not None

    @property
    def cond_dim(self) -> int:
        return self.d_z + (self.d_y if self.conditional else 0)

    @property
    def num_upsampling_units(self) -> int:
        return int(math.log2(self.k_s))


def temporal_interpolate_nn(v: VideoBatch, k_t: int) -> VideoBatch:
    """Repeat each frame k_t times in order."""
    if k_t == 1:
        return v
    data = v.data.repeat(k_t, axis=1)
    return VideoBatch(data, v.labels, max(v.subsample // k_t, 1))


class UpLevelGenerator(nn.Module):
    def __init__(self, config: UpLevelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        ch = config.ch
        self.embed = None
        if config.conditional:
            self.embed = nn.Embedding(config.num_classes, config.d_y)
        self.stem_conv = SNConv2d(3 + config.d_z, ch * config.multipliers[0], 1)
        units = []
        in_ch = ch * config.multipliers[0]
        n_units = len(config.multipliers)
        first_up = n_units - config.num_upsampling_units
        for u, mult in enumerate(config.multipliers):
            out_ch = ch * mult
            if config.recurrent_kind == "separable3d":
                temporal = GenResBlock3d(in_ch, out_ch, config.cond_dim)
            else:
                temporal = ConvGRU(in_ch, out_ch)
            units.append(
                nn.ModuleDict(
                    {
                        "temporal": temporal,
                        "block_a": GenResBlock2d(out_ch, out_ch, config.cond_dim, upsample=(u >= first_up)),
                        "block_b": GenResBlock2d(out_ch, out_ch, config.cond_dim),
                        "ground": SNConv2d(3, out_ch, 1),
                    }
                )
            )
            in_ch = out_ch
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

    def forward(self, z: torch.Tensor, lowres: torch.Tensor, y: torch.Tensor | None = None) -> torch.Tensor:
        """Upscale (B, T_in, 3, H, W) to (B, k_t*T_in, 3, k_s*H, k_s*W)."""
        if lowres.ndim != 5 or lowres.shape[2] != 3:
            raise DimensionError(f"expected (B, T, 3, H, W), got {tuple(lowres.shape)}")
        cfg = self.config
        cond = self.condition(z, y)
        b, _, _, h_in, w_in = lowres.shape
        low_i = temporal_interpolate_nn_t(lowres, cfg.k_t)
        t_out = low_i.shape[1]
        zmap = z[:, None, :, None, None].expand(b, t_out, cfg.d_z, h_in, w_in)
        h = torch.cat([low_i, zmap], dim=2)
        h = unfold_time(self.stem_conv(fold_time(h)), b)
        for unit in self.units:
            if isinstance(unit["temporal"], ConvGRU):
                h = unit["temporal"](h)
            else:
                h = unit["temporal"](h, cond)
            h = unit["block_a"](h, cond)
            h = unit["block_b"](h, cond)
            h = ground_residual(h, low_i, unit["ground"])
        h = F.relu(self.head_bn(h, cond))
        out = unfold_time(self.head_conv(fold_time(h)), b)
        return torch.tanh(out)


def ground_residual(features: torch.Tensor, lowres_interp: torch.Tensor, conv1x1: nn.Module) -> torch.Tensor:
    """Re-inject the conditioning clip: nearest-neighbor resize to the
    feature resolution, 1x1-map 3 -> C_f channels and add. Feature maps
    spatially larger than the clip are returned unchanged."""
    h_f, w_f = features.shape[-2:]
    h_low, w_low = lowres_interp.shape[-2:]
    if h_f > h_low or w_f > w_low:
        return features
    if features.shape[1] != lowres_interp.shape[1]:
        raise DimensionError(
            f"features cover {features.shape[1]} frames, clip {lowres_interp.shape[1]}"
        )
    b = features.shape[0]
    low = fold_time(lowres_interp)
    if (h_f, w_f) != (h_low, w_low):
        low = F.interpolate(low, size=(h_f, w_f), mode="nearest")
    return features + unfold_time(conv1x1(low), b)


def apply_convolutionally(
    model: UpLevelGenerator,
    lowres_full: torch.Tensor,
    z: torch.Tensor,
    y: torch.Tensor | None = None,
) -> torch.Tensor:
    """Run the generator once over a full-length input in eval mode; one z is
    broadcast over all windows. Normalization statistics must already cover
    k_t * T_full frames (see inference.recompute_bn_stats)."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            return model(z, lowres_full, y)
    finally:
        model.train(was_training)
