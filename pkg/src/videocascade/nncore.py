"""Shared neural building blocks.

All convolutions use 3x3 (2D) or 3x3x3-factored (3D) kernels with padding 1
and stride 1, so spatial and temporal extents are preserved. Block modules
take video features laid out as (B, T, C, H, W); 3D convolution wrappers
permute internally to torch's (B, C, T, H, W).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import DimensionError, StateError
from .videodata import bilinear_weights

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


# ---------------------------------------------------------------------------
# Initialization


def orthogonal_init(rows: int, cols: int, seed: int) -> np.ndarray:
    """Semi-orthogonal (rows, cols) float32 matrix: W^T W = I when cols <= rows,
    W W^T = I when rows <= cols. Deterministic per seed."""
    return _orthogonal(rows, cols, np.random.default_rng(seed))


def _orthogonal(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    if rows < 1 or cols < 1:
        raise ValueError("matrix dimensions must be >= 1")
    big, small = max(rows, cols), min(rows, cols)
    a = rng.standard_normal((big, small))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))[None, :]
    w = q if rows >= cols else q.T
    return np.ascontiguousarray(w, dtype=np.float32)


def init_module_orthogonal(module: nn.Module, seed: int) -> None:
    """Orthogonally initialize every weight in `module` (conv kernels via
    their (out_channels, rest) flattening), zero all biases.

    Modules flagged with `skip_orthogonal_init` keep their own init
    (conditional batch-norm projections start at gain=1/bias=0).
    """
    rng = np.random.default_rng(seed)
    skipped = set()
    for name, sub in module.named_modules():
        if getattr(sub, "skip_orthogonal_init", False):
            skipped.update(id(p) for p in sub.parameters(recurse=True))
    for name, p in module.named_parameters():
        if id(p) in skipped:
            continue
        with torch.no_grad():
            if p.ndim >= 2:
                rows, cols = p.shape[0], p[0].numel()
                w = _orthogonal(rows, cols, rng).reshape(p.shape)
                p.copy_(torch.from_numpy(w))
            else:
                p.zero_()
    # power-iteration vectors come from the same seeded stream so that model
    # construction is fully deterministic per seed
    for name, sub in module.named_modules():
        if isinstance(sub, _SpectralNormMixin):
            u = rng.standard_normal(sub.weight_u.shape[0])
            u /= np.linalg.norm(u)
            with torch.no_grad():
                sub.weight_u.copy_(torch.from_numpy(u))


# ---------------------------------------------------------------------------
# Spectral normalization


@dataclass
class SpectralState:
    """Power-iteration state: the left singular vector estimate."""

    u: torch.Tensor
    degenerate: bool = False


def spectral_normalize(
    weight: torch.Tensor, state: SpectralState, power_iters: int = 1, eps: float = 1e-12
) -> tuple[torch.Tensor, SpectralState]:
    """Divide `weight` (flattened to out_features x rest) by the power-iteration
    estimate of its largest singular value.

    A zero matrix is returned unchanged with a degenerate state flag.
    """
    w = weight.reshape(weight.shape[0], -1)
    u = state.u.to(w.dtype)
    with torch.no_grad():
        v = None
        for _ in range(max(power_iters, 1)):
            v = F.normalize(w.t() @ u, dim=0, eps=eps)
            u = F.normalize(w @ v, dim=0, eps=eps)
    sigma = torch.dot(u, w @ v)
    if not torch.isfinite(sigma) or sigma <= eps:
        return weight, SpectralState(state.u, degenerate=True)
    return weight / sigma, SpectralState(u.detach(), degenerate=False)


class _SpectralNormMixin:
    """Adds power-iteration spectral normalization to a module's `weight`.

    The u vector updates only in training mode (power_iters steps per
    forward); eval mode normalizes with the stored u, so frozen modules are
    deterministic and never mutate state.
    """

    def _init_spectral(self, power_iters: int = 1):
        self.power_iters = power_iters
        u = torch.randn(self.weight.shape[0])
        self.register_buffer("weight_u", F.normalize(u, dim=0))

    def normalized_weight(self) -> torch.Tensor:
        iters = self.power_iters if self.training else 0
        state = SpectralState(self.weight_u)
        if iters > 0:
            w_norm, new_state = spectral_normalize(self.weight, state, iters)
            if not new_state.degenerate:
                self.weight_u.copy_(new_state.u)
            return w_norm
        # eval: one v-solve from the stored u, no state update
        w = self.weight.reshape(self.weight.shape[0], -1)
        u = self.weight_u.to(w.dtype)
        with torch.no_grad():
            v = F.normalize(w.t() @ u, dim=0, eps=1e-12)
        sigma = torch.dot(u, w @ v)
        if not torch.isfinite(sigma) or sigma <= 1e-12:
            return self.weight
        return self.weight / sigma


class SNConv2d(_SpectralNormMixin, nn.Conv2d):
    def __init__(self, *args, power_iters: int = 1, **kwargs):
        super().__init__(*args, **kwargs)
        self._init_spectral(power_iters)

    def forward(self, x):
        return self._conv_forward(x, self.normalized_weight(), self.bias)


class SNConv3d(_SpectralNormMixin, nn.Conv3d):
    def __init__(self, *args, power_iters: int = 1, **kwargs):
        super().__init__(*args, **kwargs)
        self._init_spectral(power_iters)

    def forward(self, x):
        return self._conv_forward(x, self.normalized_weight(), self.bias)


class SNLinear(_SpectralNormMixin, nn.Linear):
    def __init__(self, *args, power_iters: int = 1, **kwargs):
        super().__init__(*args, **kwargs)
        self._init_spectral(power_iters)

    def forward(self, x):
        return F.linear(x, self.normalized_weight(), self.bias)


class SNEmbedding(_SpectralNormMixin, nn.Embedding):
    def __init__(self, *args, power_iters: int = 1, **kwargs):
        super().__init__(*args, **kwargs)
        self._init_spectral(power_iters)

    def forward(self, x):
        return F.embedding(x, self.normalized_weight())


# ---------------------------------------------------------------------------
# Per-frame conditional batch normalization


class PerFrameCondBatchNorm(nn.Module):
    """Batch normalization with statistics per (frame index, channel),
    followed by a condition-dependent affine map.

    gain = 1 + W_g cond and bias = W_b cond with zero-initialized maps, so
    freshly built layers normalize without rescaling. Running statistics are
    kept per frame index; their length follows the sequence length seen in
    training mode, which is how test-time statistics are recomputed for
    unrolled sequence lengths.
    """

    skip_orthogonal_init = True

    def __init__(self, num_features: int, cond_dim: int, eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
        super().__init__()
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.gain = nn.Linear(cond_dim, num_features)
        self.bias = nn.Linear(cond_dim, num_features)
        for lin in (self.gain, self.bias):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)
        self.register_buffer("running_mean", torch.zeros(0, num_features))
        self.register_buffer("running_var", torch.ones(0, num_features))
        self.register_buffer("num_batches_tracked", torch.tensor(0, dtype=torch.long))

    @property
    def stats_frames(self) -> int:
        return self.running_mean.shape[0]

    def reset_stats(self, num_frames: int) -> None:
        dev = self.running_mean.device
        self.running_mean = torch.zeros(num_frames, self.num_features, device=dev)
        self.running_var = torch.ones(num_frames, self.num_features, device=dev)
        self.num_batches_tracked = torch.tensor(0, dtype=torch.long, device=dev)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        if x.ndim != 5:
            raise DimensionError(f"expected (B, T, C, H, W), got {tuple(x.shape)}")
        b, t, c, h, w = x.shape
        if c != self.num_features:
            raise DimensionError(f"got {c} channels, layer has {self.num_features}")
        if self.training:
            mean = x.mean(dim=(0, 3, 4))
            var = x.var(dim=(0, 3, 4), unbiased=False)
            with torch.no_grad():
                if self.stats_frames != t:
                    self.reset_stats(t)
                m = self.momentum
                self.running_mean.mul_(1 - m).add_(mean.to(self.running_mean.dtype), alpha=m)
                self.running_var.mul_(1 - m).add_(var.to(self.running_var.dtype), alpha=m)
                self.num_batches_tracked += 1
        else:
            if self.num_batches_tracked.item() == 0:
                raise StateError("eval before any running statistics were accumulated")
            if t > self.stats_frames:
                raise StateError(
                    f"running statistics cover {self.stats_frames} frames, input has {t}"
                )
            # shorter inputs reuse the leading per-frame entries
            mean = self.running_mean[:t].to(x.dtype)
            var = self.running_var[:t].to(x.dtype)
        x_hat = (x - mean[None, :, :, None, None]) / torch.sqrt(var[None, :, :, None, None] + self.eps)
        gain = 1.0 + self.gain(cond)
        bias = self.bias(cond)
        return x_hat * gain[:, None, :, None, None] + bias[:, None, :, None, None]


# ---------------------------------------------------------------------------
# Recurrent / 3D convolution layers


class ConvGRU(nn.Module):
    """Convolutional GRU over (B, T, C, H, W) sequences with a ReLU candidate
    activation; gates are 3x3 spectrally normalized convolutions on the
    [h; x] channel concatenation."""

    def __init__(self, in_channels: int, hidden_channels: int):
        super().__init__()
        self.in_channels = in_channels
        self.hidden_channels = hidden_channels
        cat = in_channels + hidden_channels
        self.conv_z = SNConv2d(cat, hidden_channels, 3, padding=1)
        self.conv_r = SNConv2d(cat, hidden_channels, 3, padding=1)
        self.conv_h = SNConv2d(cat, hidden_channels, 3, padding=1)

    def step(self, h: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        if h.shape[-2:] != x.shape[-2:]:
            raise DimensionError(f"state {tuple(h.shape)} vs input {tuple(x.shape)}")
        hx = torch.cat([h, x], dim=1)
        z = torch.sigmoid(self.conv_z(hx))
        r = torch.sigmoid(self.conv_r(hx))
        h_tilde = F.relu(self.conv_h(torch.cat([r * h, x], dim=1)))
        return (1 - z) * h + z * h_tilde

    def forward(self, x: torch.Tensor, h0: torch.Tensor | None = None) -> torch.Tensor:
        b, t, _, hh, ww = x.shape
        h = h0
        if h is None:
            h = x.new_zeros(b, self.hidden_channels, hh, ww)
        outs = []
        for i in range(t):
            h = self.step(h, x[:, i])
            outs.append(h)
        return torch.stack(outs, dim=1)


class SeparableConv3d(nn.Module):
    """Size-3 temporal convolution followed by a 3x3 spatial convolution,
    both padded to preserve extents."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv_t = SNConv3d(in_channels, out_channels, (3, 1, 1), padding=(1, 0, 0))
        self.conv_s = SNConv3d(out_channels, out_channels, (1, 3, 3), padding=(0, 1, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = x.permute(0, 2, 1, 3, 4)
        y = self.conv_s(self.conv_t(y))
        return y.permute(0, 2, 1, 3, 4)


# ---------------------------------------------------------------------------
# Residual blocks


def fold_time(x: torch.Tensor) -> torch.Tensor:
    b, t, c, h, w = x.shape
    return x.reshape(b * t, c, h, w)


def unfold_time(x: torch.Tensor, b: int) -> torch.Tensor:
    bt, c, h, w = x.shape
    return x.reshape(b, bt // b, c, h, w)


class GenResBlock2d(nn.Module):
    """Generator block: norm-act-conv-norm-act-conv with conditional batch
    norm, optional x2 nearest-neighbor upsampling after the first norm-act.
    Frames are processed independently by folding T into the batch."""

    def __init__(self, in_channels: int, out_channels: int, cond_dim: int, upsample: bool = False):
        super().__init__()
        self.upsample = upsample
        self.bn1 = PerFrameCondBatchNorm(in_channels, cond_dim)
        self.conv1 = SNConv2d(in_channels, out_channels, 3, padding=1)
        self.bn2 = PerFrameCondBatchNorm(out_channels, cond_dim)
        self.conv2 = SNConv2d(out_channels, out_channels, 3, padding=1)
        self.conv_sc = None
        if in_channels != out_channels or upsample:
            self.conv_sc = SNConv2d(in_channels, out_channels, 1)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        b = x.shape[0]
        h = F.relu(self.bn1(x, cond))
        h = fold_time(h)
        if self.upsample:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.conv1(h)
        h = unfold_time(h, b)
        h = F.relu(self.bn2(h, cond))
        h = self.conv2(fold_time(h))

        sc = fold_time(x)
        if self.upsample:
            sc = F.interpolate(sc, scale_factor=2, mode="nearest")
        if self.conv_sc is not None:
            sc = self.conv_sc(sc)
        return unfold_time(sc + h, b)


class GenResBlock3d(nn.Module):
    """Generator 3D block: norm-act-conv-norm-act-conv with separable 3D
    convolutions. No resampling; extents are preserved."""

    def __init__(self, in_channels: int, out_channels: int, cond_dim: int):
        super().__init__()
        self.bn1 = PerFrameCondBatchNorm(in_channels, cond_dim)
        self.conv1 = SeparableConv3d(in_channels, out_channels)
        self.bn2 = PerFrameCondBatchNorm(out_channels, cond_dim)
        self.conv2 = SeparableConv3d(out_channels, out_channels)
        self.conv_sc = None
        if in_channels != out_channels:
            self.conv_sc = SNConv2d(in_channels, out_channels, 1)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        b = x.shape[0]
        h = F.relu(self.bn1(x, cond))
        h = self.conv1(h)
        h = F.relu(self.bn2(h, cond))
        h = self.conv2(h)
        sc = x
        if self.conv_sc is not None:
            sc = unfold_time(self.conv_sc(fold_time(x)), b)
        return sc + h


class DiscResBlock2d(nn.Module):
    """Discriminator block: relu-conv-relu-conv, no normalization, optional
    x2 average-pool downsampling after the last conv. Operates on plain
    (N, C, H, W) frames."""

    def __init__(self, in_channels: int, out_channels: int, downsample: bool = False):
        super().__init__()
        self.downsample = downsample
        self.conv1 = SNConv2d(in_channels, out_channels, 3, padding=1)
        self.conv2 = SNConv2d(out_channels, out_channels, 3, padding=1)
        self.conv_sc = None
        if in_channels != out_channels or downsample:
            self.conv_sc = SNConv2d(in_channels, out_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.relu(x))
        h = self.conv2(F.relu(h))
        if self.downsample:
            h = F.avg_pool2d(h, 2)
        sc = x if self.conv_sc is None else self.conv_sc(x)
        if self.downsample:
            sc = F.avg_pool2d(sc, 2)
        return sc + h


class DiscResBlock3d(nn.Module):
    """Discriminator 3D block with regular 3x3x3 convolutions; downsampling
    average-pools space only, the temporal extent is preserved. Takes
    (B, T, C, H, W)."""

    def __init__(self, in_channels: int, out_channels: int, downsample: bool = False):
        super().__init__()
        self.downsample = downsample
        self.conv1 = SNConv3d(in_channels, out_channels, 3, padding=1)
        self.conv2 = SNConv3d(out_channels, out_channels, 3, padding=1)
        self.conv_sc = None
        if in_channels != out_channels or downsample:
            self.conv_sc = SNConv3d(in_channels, out_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = x.permute(0, 2, 1, 3, 4)
        h = self.conv1(F.relu(y))
        h = self.conv2(F.relu(h))
        if self.downsample:
            h = F.avg_pool3d(h, (1, 2, 2))
        sc = y if self.conv_sc is None else self.conv_sc(y)
        if self.downsample:
            sc = F.avg_pool3d(sc, (1, 2, 2))
        return (sc + h).permute(0, 2, 1, 3, 4)


# ---------------------------------------------------------------------------
# Losses: hinge (training default) and the saturating log form of the
# two-player value function.


def hinge_d_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    """mean(max(0, 1 - real)) + mean(max(0, 1 + fake)) over all locations."""
    if real_scores.numel() == 0 or fake_scores.numel() == 0:
        raise ValueError("empty score array")
    return F.relu(1.0 - real_scores).mean() + F.relu(1.0 + fake_scores).mean()


def hinge_g_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    """-mean(fake) over all locations."""
    if fake_scores.numel() == 0:
        raise ValueError("empty score array")
    return -fake_scores.mean()


def log_d_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    """Negated saturating value function: -E log D(real) - E log(1 - D(fake)),
    with D = sigmoid of the score."""
    if real_scores.numel() == 0 or fake_scores.numel() == 0:
        raise ValueError("empty score array")
    return -F.logsigmoid(real_scores).mean() - F.logsigmoid(-fake_scores).mean()


def log_g_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    """Saturating generator objective: E log(1 - D(fake))."""
    if fake_scores.numel() == 0:
        raise ValueError("empty score array")
    return F.logsigmoid(-fake_scores).mean()


# ---------------------------------------------------------------------------
# Differentiable pyramid operators (torch mirrors of videodata)


def downsample_spatial_t(x: torch.Tensor, k: int) -> torch.Tensor:
    """Bilinear downsample of (..., H, W) by factor k, identical semantics to
    videodata.downsample_spatial."""
    if k == 1:
        return x
    h, w = x.shape[-2:]
    wh = torch.from_numpy(bilinear_weights(h, k)).to(x.dtype).to(x.device)
    ww = torch.from_numpy(bilinear_weights(w, k)).to(x.dtype).to(x.device)
    y = torch.einsum("oh,...hw->...ow", wh, x)
    return torch.einsum("pw,...ow->...op", ww, y)


def subsample_temporal_t(x: torch.Tensor, k: int) -> torch.Tensor:
    """Keep frames 0, k, 2k, ... of a (B, T, ...) tensor."""
    if k == 1:
        return x
    if x.shape[1] % k != 0:
        raise DimensionError(f"frame count {x.shape[1]} not divisible by {k}")
    return x[:, ::k]


def temporal_interpolate_nn_t(x: torch.Tensor, k: int) -> torch.Tensor:
    """Repeat each frame k times along dim 1."""
    if k == 1:
        return x
    return torch.repeat_interleave(x, k, dim=1)
