"""Evaluation: Inception Score, Fréchet distances over a small trainable
video feature network, radially averaged PSD-over-time profiles, grounding
error, per-class reports, and the activation-memory estimator.

The feature network is a 3D-conv classifier trained once on the synthetic
dataset and frozen; clip-level logits back the video Fréchet distance
(FVD) and Inception Score, penultimate pooled features of single frames
back the frame-level FID. Absolute comparability with external feature
networks is not claimed; all comparisons are like-vs-like under one
frozen feature map.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import AlignmentError
from .genfirst import FirstLevelConfig, SEED_CHANNEL_MULT
from .genup import UpLevelConfig
from .videodata import (
    DatasetManifest,
    VideoBatch,
    downsample_spatial,
    load_videos,
    subsample_temporal,
)


# ---------------------------------------------------------------------------
# Feature network


@dataclass
class FeatureNetConfig:
    channels: tuple = (16, 32, 64)
    d_f: int = 64
    num_classes: int = 8


class FeatureNet(nn.Module):
    """Small 3D-conv video classifier; global pooling makes it agnostic to
    clip length and resolution."""

    def __init__(self, config: FeatureNetConfig, seed: int = 0):
        super().__init__()
        self.config = config
        convs, in_ch = [], 3
        for ch in config.channels:
            convs.append(nn.Conv3d(in_ch, ch, 3, padding=1))
            in_ch = ch
        self.convs = nn.ModuleList(convs)
        self.fc = nn.Linear(in_ch, config.d_f)
        self.head = nn.Linear(config.d_f, config.num_classes)
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for p in self.parameters():
                if p.ndim >= 2:
                    p.normal_(0, (2.0 / p[0].numel()) ** 0.5, generator=g)
                else:
                    p.zero_()

    def forward(self, v: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, T, 3, H, W) -> (penultimate features (B, d_f), logits (B, K))."""
        h = v.permute(0, 2, 1, 3, 4)
        for conv in self.convs:
            h = F.relu(conv(h))
            if min(h.shape[-2:]) >= 8:
                h = F.avg_pool3d(h, (1, 2, 2))
        pooled = h.mean(dim=(2, 3, 4))
        feats = F.relu(self.fc(pooled))
        return feats, self.head(feats)

    def probs(self, v: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self(v)[1], dim=1)


def train_feature_net(
    manifest: DatasetManifest,
    config: FeatureNetConfig | None = None,
    iters: int = 300,
    batch_size: int = 16,
    lr: float = 2e-3,
    seed: int = 0,
) -> FeatureNet:
    """Fit the classifier on the labeled dataset and freeze it."""
    config = config or FeatureNetConfig(num_classes=manifest.num_classes)
    net = FeatureNet(config, seed=seed)
    data = load_videos(manifest)
    videos = torch.from_numpy(data.data)
    labels = torch.from_numpy(data.labels)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    net.train()
    for _ in range(iters):
        idx = rng.integers(0, len(data), size=batch_size)
        _, logits = net(videos[idx])
        loss = F.cross_entropy(logits, labels[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


def clip_features(net: FeatureNet, videos: VideoBatch | torch.Tensor, batch_size: int = 32):
    """Per-clip (penultimate features, logits) as numpy arrays."""
    t = videos if isinstance(videos, torch.Tensor) else torch.from_numpy(videos.data)
    feats, logits = [], []
    net.eval()
    with torch.no_grad():
        for i in range(0, t.shape[0], batch_size):
            f, l = net(t[i : i + batch_size])
            feats.append(f.numpy())
            logits.append(l.numpy())
    return np.concatenate(feats), np.concatenate(logits)


def frame_features(net: FeatureNet, videos: VideoBatch | torch.Tensor, batch_size: int = 64):
    """Penultimate features of every frame, fed as single-frame clips."""
    t = videos if isinstance(videos, torch.Tensor) else torch.from_numpy(videos.data)
    b, tt = t.shape[:2]
    frames = t.reshape(b * tt, 1, *t.shape[2:])
    feats, _ = clip_features(net, frames, batch_size=batch_size)
    return feats


# ---------------------------------------------------------------------------
# Score analytics


def inception_score(probs: np.ndarray) -> float:
    """exp of the mean KL between per-sample class distributions and their
    marginal, natural log."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] < 1:
        raise ValueError(f"expected (N, K) probabilities, got {probs.shape}")
    if np.any(probs < -1e-9):
        raise ValueError("negative probabilities")
    row_sums = probs.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-5):
        raise ValueError("rows must sum to 1")
    marginal = probs.mean(axis=0, keepdims=True)
    ratio = np.zeros_like(probs)
    pos = probs > 0
    ratio[pos] = probs[pos] * (np.log(probs[pos]) - np.log(marginal.repeat(len(probs), 0)[pos]))
    return float(np.exp(ratio.sum(axis=1).mean()))


def _sqrt_psd(mat: np.ndarray, clamp: float = 1e-8) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    vals = np.where(vals < clamp, 0.0, vals)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}) with unbiased
    covariances; the cross term uses a symmetric eigendecomposition square
    root with small negative eigenvalues clamped to zero."""
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"feature shapes {a.shape} / {b.shape} incompatible")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("need at least 2 samples per side for covariances")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.cov(a, rowvar=False)
    cov_b = np.cov(b, rowvar=False)
    cov_a = np.atleast_2d(cov_a)
    cov_b = np.atleast_2d(cov_b)
    root_a = _sqrt_psd(cov_a)
    cross = _sqrt_psd(root_a @ cov_b @ root_a)
    dist = float(
        np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross)
    )
    return dist


# ---------------------------------------------------------------------------
# PSD-over-time


@dataclass
class PsdProfile:
    frame_index: int
    radii: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    counts: np.ndarray
    mean_power: float  # mean squared frame magnitude (Parseval check)


def _radial_bins(h: int, w: int) -> tuple[np.ndarray, int]:
    fy = np.minimum(np.arange(h), h - np.arange(h)).astype(np.float64)
    fx = np.minimum(np.arange(w), w - np.arange(w)).astype(np.float64)
    r = np.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)
    nbins = min(h, w) // 2
    bins = np.minimum(np.round(r).astype(int), nbins - 1)
    return bins, nbins


def psd_profile(videos: VideoBatch, frame_indices) -> list:
    """Radially averaged power spectra of grayscale frames at the requested
    indices, averaged over videos; std bands come from three disjoint video
    subsets."""
    b, t, _, h, w = videos.shape
    for idx in frame_indices:
        if idx < 0 or idx >= t:
            raise ValueError(f"frame index {idx} outside [0, {t})")
    bins, nbins = _radial_bins(h, w)
    flat_bins = bins.reshape(-1)
    counts = np.bincount(flat_bins, minlength=nbins).astype(np.float64)
    groups = np.arange(b) % 3 if b >= 3 else np.zeros(b, dtype=int)

    profiles = []
    for idx in frame_indices:
        gray = videos.data[:, idx].mean(axis=1).astype(np.float64)  # (B, H, W)
        spec = np.abs(np.fft.fft2(gray)) ** 2 / float(h * w) ** 2
        per_video = np.zeros((b, nbins))
        for i in range(b):
            per_video[i] = np.bincount(flat_bins, weights=spec[i].reshape(-1), minlength=nbins)
        per_video /= counts[None, :]
        mean = per_video.mean(axis=0)
        if b >= 3:
            subset_means = np.stack([per_video[groups == g].mean(axis=0) for g in range(3)])
            std = subset_means.std(axis=0)
        else:
            std = np.zeros(nbins)
        profiles.append(
            PsdProfile(
                frame_index=int(idx),
                radii=np.arange(nbins, dtype=np.float64),
                mean=mean,
                std=std,
                counts=counts.copy(),
                mean_power=float((gray**2).mean()),
            )
        )
    return profiles


def psd_log_distance(a: PsdProfile, b: PsdProfile, eps: float = 1e-12) -> float:
    """Mean absolute log-power difference between two radial profiles."""
    return float(np.mean(np.abs(np.log(a.mean + eps) - np.log(b.mean + eps))))


def psd_profiles_to_csv(profiles: list, path: str) -> None:
    with open(path, "w") as f:
        f.write("frame_index,bin_radius,mean,std\n")
        for p in profiles:
            for r, m, s in zip(p.radii, p.mean, p.std):
                f.write(f"{p.frame_index},{r:g},{m:.10g},{s:.10g}\n")


# ---------------------------------------------------------------------------
# Grounding error


def grounding_error(x_out: VideoBatch, x_in: VideoBatch, k_t: int, k_s: int) -> float:
    """Mean absolute difference between the pyramid reduction of x_out and
    x_in; zero iff the output is a valid upscaling of its input."""
    reduced = downsample_spatial(subsample_temporal(x_out, k_t), k_s)
    if reduced.shape != x_in.shape:
        raise AlignmentError(f"reduced {reduced.shape} vs input {x_in.shape}")
    return float(np.mean(np.abs(reduced.data - x_in.data)))


# ---------------------------------------------------------------------------
# Activation-memory estimator


def generator_layer_shapes(config, t_out: int, batch: int, input_hw: int | None = None) -> list:
    """(name, activation shape) for every convolution and normalization
    output in one training forward of the level's generator.

    Linear/embedding outputs are excluded: they are sequence-length
    independent and negligible next to the conv stacks. Up-levels consume
    fixed windows, so their walk uses window_w regardless of t_out.
    """
    shapes = []

    def gen_block2d(name, t, c_in, c_out, hw_in, upsample):
        hw = hw_in * 2 if upsample else hw_in
        shapes.append((f"{name}.bn1", (batch, t, c_in, hw_in, hw_in)))
        shapes.append((f"{name}.conv1", (batch, t, c_out, hw, hw)))
        shapes.append((f"{name}.bn2", (batch, t, c_out, hw, hw)))
        shapes.append((f"{name}.conv2", (batch, t, c_out, hw, hw)))
        if c_in != c_out or upsample:
            shapes.append((f"{name}.conv_sc", (batch, t, c_out, hw, hw)))
        return hw

    if isinstance(config, FirstLevelConfig):
        t = t_out
        hw = config.seed_hw
        in_ch = SEED_CHANNEL_MULT * config.ch
        last = len(config.multipliers) - 1
        for u, mult in enumerate(config.multipliers):
            hid = config.ch * mult
            for gate in ("z", "r", "h"):
                shapes.append((f"unit{u}.gru.conv_{gate}", (batch, t, hid, hw, hw)))
            hw = gen_block2d(f"unit{u}.block_a", t, hid, hid, hw, upsample=(u < last))
            gen_block2d(f"unit{u}.block_b", t, hid, hid, hw, upsample=False)
            in_ch = hid
        shapes.append(("head.bn", (batch, t, in_ch, hw, hw)))
        shapes.append(("head.conv", (batch, t, 3, hw, hw)))
        return shapes

    if isinstance(config, UpLevelConfig):
        if input_hw is None:
            raise ValueError("up-level estimates need input_hw")
        t = config.k_t * config.window_w
        hw = input_hw
        in_ch = config.ch * config.multipliers[0]
        shapes.append(("stem.conv", (batch, t, in_ch, hw, hw)))
        n_units = len(config.multipliers)
        first_up = n_units - config.num_upsampling_units
        for u, mult in enumerate(config.multipliers):
            out_ch = config.ch * mult
            if config.recurrent_kind == "convgru":
                for gate in ("z", "r", "h"):
                    shapes.append((f"unit{u}.gru.conv_{gate}", (batch, t, out_ch, hw, hw)))
            else:
                shapes.append((f"unit{u}.t3d.bn1", (batch, t, in_ch, hw, hw)))
                shapes.append((f"unit{u}.t3d.conv1_t", (batch, t, out_ch, hw, hw)))
                shapes.append((f"unit{u}.t3d.conv1_s", (batch, t, out_ch, hw, hw)))
                shapes.append((f"unit{u}.t3d.bn2", (batch, t, out_ch, hw, hw)))
                shapes.append((f"unit{u}.t3d.conv2_t", (batch, t, out_ch, hw, hw)))
                shapes.append((f"unit{u}.t3d.conv2_s", (batch, t, out_ch, hw, hw)))
                if in_ch != out_ch:
                    shapes.append((f"unit{u}.t3d.conv_sc", (batch, t, out_ch, hw, hw)))
            hw = gen_block2d(f"unit{u}.block_a", t, out_ch, out_ch, hw, upsample=(u >= first_up))
            gen_block2d(f"unit{u}.block_b", t, out_ch, out_ch, hw, upsample=False)
            if hw <= input_hw:
                shapes.append((f"unit{u}.ground", (batch, t, out_ch, hw, hw)))
            in_ch = out_ch
        shapes.append(("head.bn", (batch, t, in_ch, hw, hw)))
        shapes.append(("head.conv", (batch, t, 3, hw, hw)))
        return shapes

    raise TypeError(f"unsupported config type {type(config)!r}")


def activation_memory_estimate(
    config, t_out: int, batch: int, bytes_per_value: int = 4, input_hw: int | None = None
) -> int:
    """Total activation bytes of one training forward: each conv/norm output
    counted once for the forward pass and once as stored-for-backward."""
    total = 0
    for _, shape in generator_layer_shapes(config, t_out, batch, input_hw):
        total += int(np.prod(shape))
    return 2 * total * bytes_per_value


# ---------------------------------------------------------------------------
# Aggregate reports


@dataclass
class MetricsReport:
    is_mean: float = float("nan")
    fid: float = float("nan")
    fvd: float = float("nan")
    grounding: float = float("nan")
    per_class: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        doc = {
            "is_mean": self.is_mean,
            "fid": self.fid,
            "fvd": self.fvd,
            "grounding": self.grounding,
        }
        if self.per_class:
            doc["per_class"] = {
                str(k): {"is": v[0], "fid": v[1]} for k, v in self.per_class.items()
            }
        return doc

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=1)


def evaluate_sets(net: FeatureNet, generated: VideoBatch, reference: VideoBatch) -> MetricsReport:
    """IS of the generated set plus FVD (clip logits) and FID (frame
    features) between the two sets."""
    gen_feats, gen_logits = clip_features(net, generated)
    ref_feats, ref_logits = clip_features(net, reference)
    probs = _softmax(gen_logits)
    return MetricsReport(
        is_mean=inception_score(probs),
        fid=frechet_distance(frame_features(net, generated), frame_features(net, reference)),
        fvd=frechet_distance(gen_logits, ref_logits),
    )


def fvd_between(net: FeatureNet, generated: VideoBatch | torch.Tensor, reference: VideoBatch | torch.Tensor) -> float:
    _, gen_logits = clip_features(net, generated)
    _, ref_logits = clip_features(net, reference)
    return frechet_distance(gen_logits, ref_logits)


def per_class_report(generated: dict, reference: DatasetManifest, net: FeatureNet) -> dict:
    """class -> (inception score, frame FID vs the reference videos of that
    class). Every generated class must exist in the reference."""
    ref_by_class = {}
    for i, e in enumerate(reference.entries):
        ref_by_class.setdefault(e.label, []).append(i)
    out = {}
    for label, batch in generated.items():
        if label not in ref_by_class:
            raise ValueError(f"class {label} absent from reference")
        if len(batch) < 2 or len(ref_by_class[label]) < 2:
            raise ValueError(f"need >= 2 samples per side for class {label}")
        ref_batch = load_videos(reference, ref_by_class[label])
        _, logits = clip_features(net, batch)
        is_k = inception_score(_softmax(logits))
        fid_k = frechet_distance(frame_features(net, batch), frame_features(net, ref_batch))
        out[label] = (is_k, fid_k)
    return out


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)
