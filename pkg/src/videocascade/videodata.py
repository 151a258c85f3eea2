"""Video containers, the resolution/framerate pyramid, window cropping and
the synthetic labeled shapes dataset.

Videos are arrays of shape (B, T, C, H, W) with float32 values in [-1, 1].
Lower-resolution views are produced by temporal subsampling followed by
spatial bilinear downsampling; both operators are exact, deterministic
and preserve constants.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentError, DimensionError

RANGE_TOL = 1e-6

CONTAINER_MAGIC = b"CVG1"


# ---------------------------------------------------------------------------
# Containers


@dataclass
class VideoBatch:
    """A batch of videos: (B, T, C, H, W) float32 in [-1, 1].

    labels, when present, are integer class ids of length B. subsample is
    the temporal subsampling factor relative to the native framerate.
    """

    data: np.ndarray
    labels: np.ndarray | None = None
    subsample: int = 1

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 5:
            raise DimensionError(f"expected (B, T, C, H, W), got shape {self.data.shape}")
        b, t, c, h, w = self.data.shape
        if t < 1 or h < 1 or w < 1:
            raise DimensionError(f"empty temporal/spatial extent in shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("video values must be finite")
        amax = float(np.abs(self.data).max(initial=0.0))
        if amax > 1.0 + RANGE_TOL:
            raise ValueError(f"video values outside [-1, 1]: max abs {amax}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (b,):
                raise DimensionError(f"labels shape {self.labels.shape} != ({b},)")
        if self.subsample < 1:
            raise ValueError("subsample must be >= 1")

    @property
    def shape(self) -> tuple[int, int, int, int, int]:
        return tuple(self.data.shape)

    @property
    def num_frames(self) -> int:
        return self.data.shape[1]

    def __len__(self) -> int:
        return self.data.shape[0]

    def select(self, indices) -> "VideoBatch":
        labels = None if self.labels is None else self.labels[indices]
        return VideoBatch(self.data[indices], labels, self.subsample)


@dataclass(frozen=True)
class PyramidSpec:
    """Per-level (K_T, K_S) factors relating level l to level l-1, for
    levels 2..L. The number of levels is len(levels) + 1."""

    levels: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple((int(kt), int(ks)) for kt, ks in self.levels))
        for kt, ks in self.levels:
            if kt < 1 or ks < 1:
                raise ValueError(f"pyramid factors must be >= 1, got ({kt}, {ks})")

    @property
    def num_levels(self) -> int:
        return len(self.levels) + 1

    def total_factors(self) -> tuple[int, int]:
        kt = ks = 1
        for a, b in self.levels:
            kt *= a
            ks *= b
        return kt, ks


@dataclass
class ManifestEntry:
    path: str
    label: int
    t: int
    h: int
    w: int


@dataclass
class DatasetManifest:
    """Index of an on-disk dataset: entries are relative to `root`."""

    entries: list = field(default_factory=list)
    num_classes: int = 0
    seed: int = 0
    root: str = "."

    def __len__(self) -> int:
        return len(self.entries)

    def to_json(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "seed": self.seed,
            "entries": [
                {"path": e.path, "label": e.label, "t": e.t, "h": e.h, "w": e.w}
                for e in self.entries
            ],
        }

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=1)

    @classmethod
    def load(cls, path: str) -> "DatasetManifest":
        with open(path) as f:
            doc = json.load(f)
        entries = [
            ManifestEntry(e["path"], int(e["label"]), int(e["t"]), int(e["h"]), int(e["w"]))
            for e in doc["entries"]
        ]
        m = cls(entries, int(doc["num_classes"]), int(doc["seed"]), os.path.dirname(os.path.abspath(path)))
        hw = {(e.h, e.w) for e in m.entries}
        if len(hw) > 1:
            raise DimensionError(f"manifest entries disagree on frame size: {sorted(hw)}")
        return m


# ---------------------------------------------------------------------------
# Pyramid operators


def bilinear_weights(n_in: int, factor: int) -> np.ndarray:
    """Row-stochastic (n_in/factor, n_in) matrix for antialias-free bilinear
    downsampling with sample points at pixel centers.

    Output index i samples input coordinate (i + 0.5) * factor - 0.5 and
    linearly interpolates its two neighbors; for factor 2 this reduces to
    averaging adjacent pairs.
    """
    if n_in % factor != 0:
        raise DimensionError(f"extent {n_in} not divisible by factor {factor}")
    n_out = n_in // factor
    w = np.zeros((n_out, n_in), dtype=np.float32)
    for i in range(n_out):
        c = (i + 0.5) * factor - 0.5
        f = int(math.floor(c))
        frac = c - f
        f = min(max(f, 0), n_in - 1)
        g = min(f + 1, n_in - 1)
        w[i, f] += 1.0 - frac
        w[i, g] += frac
    return w


def downsample_spatial(v: VideoBatch, k_s: int) -> VideoBatch:
    """Spatial bilinear downsampling by an integer factor k_s."""
    if k_s == 1:
        return v
    _, _, _, h, w = v.shape
    if h % k_s != 0 or w % k_s != 0:
        raise DimensionError(f"spatial extent ({h}, {w}) not divisible by {k_s}")
    wh = bilinear_weights(h, k_s)
    ww = bilinear_weights(w, k_s)
    out = np.einsum("oh,pw,btchw->btcop", wh, ww, v.data, optimize=True)
    out = np.clip(out, -1.0, 1.0).astype(np.float32)
    return VideoBatch(out, v.labels, v.subsample)


def subsample_temporal(v: VideoBatch, k_t: int) -> VideoBatch:
    """Keep frames at indices 0, k_t, 2*k_t, ...; T must divide evenly."""
    if k_t == 1:
        return v
    t = v.num_frames
    if t % k_t != 0:
        raise DimensionError(f"frame count {t} not divisible by {k_t}")
    return VideoBatch(v.data[:, ::k_t], v.labels, v.subsample * k_t)


def build_pyramid(v: VideoBatch, spec: PyramidSpec) -> list:
    """Return views [x^1, ..., x^L] where x^L is `v` and each lower view is
    subsample_temporal then downsample_spatial of the view above."""
    views = [v]
    for k_t, k_s in reversed(spec.levels):
        views.append(downsample_spatial(subsample_temporal(views[-1], k_t), k_s))
    views.reverse()
    return views


def crop_window_pair(
    low: VideoBatch, high: VideoBatch, k_t: int, w: int, start: int
) -> tuple[VideoBatch, VideoBatch]:
    """Temporally aligned crops: low[start:start+w] and the k_t*w high-rate
    frames covering the same span."""
    t_low = low.num_frames
    if high.num_frames != k_t * t_low:
        raise AlignmentError(
            f"high has {high.num_frames} frames, expected {k_t} * {t_low} = {k_t * t_low}"
        )
    if w < 1 or start < 0 or start + w > t_low:
        raise AlignmentError(f"window [{start}, {start + w}) outside [0, {t_low})")
    low_crop = VideoBatch(low.data[:, start : start + w], low.labels, low.subsample)
    high_crop = VideoBatch(
        high.data[:, k_t * start : k_t * (start + w)], high.labels, high.subsample
    )
    return low_crop, high_crop


# ---------------------------------------------------------------------------
# Container format: magic "CVG1", four u32le (T, H, W, C), then T*H*W*C
# bytes of 8-bit frame data in (t, h, w, c) order.


def save_video(path: str, video: np.ndarray) -> None:
    """Write one video, shape (T, C, H, W) float in [-1, 1], as 8-bit."""
    video = np.asarray(video)
    if video.ndim != 4:
        raise DimensionError(f"expected (T, C, H, W), got {video.shape}")
    t, c, h, w = video.shape
    u8 = np.clip(np.round((video + 1.0) * 127.5), 0, 255).astype(np.uint8)
    u8 = np.transpose(u8, (0, 2, 3, 1))  # (t, h, w, c)
    with open(path, "wb") as f:
        f.write(CONTAINER_MAGIC)
        f.write(struct.pack("<4I", t, h, w, c))
        f.write(u8.tobytes())


def load_video(path: str) -> np.ndarray:
    """Read one video back as (T, C, H, W) float32 in [-1, 1]."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CONTAINER_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        t, h, w, c = struct.unpack("<4I", f.read(16))
        raw = f.read(t * h * w * c)
    if len(raw) != t * h * w * c:
        raise ValueError(f"{path}: truncated payload")
    u8 = np.frombuffer(raw, dtype=np.uint8).reshape(t, h, w, c)
    video = 2.0 * u8.astype(np.float32) / 255.0 - 1.0
    return np.ascontiguousarray(np.transpose(video, (0, 3, 1, 2)))


def load_videos(manifest: DatasetManifest, indices=None) -> VideoBatch:
    """Load manifest entries (all by default) into one VideoBatch."""
    if indices is None:
        indices = range(len(manifest.entries))
    frames, labels = [], []
    for i in indices:
        e = manifest.entries[i]
        frames.append(load_video(os.path.join(manifest.root, e.path)))
        labels.append(e.label)
    if not frames:
        raise ValueError("no entries selected")
    return VideoBatch(np.stack(frames), np.asarray(labels, dtype=np.int64))


# ---------------------------------------------------------------------------
# Synthetic shapes dataset: each class is a distinct (shape, motion) pair;
# an object translates at a class-specific velocity over a dark background.

_SHAPES = ("square", "disc", "triangle", "cross")

_PALETTE = np.array(
    [
        (1.00, 0.35, 0.30),
        (0.35, 1.00, 0.40),
        (0.40, 0.55, 1.00),
        (1.00, 0.95, 0.35),
        (1.00, 0.45, 1.00),
        (0.40, 1.00, 1.00),
        (1.00, 0.70, 0.30),
        (0.75, 0.75, 0.95),
        (0.95, 0.30, 0.60),
        (0.55, 0.95, 0.30),
        (0.30, 0.85, 0.75),
        (0.90, 0.60, 0.95),
        (0.65, 0.80, 0.35),
        (0.35, 0.65, 0.95),
        (0.95, 0.85, 0.65),
        (0.70, 0.40, 0.95),
    ],
    dtype=np.float32,
)


def class_velocity(label: int, num_classes: int, hw: int) -> tuple[float, float]:
    """Per-class velocity (vy, vx) in pixels/frame: distinct direction per
    class, alternating slow/fast speed."""
    angle = 2.0 * math.pi * label / num_classes
    speed = (0.030 + 0.020 * (label % 2)) * hw
    return speed * math.sin(angle), speed * math.cos(angle)


def _shape_mask(shape: str, ys: np.ndarray, xs: np.ndarray, cy: float, cx: float, r: float):
    dy, dx = ys - cy, xs - cx
    if shape == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if shape == "disc":
        return dy * dy + dx * dx <= r * r
    if shape == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    if shape == "cross":
        arm = r / 3.0
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | (
            (np.abs(dy) <= arm) & (np.abs(dx) <= r)
        )
    raise ValueError(f"unknown shape {shape!r}")


def render_shapes_video(
    label: int, num_classes: int, t: int, h: int, w: int, rng: np.random.Generator
) -> np.ndarray:
    """One (T, C, H, W) float32 video of a moving colored shape."""
    ss = 4  # supersampling for soft subpixel edges
    shape = _SHAPES[label % len(_SHAPES)]
    color = _PALETTE[label % len(_PALETTE)]
    radius = min(h, w) * rng.uniform(0.11, 0.15)
    vy, vx = class_velocity(label, num_classes, min(h, w))

    margin = radius + 1.5
    span_y, span_x = vy * (t - 1), vx * (t - 1)
    # Clamp speed so the full linear trajectory stays inside the frame.
    scale = 1.0
    if abs(span_y) > 0.96 * (h - 2 * margin):
        scale = min(scale, 0.96 * (h - 2 * margin) / abs(span_y))
    if abs(span_x) > 0.96 * (w - 2 * margin):
        scale = min(scale, 0.96 * (w - 2 * margin) / abs(span_x))
    vy, vx = vy * scale, vx * scale
    span_y, span_x = vy * (t - 1), vx * (t - 1)

    y0 = rng.uniform(margin + max(0.0, -span_y), h - margin - max(0.0, span_y))
    x0 = rng.uniform(margin + max(0.0, -span_x), w - margin - max(0.0, span_x))

    bg = rng.uniform(-0.95, -0.8)
    ys = (np.arange(h * ss, dtype=np.float32)[:, None] + 0.5) / ss - 0.5
    xs = (np.arange(w * ss, dtype=np.float32)[None, :] + 0.5) / ss - 0.5

    video = np.empty((t, 3, h, w), dtype=np.float32)
    for i in range(t):
        cy, cx = y0 + vy * i, x0 + vx * i
        mask = _shape_mask(shape, ys, xs, cy, cx, radius).astype(np.float32)
        cover = mask.reshape(h, ss, w, ss).mean(axis=(1, 3))
        noise = rng.normal(0.0, 0.015, size=(h, w)).astype(np.float32)
        for ch in range(3):
            frame = bg + cover * (color[ch] - bg) + noise
            video[i, ch] = frame
    return np.clip(video, -1.0, 1.0)


def make_shapes_dataset(
    num_videos: int,
    num_classes: int,
    t: int,
    h: int,
    w: int,
    seed: int,
    out_dir: str,
) -> DatasetManifest:
    """Render a labeled shapes dataset to `out_dir` in the container format
    and write out_dir/manifest.json. Deterministic given the seed."""
    if num_classes < 1 or num_classes > 16:
        raise ValueError(f"num_classes must be in [1, 16], got {num_classes}")
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    manifest = DatasetManifest(num_classes=num_classes, seed=seed, root=os.path.abspath(out_dir))
    for i in range(num_videos):
        label = i % num_classes
        video = render_shapes_video(label, num_classes, t, h, w, rng)
        name = f"video_{i:05d}.cvg"
        save_video(os.path.join(out_dir, name), video)
        manifest.entries.append(ManifestEntry(name, label, t, h, w))
    manifest.save(os.path.join(out_dir, "manifest.json"))
    return manifest
