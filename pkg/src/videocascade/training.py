"""Greedy per-level adversarial training.

Level 1 plays the standard two-player game against real first-level
pyramid views. Upscaling levels train on temporally cropped (input,
output) window pairs: real pairs come from the data pyramid, fake pairs
condition the generator on windows sampled from the frozen lower cascade
(or, in ablation mode, on real lower views). Previous levels never
receive gradient and their parameters are bit-identical before and after
training a new level.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .discriminators import DiscConfig, LevelDiscriminator
from .errors import ConfigError, StateError
from .genfirst import FirstLevelConfig, FirstLevelGenerator
from .genup import UpLevelConfig, UpLevelGenerator
from .nncore import hinge_d_loss, hinge_g_loss, log_d_loss, log_g_loss
from .videodata import (
    DatasetManifest,
    PyramidSpec,
    VideoBatch,
    build_pyramid,
    load_videos,
)


@dataclass
class TrainConfig:
    lr_g: float = 1e-4
    lr_d: float = 5e-4
    beta1: float = 0.0
    beta2: float = 0.999
    d_steps_per_g: int = 2
    batch_size: int = 8
    max_iters: int = 1000
    eval_every: int = 0  # 0 disables mid-training evaluation
    early_stop_patience: int = 0  # evaluations without improvement; 0 disables
    eval_samples: int = 64
    holdout: int = 64  # videos reserved for evaluation
    seed: int = 0
    fake_condition_source: str = "prev_level"  # or "data_pyramid"
    matching: bool = True
    loss: str = "hinge"  # or "log"

    def __post_init__(self):
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ConfigError("learning rates must be positive")
        if self.d_steps_per_g < 1:
            raise ConfigError("d_steps_per_g must be >= 1")
        if self.fake_condition_source not in ("prev_level", "data_pyramid"):
            raise ConfigError(f"unknown fake_condition_source {self.fake_condition_source!r}")
        if self.loss not in ("hinge", "log"):
            raise ConfigError(f"unknown loss {self.loss!r}")

    def d_loss(self, real, fake):
        return hinge_d_loss(real, fake) if self.loss == "hinge" else log_d_loss(real, fake)

    def g_loss(self, fake):
        return hinge_g_loss(fake) if self.loss == "hinge" else log_g_loss(fake)


# ---------------------------------------------------------------------------
# Checkpoint archive: one file holding a JSON metadata document followed by
# named raw arrays (name length + name + dtype tag + rank + u64 dims + data,
# all little-endian).

ARCHIVE_MAGIC = b"CVGC"
_DTYPE_TAGS = {0: "<f4", 1: "<f8", 2: "<i8", 3: "<i4", 4: "|u1"}
_TAG_BY_KIND = {
    ("f", 4): 0,
    ("f", 8): 1,
    ("i", 8): 2,
    ("i", 4): 3,
    ("u", 1): 4,
}


def save_archive(path: str, meta: dict, arrays: dict) -> None:
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(ARCHIVE_MAGIC)
        f.write(struct.pack("<I", len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.asarray(arrays[name])
            key = (arr.dtype.kind, arr.dtype.itemsize)
            if key not in _TAG_BY_KIND:
                raise TypeError(f"unsupported dtype {arr.dtype} for array {name!r}")
            tag = _TAG_BY_KIND[key]
            arr = np.ascontiguousarray(arr.astype(_DTYPE_TAGS[tag]))
            name_b = name.encode("utf-8")
            f.write(struct.pack("<I", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<BB", tag, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())
    os.replace(tmp, path)  # atomic publish, never a half-written checkpoint


def load_archive(path: str) -> tuple[dict, dict]:
    with open(path, "rb") as f:
        if f.read(4) != ARCHIVE_MAGIC:
            raise ValueError(f"{path}: not a checkpoint archive")
        (meta_len,) = struct.unpack("<I", f.read(4))
        meta = json.loads(f.read(meta_len).decode("utf-8"))
        (n_arrays,) = struct.unpack("<I", f.read(4))
        arrays = {}
        for _ in range(n_arrays):
            (name_len,) = struct.unpack("<I", f.read(4))
            name = f.read(name_len).decode("utf-8")
            tag, rank = struct.unpack("<BB", f.read(2))
            dims = struct.unpack(f"<{rank}Q", f.read(8 * rank)) if rank else ()
            dtype = np.dtype(_DTYPE_TAGS[tag])
            count = int(np.prod(dims)) if dims else 1
            data = f.read(count * dtype.itemsize)
            arrays[name] = np.frombuffer(data, dtype=dtype).reshape(dims).copy()
    return meta, arrays


def state_dict_to_arrays(module: torch.nn.Module, prefix: str) -> dict:
    out = {}
    for name, tensor in module.state_dict().items():
        out[f"{prefix}/{name}"] = tensor.detach().cpu().numpy()
    return out


def load_state_arrays(module: torch.nn.Module, arrays: dict, prefix: str) -> None:
    """Restore a state dict from archive arrays; buffers may change shape
    (per-frame statistics follow the trained sequence length)."""
    own = module.state_dict()
    for name in own:
        key = f"{prefix}/{name}"
        if key not in arrays:
            raise StateError(f"checkpoint missing array {key!r}")
        tensor = torch.from_numpy(arrays[key].copy())
        mod_path, _, attr = name.rpartition(".")
        sub = module.get_submodule(mod_path) if mod_path else module
        if attr in dict(sub.named_parameters(recurse=False)):
            param = getattr(sub, attr)
            if param.shape != tensor.shape:
                raise StateError(f"parameter {name} shape {tuple(param.shape)} != {tuple(tensor.shape)}")
            with torch.no_grad():
                param.copy_(tensor)
        else:
            setattr(sub, attr, tensor.to(own[name].dtype))


def config_fingerprint(*configs: dict) -> str:
    doc = json.dumps(configs, sort_keys=True).encode("utf-8")
    return hashlib.sha256(doc).hexdigest()


def config_dict(cfg) -> dict:
    """Dataclass config as a JSON-native dict (tuples become lists)."""
    return json.loads(json.dumps(asdict(cfg)))


_GEN_CONFIG_TYPES = {"first": FirstLevelConfig, "up": UpLevelConfig}


@dataclass
class LevelCheckpoint:
    """Frozen parameters + normalization statistics + config fingerprint for
    one trained level."""

    level: int
    kind: str  # "first" | "up"
    gen_config: dict
    disc_config: dict
    train_config: dict
    arrays: dict
    iteration: int = 0
    metric_history: list = field(default_factory=list)
    input_hw: int | None = None  # up levels: conditioning resolution

    @property
    def fingerprint(self) -> str:
        return config_fingerprint(self.gen_config, self.disc_config, self.train_config)

    def build_generator(self) -> torch.nn.Module:
        cfg = _GEN_CONFIG_TYPES[self.kind](**self.gen_config)
        gen = (FirstLevelGenerator if self.kind == "first" else UpLevelGenerator)(cfg, seed=0)
        load_state_arrays(gen, self.arrays, "gen")
        gen.eval()
        for p in gen.parameters():
            p.requires_grad_(False)
        return gen

    def save(self, path: str) -> None:
        meta = {
            "level": self.level,
            "kind": self.kind,
            "gen_config": self.gen_config,
            "disc_config": self.disc_config,
            "train_config": self.train_config,
            "iteration": self.iteration,
            "metric_history": self.metric_history,
            "input_hw": self.input_hw,
            "fingerprint": self.fingerprint,
        }
        save_archive(path, meta, self.arrays)

    @classmethod
    def load(cls, path: str) -> "LevelCheckpoint":
        meta, arrays = load_archive(path)
        ckpt = cls(
            level=meta["level"],
            kind=meta["kind"],
            gen_config=meta["gen_config"],
            disc_config=meta["disc_config"],
            train_config=meta["train_config"],
            arrays=arrays,
            iteration=meta["iteration"],
            metric_history=meta["metric_history"],
            input_hw=meta.get("input_hw"),
        )
        if meta["fingerprint"] != ckpt.fingerprint:
            raise StateError(f"{path}: fingerprint does not match stored configs")
        return ckpt

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.arrays):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.arrays[name]).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# Early stopping


class EarlyStopper:
    """Stop after `patience` consecutive evaluations without improvement;
    patience 0 disables stopping."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = float("inf")
        self.bad = 0

    def update(self, value: float) -> bool:
        if value < self.best:
            self.best = value
            self.bad = 0
            return False
        self.bad += 1
        return self.patience > 0 and self.bad >= self.patience


# ---------------------------------------------------------------------------
# Data plumbing


def num_workers() -> int:
    return int(os.environ.get("CVG_NUM_WORKERS", "0"))


def load_dataset_views(manifest: DatasetManifest, spec: PyramidSpec):
    """Load the full dataset and its pyramid views once, split off a holdout
    prefix deterministically."""
    workers = num_workers()
    if workers > 0:
        from concurrent.futures import ThreadPoolExecutor

        from .videodata import load_video

        with ThreadPoolExecutor(max_workers=workers) as pool:
            frames = list(
                pool.map(
                    lambda e: load_video(os.path.join(manifest.root, e.path)),
                    manifest.entries,
                )
            )
        labels = np.asarray([e.label for e in manifest.entries], dtype=np.int64)
        top = VideoBatch(np.stack(frames), labels)
    else:
        top = load_videos(manifest)
    return build_pyramid(top, spec)


def _split_indices(n: int, holdout: int, seed: int):
    rng = np.random.default_rng(seed ^ 0x5EED)
    perm = rng.permutation(n)
    holdout = min(holdout, n // 2)
    return perm[holdout:], perm[:holdout]


# ---------------------------------------------------------------------------
# Training loops


def _check_finite(name: str, value: torch.Tensor, ckpt_builder, out_path: str | None):
    if torch.isfinite(value):
        return
    if out_path:
        ckpt_builder().save(out_path + ".diagnostic")
    raise StateError(f"{name} became non-finite; aborted with diagnostic checkpoint")


def train_level1(
    manifest: DatasetManifest,
    spec: PyramidSpec,
    gen_cfg: FirstLevelConfig,
    disc_cfg: DiscConfig,
    train_cfg: TrainConfig,
    evaluator=None,
    out_path: str | None = None,
    resume: LevelCheckpoint | None = None,
) -> LevelCheckpoint:
    """Alternating optimization of the first-level generator against real
    first-level pyramid views."""
    if len(manifest) == 0:
        raise ValueError("empty dataset")
    views = load_dataset_views(manifest, spec)
    x1 = views[0]
    train_idx, _ = _split_indices(len(x1), train_cfg.holdout, train_cfg.seed)

    gen = FirstLevelGenerator(gen_cfg, seed=train_cfg.seed)
    disc = LevelDiscriminator(disc_cfg, level=1, video_hw=gen_cfg.output_hw, seed=train_cfg.seed + 1)
    start_iter = 0
    if resume is not None:
        load_state_arrays(gen, resume.arrays, "gen")
        load_state_arrays(disc, resume.arrays, "disc")
        start_iter = resume.iteration
    gen.train()
    disc.train()

    opt_g = torch.optim.Adam(gen.parameters(), lr=train_cfg.lr_g, betas=(train_cfg.beta1, train_cfg.beta2))
    opt_d = torch.optim.Adam(disc.parameters(), lr=train_cfg.lr_d, betas=(train_cfg.beta1, train_cfg.beta2))
    tgen = torch.Generator().manual_seed(train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    real_videos = torch.from_numpy(x1.data)
    real_labels = torch.from_numpy(x1.labels) if gen_cfg.conditional else None

    def sample_z(b):
        return torch.randn(b, gen_cfg.d_z, generator=tgen)

    def sample_labels(b):
        if not gen_cfg.conditional:
            return None
        return torch.randint(0, gen_cfg.num_classes, (b,), generator=tgen)

    def make_ckpt(iteration, history):
        arrays = {**state_dict_to_arrays(gen, "gen"), **state_dict_to_arrays(disc, "disc")}
        return LevelCheckpoint(
            level=1,
            kind="first",
            gen_config=config_dict(gen_cfg),
            disc_config=config_dict(disc_cfg),
            train_config=config_dict(train_cfg),
            arrays=arrays,
            iteration=iteration,
            metric_history=list(history),
        )

    history = list(resume.metric_history) if resume is not None else []
    stopper = EarlyStopper(train_cfg.early_stop_patience)
    best = None
    b = train_cfg.batch_size
    last_iter = start_iter
    for it in range(start_iter, train_cfg.max_iters):
        for _ in range(train_cfg.d_steps_per_g):
            idx = rng.choice(train_idx, size=b, replace=True)
            real = real_videos[idx]
            y_real = real_labels[idx] if real_labels is not None else None
            y_fake = sample_labels(b)
            with torch.no_grad():
                fake = gen(sample_z(b), y_fake)
            d_loss = train_cfg.d_loss(disc(real, y_real, generator=tgen), disc(fake, y_fake, generator=tgen))
            _check_finite("discriminator loss", d_loss, lambda: make_ckpt(it, history), out_path)
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()
        y_fake = sample_labels(b)
        fake = gen(sample_z(b), y_fake)
        g_loss = train_cfg.g_loss(disc(fake, y_fake, generator=tgen))
        _check_finite("generator loss", g_loss, lambda: make_ckpt(it, history), out_path)
        opt_g.zero_grad()
        g_loss.backward()
        opt_g.step()
        last_iter = it + 1

        if train_cfg.eval_every and (it + 1) % train_cfg.eval_every == 0 and evaluator is not None:
            metric = float(evaluator(gen))
            history.append({"iteration": it + 1, "metric": metric})
            if metric <= stopper.best:
                best = make_ckpt(it + 1, history)
            if stopper.update(metric):
                break

    ckpt = best if best is not None else make_ckpt(last_iter, history)
    ckpt.metric_history = history
    if out_path:
        ckpt.save(out_path)
    return ckpt


def _crop_windows(data: torch.Tensor, starts: np.ndarray, w: int, k: int = 1) -> torch.Tensor:
    """Per-sample temporal crops: row i keeps frames [k*starts[i], k*(starts[i]+w))."""
    out = [data[i, k * s : k * (s + w)] for i, s in enumerate(starts)]
    return torch.stack(out)


def train_uplevel(
    level: int,
    manifest: DatasetManifest,
    spec: PyramidSpec,
    prev: list,
    gen_cfg: UpLevelConfig,
    disc_cfg: DiscConfig,
    train_cfg: TrainConfig,
    evaluator=None,
    out_path: str | None = None,
    resume: LevelCheckpoint | None = None,
) -> LevelCheckpoint:
    """Train upscaling level `level` (> 1) on window pairs, conditioning fake
    samples on the frozen lower cascade."""
    if level < 2:
        raise ValueError("train_uplevel handles levels >= 2")
    if len(prev) != level - 1:
        raise StateError(f"need checkpoints for levels 1..{level - 1}, got {len(prev)}")
    views = load_dataset_views(manifest, spec)
    x_low, x_high = views[level - 2], views[level - 1]
    t_low = x_low.num_frames
    if gen_cfg.window_w > t_low:
        raise ConfigError(f"window_w {gen_cfg.window_w} exceeds input length {t_low}")
    k_t, k_s = spec.levels[level - 2]
    if (k_t, k_s) != (gen_cfg.k_t, gen_cfg.k_s):
        raise ConfigError(
            f"level config factors ({gen_cfg.k_t}, {gen_cfg.k_s}) disagree with pyramid {(k_t, k_s)}"
        )

    frozen = build_frozen_cascade(prev)
    gen = UpLevelGenerator(gen_cfg, seed=train_cfg.seed)
    video_hw = x_high.shape[-1]
    disc = LevelDiscriminator(
        disc_cfg, level=level, video_hw=video_hw, k_t=k_t, k_s=k_s,
        matching=train_cfg.matching, seed=train_cfg.seed + 1,
    )
    start_iter = 0
    if resume is not None:
        load_state_arrays(gen, resume.arrays, "gen")
        load_state_arrays(disc, resume.arrays, "disc")
        start_iter = resume.iteration
    gen.train()
    disc.train()

    opt_g = torch.optim.Adam(gen.parameters(), lr=train_cfg.lr_g, betas=(train_cfg.beta1, train_cfg.beta2))
    opt_d = torch.optim.Adam(disc.parameters(), lr=train_cfg.lr_d, betas=(train_cfg.beta1, train_cfg.beta2))
    tgen = torch.Generator().manual_seed(train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    train_idx, _ = _split_indices(len(x_high), train_cfg.holdout, train_cfg.seed)
    high_videos = torch.from_numpy(x_high.data)
    low_videos = torch.from_numpy(x_low.data)
    labels = torch.from_numpy(x_high.labels) if gen_cfg.conditional else None
    w = gen_cfg.window_w

    def sample_real_pair(b):
        idx = rng.choice(train_idx, size=b, replace=True)
        starts = rng.integers(0, t_low - w + 1, size=b)
        high_w = _crop_windows(high_videos[idx], starts, w, k_t)
        low_w = _crop_windows(low_videos[idx], starts, w, 1)
        y = labels[idx] if labels is not None else None
        return high_w, low_w, y

    def sample_fake_condition(b):
        if train_cfg.fake_condition_source == "data_pyramid":
            idx = rng.choice(train_idx, size=b, replace=True)
            starts = rng.integers(0, t_low - w + 1, size=b)
            y = labels[idx] if labels is not None else None
            return _crop_windows(low_videos[idx], starts, w, 1), y
        y = None
        if gen_cfg.conditional:
            y = torch.randint(0, gen_cfg.num_classes, (b,), generator=tgen)
        low_full = sample_frozen_lower(frozen, b, y, tgen)
        starts = rng.integers(0, low_full.shape[1] - w + 1, size=b)
        return _crop_windows(low_full, starts, w, 1), y

    def make_ckpt(iteration, history):
        arrays = {**state_dict_to_arrays(gen, "gen"), **state_dict_to_arrays(disc, "disc")}
        return LevelCheckpoint(
            level=level,
            kind="up",
            gen_config=config_dict(gen_cfg),
            disc_config=config_dict(disc_cfg),
            train_config=config_dict(train_cfg),
            arrays=arrays,
            iteration=iteration,
            metric_history=list(history),
            input_hw=int(x_low.shape[-1]),
        )

    history = list(resume.metric_history) if resume is not None else []
    stopper = EarlyStopper(train_cfg.early_stop_patience)
    best = None
    b = train_cfg.batch_size
    last_iter = start_iter
    for it in range(start_iter, train_cfg.max_iters):
        for _ in range(train_cfg.d_steps_per_g):
            high_w, low_w, y_real = sample_real_pair(b)
            cond_w, y_fake = sample_fake_condition(b)
            with torch.no_grad():
                fake = gen(torch.randn(b, gen_cfg.d_z, generator=tgen), cond_w, y_fake)
            real_scores = disc(high_w, y_real, low=low_w, generator=tgen)
            fake_scores = disc(fake, y_fake, low=cond_w, generator=tgen)
            d_loss = train_cfg.d_loss(real_scores, fake_scores)
            _check_finite("discriminator loss", d_loss, lambda: make_ckpt(it, history), out_path)
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()
        cond_w, y_fake = sample_fake_condition(b)
        fake = gen(torch.randn(b, gen_cfg.d_z, generator=tgen), cond_w, y_fake)
        g_loss = train_cfg.g_loss(disc(fake, y_fake, low=cond_w, generator=tgen))
        _check_finite("generator loss", g_loss, lambda: make_ckpt(it, history), out_path)
        opt_g.zero_grad()
        g_loss.backward()
        opt_g.step()
        last_iter = it + 1

        if train_cfg.eval_every and (it + 1) % train_cfg.eval_every == 0 and evaluator is not None:
            metric = float(evaluator(gen))
            history.append({"iteration": it + 1, "metric": metric})
            if metric <= stopper.best:
                best = make_ckpt(it + 1, history)
            if stopper.update(metric):
                break

    ckpt = best if best is not None else make_ckpt(last_iter, history)
    ckpt.metric_history = history
    if out_path:
        ckpt.save(out_path)
    return ckpt


# ---------------------------------------------------------------------------
# Frozen lower cascade for fake conditioning


def build_frozen_cascade(checkpoints: list) -> list:
    """Rebuild trained generators, frozen, with statistics valid for
    full-length sampling (lower levels get dummy-pass recomputes when their
    full-length input exceeds the training window)."""
    models = [c.build_generator() for c in checkpoints]
    for i, (ckpt, model) in enumerate(zip(checkpoints, models)):
        if ckpt.kind == "up":
            in_t = _full_input_length(checkpoints, i)
            if in_t != ckpt.gen_config["window_w"]:
                from .inference import recompute_stats_for_module

                recompute_stats_for_module(models[:i], model, ckpt, in_t)
    return models


def _full_input_length(checkpoints: list, idx: int) -> int:
    t = checkpoints[0].gen_config["t1"]
    for c in checkpoints[1:idx]:
        t *= c.gen_config["k_t"]
    return t


def sample_frozen_lower(models: list, n: int, y: torch.Tensor | None, tgen: torch.Generator) -> torch.Tensor:
    """Draw n full-length samples from the frozen cascade prefix."""
    with torch.no_grad():
        first = models[0]
        z = torch.randn(n, first.config.d_z, generator=tgen)
        x = first(z, y if first.config.conditional else None)
        for model in models[1:]:
            z = torch.randn(n, model.config.d_z, generator=tgen)
            x = model(z, x, y if model.config.conditional else None)
    return x


# ---------------------------------------------------------------------------
# Training-time evaluation


def make_fvd_evaluator(featnet, manifest: DatasetManifest, spec: PyramidSpec, level: int,
                       prev: list, train_cfg: TrainConfig, gen_cfg):
    """Fréchet-distance evaluator on training-geometry clips against the
    held-out split; lower is better."""
    from .metrics import fvd_between

    views = load_dataset_views(manifest, spec)
    _, holdout_idx = _split_indices(len(views[-1]), train_cfg.holdout, train_cfg.seed)
    ref = views[level - 1].select(holdout_idx)
    n = min(train_cfg.eval_samples, len(holdout_idx))
    frozen = build_frozen_cascade(prev) if level > 1 else []

    def evaluator(gen_module) -> float:
        was_training = gen_module.training
        gen_module.eval()
        tg = torch.Generator().manual_seed(train_cfg.seed + 7777)
        try:
            with torch.no_grad():
                y = None
                if gen_cfg.conditional:
                    y = torch.randint(0, gen_cfg.num_classes, (n,), generator=tg)
                if level == 1:
                    fake = gen_module(torch.randn(n, gen_cfg.d_z, generator=tg), y)
                    ref_clips = torch.from_numpy(ref.data[:n])
                else:
                    low_full = sample_frozen_lower(frozen, n, y, tg)
                    w = gen_cfg.window_w
                    starts = np.random.default_rng(train_cfg.seed).integers(
                        0, low_full.shape[1] - w + 1, size=n
                    )
                    cond = _crop_windows(low_full, starts, w, 1)
                    fake = gen_module(torch.randn(n, gen_cfg.d_z, generator=tg), cond, y)
                    ref_starts = np.random.default_rng(train_cfg.seed + 1).integers(
                        0, ref.num_frames - gen_cfg.k_t * w + 1, size=min(n, len(ref))
                    )
                    ref_clips = _crop_windows(
                        torch.from_numpy(ref.data[: len(ref_starts)]), ref_starts, gen_cfg.k_t * w, 1
                    )
                return fvd_between(featnet, fake, ref_clips)
        finally:
            gen_module.train(was_training)

    return evaluator
