"""Cascade sampling and convolutional unrolling beyond the training horizon.

Per-frame batch-norm statistics are only valid for the sequence length
they were accumulated at, so sampling at a new length first requires
dummy forward passes to recompute them (200 by default). Recomputed
statistics are cached per target length on the handle; the training-time
statistics inside each model are never mutated.
"""

from __future__ import annotations

import json
import os
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import StateError
from .genfirst import FirstLevelGenerator
from .nncore import PerFrameCondBatchNorm, _SpectralNormMixin
from .training import LevelCheckpoint
from .videodata import VideoBatch, save_video

DEFAULT_RECOMPUTE_PASSES = 200


def collect_cbn_state(module: torch.nn.Module) -> dict:
    out = {}
    for name, sub in module.named_modules():
        if isinstance(sub, PerFrameCondBatchNorm):
            out[name] = (
                sub.running_mean.clone(),
                sub.running_var.clone(),
                sub.num_batches_tracked.clone(),
            )
    return out


def apply_cbn_state(module: torch.nn.Module, state: dict) -> None:
    for name, sub in module.named_modules():
        if isinstance(sub, PerFrameCondBatchNorm):
            mean, var, tracked = state[name]
            sub.running_mean = mean.clone()
            sub.running_var = var.clone()
            sub.num_batches_tracked = tracked.clone()


@contextmanager
def _frozen_spectral_state(module: torch.nn.Module):
    saved = []
    for sub in module.modules():
        if isinstance(sub, _SpectralNormMixin):
            saved.append((sub, sub.power_iters))
            sub.power_iters = 0
    try:
        yield
    finally:
        for sub, iters in saved:
            sub.power_iters = iters


@dataclass
class CascadeHandle:
    """Ordered trained levels plus per-length recomputed statistics."""

    checkpoints: list
    models: list
    stats_cache: dict = field(default_factory=dict)

    @classmethod
    def from_checkpoints(cls, checkpoints: list) -> "CascadeHandle":
        if not checkpoints:
            raise ValueError("empty cascade")
        for i, c in enumerate(checkpoints):
            if c.level != i + 1:
                raise StateError(f"levels not contiguous: position {i} holds level {c.level}")
        if checkpoints[0].kind != "first":
            raise StateError("level 1 checkpoint must be a first-level model")
        hw = checkpoints[0].gen_config["seed_hw"] * 2 ** (
            len(checkpoints[0].gen_config["multipliers"]) - 1
        )
        for c in checkpoints[1:]:
            if c.kind != "up":
                raise StateError(f"level {c.level} checkpoint is not an upscaling model")
            if c.input_hw is not None and c.input_hw != hw:
                raise StateError(
                    f"level {c.level} expects {c.input_hw}x{c.input_hw} inputs, "
                    f"previous level outputs {hw}x{hw}"
                )
            hw *= c.gen_config["k_s"]
        return cls(checkpoints, [c.build_generator() for c in checkpoints])

    @property
    def num_levels(self) -> int:
        return len(self.models)

    def native_t_out(self, idx: int) -> int:
        c = self.checkpoints[idx]
        if c.kind == "first":
            return c.gen_config["t1"]
        return c.gen_config["k_t"] * c.gen_config["window_w"]

    def k_t(self, idx: int) -> int:
        return self.checkpoints[idx].gen_config["k_t"]

    def stats_valid(self, idx: int, t_out: int) -> bool:
        # shorter outputs truncate the per-frame statistics, longer ones
        # need a recompute
        return t_out <= self.native_t_out(idx) or (idx, t_out) in self.stats_cache

    @contextmanager
    def stats_applied(self, idx: int, t_out: int):
        model = self.models[idx]
        if t_out <= self.native_t_out(idx):
            yield model
            return
        key = (idx, t_out)
        if key not in self.stats_cache:
            raise StateError(
                f"level {idx + 1} has no statistics for {t_out}-frame outputs; "
                "run recompute_bn_stats first"
            )
        saved = collect_cbn_state(model)
        apply_cbn_state(model, self.stats_cache[key])
        try:
            yield model
        finally:
            apply_cbn_state(model, saved)


def unrolled_length(handle: CascadeHandle, t1: int) -> int:
    """Closed-form output length: t1 times the product of temporal factors."""
    t = t1
    for idx in range(1, handle.num_levels):
        t *= handle.k_t(idx)
    return t


def _sample_labels(handle: CascadeHandle, n: int, y, tgen: torch.Generator):
    num_classes = handle.checkpoints[0].gen_config.get("num_classes")
    if num_classes is None:
        if y is not None:
            raise ValueError("cascade is unconditional; omit the class")
        return None
    if y is None:
        return torch.randint(0, num_classes, (n,), generator=tgen)
    labels = torch.as_tensor(np.broadcast_to(np.asarray(y, dtype=np.int64), (n,)).copy())
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"class outside [0, {num_classes})")
    return labels


def _run_cascade(handle: CascadeHandle, n: int, labels, tgen: torch.Generator, t1: int,
                 upto: int | None = None) -> list:
    """Sample levels 1..upto at first-level length t1, applying cached
    statistics where the length differs from training."""
    upto = handle.num_levels if upto is None else upto
    outputs = []
    x = None
    for idx in range(upto):
        model = handle.models[idx]
        cfg = model.config
        z = torch.randn(n, cfg.d_z, generator=tgen)
        y = labels if cfg.conditional else None
        t_out = t1 if idx == 0 else handle.k_t(idx) * x.shape[1]
        with handle.stats_applied(idx, t_out) as m, torch.no_grad():
            if isinstance(m, FirstLevelGenerator):
                x = m(z, y, t=t_out)
            else:
                x = m(z, x, y)
        outputs.append(x)
    return outputs


def recompute_bn_stats(
    handle: CascadeHandle,
    level: int,
    target_t: int,
    passes: int = DEFAULT_RECOMPUTE_PASSES,
    batch_size: int = 8,
    seed: int = 0,
) -> CascadeHandle:
    """Accumulate per-frame statistics for `target_t`-frame outputs of
    `level` with dummy forward passes (fresh noise, fresh conditioning from
    the frozen lower cascade), cache them on the handle and leave the
    training-time statistics untouched."""
    idx = level - 1
    if idx < 0 or idx >= handle.num_levels:
        raise ValueError(f"level {level} outside cascade")
    native = handle.native_t_out(idx)
    if target_t < native:
        raise ValueError(
            f"target length {target_t} below training length {native}; "
            "statistics are already valid there"
        )
    if passes <= 0 or target_t == native:
        return handle
    model = handle.models[idx]
    if idx > 0 and target_t % handle.k_t(idx) != 0:
        raise ValueError(f"target length {target_t} not divisible by K_T {handle.k_t(idx)}")
    t1 = target_t
    for j in range(idx, 0, -1):
        t1 //= handle.k_t(j)

    snapshot = collect_cbn_state(model)
    tgen = torch.Generator().manual_seed(seed ^ (0xD0 + level))
    model.train()
    try:
        with _frozen_spectral_state(model), torch.no_grad():
            for _ in range(passes):
                labels = _sample_labels(handle, batch_size, None, tgen)
                if idx == 0:
                    y = labels if model.config.conditional else None
                    model(torch.randn(batch_size, model.config.d_z, generator=tgen), y, t=target_t)
                else:
                    lower = _run_cascade(handle, batch_size, labels, tgen, t1, upto=idx)[-1]
                    y = labels if model.config.conditional else None
                    model(torch.randn(batch_size, model.config.d_z, generator=tgen), lower, y)
        handle.stats_cache[(idx, target_t)] = collect_cbn_state(model)
    finally:
        apply_cbn_state(model, snapshot)
        model.eval()
    return handle


def prepare_cascade(handle: CascadeHandle, t1: int,
                    passes: int = DEFAULT_RECOMPUTE_PASSES,
                    batch_size: int = 8, seed: int = 0) -> CascadeHandle:
    """Bottom-up statistics recompute so the whole cascade can sample with
    first-level length t1."""
    t = t1
    for idx in range(handle.num_levels):
        t_out = t if idx == 0 else handle.k_t(idx) * t
        if not handle.stats_valid(idx, t_out):
            recompute_bn_stats(handle, idx + 1, t_out, passes=passes,
                               batch_size=batch_size, seed=seed)
        t = t_out
    return handle


def sample_cascade(handle: CascadeHandle, n: int, y=None, seed: int = 0,
                   t1: int | None = None) -> list:
    """Draw n videos, returning every intermediate view [x^1, ..., x^L] as
    VideoBatch objects. Deterministic per seed."""
    t1 = t1 or handle.native_t_out(0)
    t = t1
    for idx in range(handle.num_levels):
        t_out = t if idx == 0 else handle.k_t(idx) * t
        if not handle.stats_valid(idx, t_out):
            raise StateError(
                f"level {idx + 1} statistics are stale for {t_out}-frame outputs; "
                "run recompute_bn_stats/prepare_cascade first"
            )
        t = t_out
    tgen = torch.Generator().manual_seed(seed)
    labels = _sample_labels(handle, n, y, tgen)
    outputs = _run_cascade(handle, n, labels, tgen, t1)
    label_arr = None if labels is None else labels.numpy()
    subsample = 1
    views = []
    for idx in range(handle.num_levels - 1, -1, -1):
        data = np.clip(outputs[idx].numpy(), -1.0, 1.0)
        views.append(VideoBatch(data, label_arr, subsample))
        if idx > 0:
            subsample *= handle.k_t(idx)
    views.reverse()
    return views


def write_samples(out_dir: str, views: list, seed: int) -> list:
    """Persist the top-level videos plus a JSON sidecar with the seed,
    labels and every level's shapes."""
    os.makedirs(out_dir, exist_ok=True)
    top = views[-1]
    paths = []
    for i in range(len(top)):
        name = f"sample_{i:04d}.cvg"
        save_video(os.path.join(out_dir, name), top.data[i])
        paths.append(name)
    sidecar = {
        "seed": seed,
        "labels": None if top.labels is None else top.labels.tolist(),
        "level_shapes": [list(v.shape) for v in views],
        "files": paths,
    }
    with open(os.path.join(out_dir, "samples.json"), "w") as f:
        json.dump(sidecar, f, indent=1)
    return paths


def recompute_stats_for_module(lower_models: list, model, ckpt: LevelCheckpoint, in_t: int,
                               passes: int = DEFAULT_RECOMPUTE_PASSES,
                               batch_size: int = 8, seed: int = 0) -> None:
    """Bake statistics for `in_t`-frame inputs directly into an up-level
    model (used when freezing a cascade prefix for training)."""
    tgen = torch.Generator().manual_seed(seed + 0xBA)
    model.train()
    try:
        with _frozen_spectral_state(model), torch.no_grad():
            for _ in range(passes):
                y = None
                if model.config.conditional:
                    y = torch.randint(0, model.config.num_classes, (batch_size,), generator=tgen)
                x = lower_models[0](
                    torch.randn(batch_size, lower_models[0].config.d_z, generator=tgen),
                    y if lower_models[0].config.conditional else None,
                )
                for m in lower_models[1:]:
                    x = m(torch.randn(batch_size, m.config.d_z, generator=tgen), x,
                          y if m.config.conditional else None)
                if x.shape[1] != in_t:
                    raise StateError(f"lower cascade yields {x.shape[1]} frames, expected {in_t}")
                model(torch.randn(batch_size, model.config.d_z, generator=tgen), x,
                      y if model.config.conditional else None)
    finally:
        model.eval()
