"""Command-line entry point: dataset synthesis, per-level training,
sampling/unrolling, evaluation, PSD analysis and memory reports.

One JSON config file describes the whole pipeline (keys: pyramid, levels,
train, metrics, data); any setting can be overridden on the command line
with dotted paths, e.g. `train.max_iters=500` or `levels.1.gen.ch=16`.

Exit codes: 0 success, 2 usage/config error, 3 I/O failure, 4 missing
prerequisite, 5 incompatible or stale checkpoint.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from .discriminators import DiscConfig
from .errors import ConfigError, StateError
from .genfirst import FirstLevelConfig
from .genup import UpLevelConfig
from .inference import (
    CascadeHandle,
    prepare_cascade,
    sample_cascade,
    unrolled_length,
    write_samples,
)
from .metrics import (
    FeatureNet,
    FeatureNetConfig,
    activation_memory_estimate,
    evaluate_sets,
    per_class_report,
    psd_profile,
    psd_profiles_to_csv,
    train_feature_net,
)
from .training import (
    LevelCheckpoint,
    TrainConfig,
    load_archive,
    load_state_arrays,
    make_fvd_evaluator,
    save_archive,
    state_dict_to_arrays,
    train_level1,
    train_uplevel,
)
from .videodata import (
    DatasetManifest,
    PyramidSpec,
    VideoBatch,
    load_video,
    load_videos,
    make_shapes_dataset,
)

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_MISSING = 4
EXIT_INCOMPATIBLE = 5

_TOP_KEYS = {"pyramid", "levels", "train", "metrics", "data"}
_LEVEL_KEYS = {"kind", "gen", "disc", "checkpoint"}
_METRICS_KEYS = {"featnet", "checkpoint", "train_iters", "batch_size", "seed"}
_DATA_KEYS = {"manifest"}


class MissingPrerequisite(RuntimeError):
    pass


class RunConfig:
    """Validated pipeline config plus path resolution."""

    def __init__(self, doc: dict, base_dir: str):
        unknown = set(doc) - _TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for i, lv in enumerate(doc.get("levels", [])):
            bad = set(lv) - _LEVEL_KEYS
            if bad:
                raise ConfigError(f"levels[{i}]: unknown keys {sorted(bad)}")
        bad = set(doc.get("metrics", {})) - _METRICS_KEYS
        if bad:
            raise ConfigError(f"metrics: unknown keys {sorted(bad)}")
        bad = set(doc.get("data", {})) - _DATA_KEYS
        if bad:
            raise ConfigError(f"data: unknown keys {sorted(bad)}")
        self.doc = doc
        self.base_dir = base_dir
        # construct every dataclass eagerly so unknown nested keys fail fast
        self.pyramid_spec()
        for i in range(self.num_levels):
            self.gen_config(i + 1)
            self.disc_config(i + 1)
        self.train_config()
        self.featnet_config()

    @classmethod
    def load(cls, path: str, overrides: list | None = None) -> "RunConfig":
        with open(path) as f:
            doc = json.load(f)
        for ov in overrides or []:
            _apply_override(doc, ov)
        return cls(doc, os.path.dirname(os.path.abspath(path)))

    def resolve(self, path: str) -> str:
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)

    @property
    def num_levels(self) -> int:
        return len(self.doc.get("levels", []))

    def pyramid_spec(self) -> PyramidSpec:
        return PyramidSpec([tuple(x) for x in self.doc["pyramid"]["levels"]])

    def _level(self, level: int) -> dict:
        if level < 1 or level > self.num_levels:
            raise ConfigError(f"level {level} outside configured range 1..{self.num_levels}")
        return self.doc["levels"][level - 1]

    def gen_config(self, level: int):
        lv = self._level(level)
        kind = lv.get("kind", "first" if level == 1 else "up")
        try:
            if kind == "first":
                return FirstLevelConfig(**{k: _tup(v) for k, v in lv["gen"].items()})
            return UpLevelConfig(**{k: _tup(v) for k, v in lv["gen"].items()})
        except TypeError as e:
            raise ConfigError(f"levels[{level - 1}].gen: {e}") from None

    def disc_config(self, level: int) -> DiscConfig:
        try:
            return DiscConfig(**{k: _tup(v) for k, v in self._level(level)["disc"].items()})
        except TypeError as e:
            raise ConfigError(f"levels[{level - 1}].disc: {e}") from None

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(**self.doc.get("train", {}))
        except TypeError as e:
            raise ConfigError(f"train: {e}") from None

    def featnet_config(self) -> FeatureNetConfig:
        try:
            return FeatureNetConfig(**{k: _tup(v) for k, v in
                                       self.doc.get("metrics", {}).get("featnet", {}).items()})
        except TypeError as e:
            raise ConfigError(f"metrics.featnet: {e}") from None

    def checkpoint_path(self, level: int) -> str:
        lv = self._level(level)
        return self.resolve(lv.get("checkpoint", f"level{level}.ckpt"))

    def featnet_path(self) -> str:
        return self.resolve(self.doc.get("metrics", {}).get("checkpoint", "featnet.ckpt"))

    def manifest(self) -> DatasetManifest:
        path = self.resolve(self.doc["data"]["manifest"])
        if not os.path.exists(path):
            raise MissingPrerequisite(f"dataset manifest not found: {path}")
        return DatasetManifest.load(path)


def _tup(v):
    return tuple(v) if isinstance(v, list) else v


def _apply_override(doc: dict, override: str) -> None:
    if "=" not in override:
        raise ConfigError(f"override {override!r} is not of the form path=value")
    path, raw = override.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    keys = path.split(".")
    node = doc
    for k in keys[:-1]:
        node = node[int(k)] if isinstance(node, list) else node.setdefault(k, {})
    last = keys[-1]
    if isinstance(node, list):
        node[int(last)] = value
    else:
        node[last] = value


def _load_checkpoint(path: str, level: int) -> LevelCheckpoint:
    if not os.path.exists(path):
        raise MissingPrerequisite(f"missing checkpoint for level {level}: {path}")
    try:
        return LevelCheckpoint.load(path)
    except StateError as e:
        raise StateError(f"level {level}: {e}") from None


def _load_featnet(path: str) -> FeatureNet:
    if not os.path.exists(path):
        raise MissingPrerequisite(f"feature-network checkpoint not found: {path}")
    meta, arrays = load_archive(path)
    net = FeatureNet(FeatureNetConfig(**{k: _tup(v) for k, v in meta["config"].items()}))
    load_state_arrays(net, arrays, "featnet")
    net.eval()
    return net


def _load_generated(path: str) -> VideoBatch:
    """A generated-samples directory (sidecar samples.json) or a dataset
    manifest directory/file."""
    if os.path.isdir(path):
        if os.path.exists(os.path.join(path, "samples.json")):
            with open(os.path.join(path, "samples.json")) as f:
                sidecar = json.load(f)
            clips = np.stack([load_video(os.path.join(path, p)) for p in sidecar["files"]])
            labels = sidecar.get("labels")
            return VideoBatch(clips, None if labels is None else np.asarray(labels))
        path = os.path.join(path, "manifest.json")
    return load_videos(DatasetManifest.load(path))


# ---------------------------------------------------------------------------
# Commands


def cmd_make_data(args) -> int:
    manifest = make_shapes_dataset(
        args.videos, args.classes, args.frames, args.size, args.size, args.seed, args.out
    )
    print(
        f"wrote {len(manifest)} videos ({args.frames}x{args.size}x{args.size}, "
        f"{args.classes} classes, seed {args.seed}) to {args.out}"
    )
    return 0


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config, args.override)
    level = args.level
    manifest = cfg.manifest()
    spec = cfg.pyramid_spec()
    train_cfg = cfg.train_config()
    gen_cfg = cfg.gen_config(level)
    disc_cfg = cfg.disc_config(level)
    out_path = cfg.checkpoint_path(level)

    prev = [_load_checkpoint(cfg.checkpoint_path(l), l) for l in range(1, level)]
    resume = None
    if args.resume:
        resume = _load_checkpoint(out_path, level)

    evaluator = None
    if train_cfg.eval_every > 0:
        featnet = _load_featnet(cfg.featnet_path())
        evaluator = make_fvd_evaluator(featnet, manifest, spec, level, prev, train_cfg, gen_cfg)

    if level == 1:
        ckpt = train_level1(manifest, spec, gen_cfg, disc_cfg, train_cfg,
                            evaluator=evaluator, out_path=out_path, resume=resume)
    else:
        ckpt = train_uplevel(level, manifest, spec, prev, gen_cfg, disc_cfg, train_cfg,
                             evaluator=evaluator, out_path=out_path, resume=resume)
    hist = f", {len(ckpt.metric_history)} evaluations" if ckpt.metric_history else ""
    print(f"level {level}: {ckpt.iteration} iterations{hist} -> {out_path}")
    with open(out_path + ".history.json", "w") as f:
        json.dump(ckpt.metric_history, f, indent=1)
    return 0


def cmd_train_featnet(args) -> int:
    cfg = RunConfig.load(args.config, args.override)
    manifest = cfg.manifest()
    m = cfg.doc.get("metrics", {})
    fn_cfg = cfg.featnet_config()
    if fn_cfg.num_classes != manifest.num_classes:
        fn_cfg = FeatureNetConfig(fn_cfg.channels, fn_cfg.d_f, manifest.num_classes)
    net = train_feature_net(
        manifest, fn_cfg,
        iters=m.get("train_iters", 300),
        batch_size=m.get("batch_size", 16),
        seed=m.get("seed", 0),
    )
    path = cfg.featnet_path()
    save_archive(path, {"config": asdict(fn_cfg)}, state_dict_to_arrays(net, "featnet"))
    print(f"feature network trained on {len(manifest)} videos -> {path}")
    return 0


def _load_cascade(cfg: RunConfig, upto: int | None = None) -> CascadeHandle:
    n = upto or cfg.num_levels
    ckpts = [_load_checkpoint(cfg.checkpoint_path(l), l) for l in range(1, n + 1)]
    return CascadeHandle.from_checkpoints(ckpts)


def cmd_sample(args) -> int:
    cfg = RunConfig.load(args.config, args.override)
    handle = _load_cascade(cfg, args.levels)
    if args.cls is not None and cfg.gen_config(1).num_classes is None:
        print("error: --class given but the cascade is unconditional", file=sys.stderr)
        return EXIT_USAGE
    t1 = args.unroll_t or handle.native_t_out(0)
    prepare_cascade(handle, t1, passes=args.recompute_passes, batch_size=args.recompute_batch,
                    seed=args.seed)
    views = sample_cascade(handle, args.n, y=args.cls, seed=args.seed, t1=t1)
    write_samples(args.out, views, args.seed)
    shapes = " -> ".join("x".join(map(str, v.shape[1:])) for v in views)
    print(f"{args.n} samples, {unrolled_length(handle, t1)} frames unrolled: {shapes} -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = RunConfig.load(args.config, args.override)
    net = _load_featnet(cfg.featnet_path())
    generated = _load_generated(args.generated)
    reference = load_videos(cfg.manifest())
    report = evaluate_sets(net, generated, reference)
    if args.per_class and generated.labels is not None:
        by_class = {}
        for i, label in enumerate(generated.labels):
            by_class.setdefault(int(label), []).append(i)
        report.per_class = per_class_report(
            {k: generated.select(v) for k, v in by_class.items() if len(v) >= 2},
            cfg.manifest(), net,
        )
    report.save(args.out)
    print(f"IS {report.is_mean:.4f}  FID {report.fid:.4f}  FVD {report.fvd:.4f} -> {args.out}")
    return 0


def cmd_psd(args) -> int:
    videos = _load_generated(args.videos)
    frames = [int(x) for x in args.frames.split(",")]
    profiles = psd_profile(videos, frames)
    psd_profiles_to_csv(profiles, args.out)
    print(f"PSD profiles at frames {frames} over {len(videos)} videos -> {args.out}")
    return 0


def cmd_memreport(args) -> int:
    cfg = RunConfig.load(args.config, args.override)
    ts = [int(x) for x in args.t.split(",")]
    spec = cfg.pyramid_spec()
    input_hw = [None] * (cfg.num_levels + 1)
    hw = cfg.gen_config(1).output_hw
    for l in range(2, cfg.num_levels + 1):
        input_hw[l] = hw
        hw *= cfg.gen_config(l).k_s
    rows = []
    for t in ts:
        row = [t]
        t_level = t
        for l in range(1, cfg.num_levels + 1):
            gcfg = cfg.gen_config(l)
            if l > 1:
                t_level *= gcfg.k_t
            row.append(
                activation_memory_estimate(gcfg, t_level, args.batch, input_hw=input_hw[l])
            )
        rows.append(row)
    with open(args.out, "w") as f:
        headers = ["t1"] + [f"level{l}_bytes" for l in range(1, cfg.num_levels + 1)]
        f.write(",".join(headers) + "\n")
        for row in rows:
            f.write(",".join(str(x) for x in row) + "\n")
    print(f"memory report for T1 in {ts} (batch {args.batch}) -> {args.out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="videocascade", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("make-data", help="render the synthetic shapes dataset")
    d.add_argument("--out", required=True)
    d.add_argument("--videos", type=int, required=True)
    d.add_argument("--classes", type=int, default=8)
    d.add_argument("--frames", type=int, default=16)
    d.add_argument("--size", type=int, default=32)
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_make_data)

    t = sub.add_parser("train", help="train one cascade level")
    t.add_argument("--config", required=True)
    t.add_argument("--level", type=int, required=True)
    t.add_argument("--resume", action="store_true")
    t.add_argument("override", nargs="*", help="dotted-path config overrides")
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("train-featnet", help="train the evaluation feature network")
    f.add_argument("--config", required=True)
    f.add_argument("override", nargs="*")
    f.set_defaults(func=cmd_train_featnet)

    s = sub.add_parser("sample", help="sample the cascade, unrolled to any length")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=4)
    s.add_argument("--class", dest="cls", type=int, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--unroll-T", dest="unroll_t", type=int, default=None,
                   help="first-level frame count (default: training length)")
    s.add_argument("--levels", type=int, default=None, help="sample only levels 1..N")
    s.add_argument("--recompute-passes", type=int, default=200)
    s.add_argument("--recompute-batch", type=int, default=8)
    s.add_argument("override", nargs="*")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="IS/FID/FVD of generated samples against the dataset")
    e.add_argument("--config", required=True)
    e.add_argument("--generated", required=True, help="samples dir or dataset manifest")
    e.add_argument("--out", required=True)
    e.add_argument("--per-class", action="store_true")
    e.add_argument("override", nargs="*")
    e.set_defaults(func=cmd_eval)

    q = sub.add_parser("psd", help="radially averaged PSD profiles per frame index")
    q.add_argument("--videos", required=True, help="samples dir or dataset manifest")
    q.add_argument("--frames", required=True, help="comma-separated frame indices")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_psd)

    m = sub.add_parser("memreport", help="activation-memory estimates per level")
    m.add_argument("--config", required=True)
    m.add_argument("--T", dest="t", required=True, help="comma-separated first-level lengths")
    m.add_argument("--batch", type=int, default=8)
    m.add_argument("--out", required=True)
    m.add_argument("override", nargs="*")
    m.set_defaults(func=cmd_memreport)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except MissingPrerequisite as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except StateError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except (ConfigError, ValueError, KeyError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
