"""Command-line entry point: ``mvmim <command> [options]``.

Every failure exits nonzero with one stderr line ``error[E_CODE]: message``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..backbone import BackboneConfig, init_backbone
from ..errors import ConfigError, MissingFileError, MvmimError
from ..geometry import gt_tracks
from ..masking import MaskConfig
from ..synthdata import SceneSpec, generate_scene, scene_seed
from .checkpoint import canonical_json
from .config import SEED_ENV, load_config, parse_flag_overrides
from .evaluate import (METHODS, ProbeConfig, bench_forward, dump_pca, eval_tracks, mask_stats, probe_pointmap,
                       sample_seeds)
from .io import load_scene, save_scene
from .train import load_state, pretrain


class UsageError(MvmimError):
    code = "E_USAGE"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit(obj) -> None:
    print(canonical_json(obj))


def _default_seed(value):
    if value is not None:
        return value
    return int(os.environ.get(SEED_ENV, "0"))


def scene_dirs(path) -> list[Path]:
    """A scene directory, or a directory whose sorted subdirectories are scenes."""
    p = Path(path)
    if not p.exists():
        raise MissingFileError(f"scene path not found: {p}")
    if (p / "cameras.txt").exists():
        return [p]
    subs = sorted(d for d in p.iterdir() if d.is_dir() and (d / "cameras.txt").exists())
    if not subs:
        raise MissingFileError(f"no scenes (cameras.txt) under {p}")
    return subs


def _state(args):
    if getattr(args, "checkpoint", None):
        return load_state(args.checkpoint)
    return init_backbone(BackboneConfig(), _default_seed(getattr(args, "seed", None)))


def cmd_pretrain(args, extra) -> int:
    overrides = parse_flag_overrides(extra)
    if args.seed is not None:
        overrides["train.seed"] = str(args.seed)
    cfg = load_config(args.config, overrides)
    res = pretrain(cfg, out_dir=args.out)
    _emit({"command": "pretrain", "steps": res.steps_done, "checkpoint": str(res.checkpoint_path),
           "metrics": res.final_metrics})
    return 0


def cmd_eval_tracks(args, extra) -> int:
    state = _state(args)
    scenes = [load_scene(d) for d in scene_dirs(args.scenes)]
    ev = eval_tracks(state, scenes, args.method, args.context_views, args.n_seeds, _default_seed(args.seed))
    _emit({"command": "eval-tracks", "method": args.method, "context_views": args.context_views,
           **ev.report(state.config.patch_size)})
    return 0


def cmd_probe(args, extra) -> int:
    state = load_state(args.checkpoint) if args.checkpoint else init_backbone(BackboneConfig(), args.backbone_seed)
    train = [load_scene(d) for d in scene_dirs(args.train_scenes)]
    evals = [load_scene(d) for d in scene_dirs(args.eval_scenes)]
    pcfg = ProbeConfig(steps=args.steps, lr=args.lr, seed=_default_seed(args.seed), feature_block=args.feature_block)
    res = probe_pointmap(state, train, evals, pcfg)
    _emit({"command": "probe-pointmap", **res.summary()})
    return 0


def cmd_bench(args, extra) -> int:
    state = _state(args)
    views = [int(v) for v in args.views.split(",")]
    rows = bench_forward(state, views, args.repeats)
    lines = [canonical_json({"schema": 1, "event": "bench", **r}) for r in rows]
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def cmd_dump_pca(args, extra) -> int:
    state = load_state(args.checkpoint)
    scene = load_scene(args.scene)
    paths = dump_pca(state, scene, args.out, args.block)
    _emit({"command": "dump-pca", "files": [str(p) for p in paths]})
    return 0


def cmd_gen_scenes(args, extra) -> int:
    seed = _default_seed(args.seed)
    template = SceneSpec(kind=args.kind, texture=args.texture, n_views=args.views, arc_span_deg=args.arc_span,
                         image_size=args.image_size)
    template.validate()
    out = Path(args.out)
    written = []
    for i in range(args.n):
        s = scene_seed(seed, i)
        batch = generate_scene(replace(template, seed=s))
        seeds = sample_seeds(batch.cameras[0], args.n_seeds, np.random.default_rng(s))
        d = save_scene(out / f"scene_{i:04d}", batch, gt_tracks(batch.cameras, seeds))
        written.append(str(d))
    _emit({"command": "gen-scenes", "scenes": written})
    return 0


def cmd_mask_stats(args, extra) -> int:
    cfg = MaskConfig(random_ratio=args.random_ratio, block_ratio=args.block_ratio, n_reference=args.n_reference)
    bcfg = BackboneConfig()
    if args.image_size % args.patch_size:
        raise ConfigError(f"patch size {args.patch_size} does not divide image size {args.image_size}")
    bcfg = replace(bcfg, image_size=args.image_size, patch_size=args.patch_size)
    stats = mask_stats(cfg, args.n, args.views, bcfg.grid, _default_seed(args.seed))
    _emit({"command": "mask-stats", "n_patches": bcfg.grid.n_patches, "stats": stats})
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mvmim", description="Multi-view masked image modeling toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("pretrain", help="train a backbone; extra --key value flags override config keys")
    s.add_argument("--config", help="config file with [train]/[model]/[mask]/[loss]/[scene] sections")
    s.add_argument("--out", default="run", help="output directory for log.jsonl and checkpoint.mske")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_pretrain, allow_extra=True)

    s = sub.add_parser("eval-tracks", help="zero-shot tracking on saved scenes")
    s.add_argument("--checkpoint", help="MSKE checkpoint (default: untrained toy backbone)")
    s.add_argument("--scenes", required=True)
    s.add_argument("--method", choices=METHODS, default="attention")
    s.add_argument("--context-views", type=int, default=0)
    s.add_argument("--n-seeds", type=int, default=16)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_eval_tracks)

    s = sub.add_parser("probe-pointmap", help="fit the pointmap/pose probe on a frozen backbone")
    s.add_argument("--checkpoint", help="MSKE checkpoint (default: random-init backbone)")
    s.add_argument("--backbone-seed", type=int, default=0)
    s.add_argument("--train-scenes", required=True)
    s.add_argument("--eval-scenes", required=True)
    s.add_argument("--steps", type=int, default=1000)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--feature-block", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("bench", help="median forward time per view count")
    s.add_argument("--checkpoint")
    s.add_argument("--views", default="1,2,4,8,16")
    s.add_argument("--repeats", type=int, default=3)
    s.add_argument("--out", help="also write the table as JSON lines")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("dump-pca", help="write PCA feature images per view")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--block", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_dump_pca)

    s = sub.add_parser("gen-scenes", help="render synthetic scenes to disk")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=10)
    s.add_argument("--kind", default="plane")
    s.add_argument("--texture", default="noise_smoothed")
    s.add_argument("--views", type=int, default=8)
    s.add_argument("--arc-span", type=float, default=40.0)
    s.add_argument("--image-size", type=int, default=64)
    s.add_argument("--n-seeds", type=int, default=32)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_gen_scenes)

    s = sub.add_parser("mask-stats", help="Monte-Carlo statistics of mask plans")
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--views", type=int, default=4)
    s.add_argument("--random-ratio", type=float, default=0.9)
    s.add_argument("--block-ratio", type=float, default=0.75)
    s.add_argument("--n-reference", type=int, default=1)
    s.add_argument("--image-size", type=int, default=64)
    s.add_argument("--patch-size", type=int, default=8)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_mask_stats)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        parser = build_parser()
        args, extra = parser.parse_known_args(argv)
        if extra and not getattr(args, "allow_extra", False):
            raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
        return args.func(args, extra)
    except MvmimError as exc:
        print(f"error[{exc.code}]: {' '.join(str(exc).split())}", file=sys.stderr)
        return 2
    except (IndexError, ValueError, OSError) as exc:
        print(f"error[E_INPUT]: {' '.join(str(exc).split())}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
