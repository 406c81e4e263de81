"""Command-line entry point: ``semretarget <subcommand> [options]``.

Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np
import torch

from . import io
from .errors import (BackendNotDifferentiable, DataEmpty, PairMismatch,
                     SchemaViolation, ShapeMismatch, UnknownJoint)
from .semantics import ENDPOINT_ENV, MockEmbedder, VLMClient, VLMEmbedder

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

_INVALID = (SchemaViolation, PairMismatch, ShapeMismatch, UnknownJoint, DataEmpty,
            BackendNotDifferentiable, ValueError, FileNotFoundError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _existing(flag: str, path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{flag}: file not found: {p}")
    return p


# ---------------------------------------------------------------- config

def _train_config(args, stage: str):
    from .training import TrainConfig

    doc = {}
    if args.config:
        doc = io.load_config(_existing("--config", args.config))
        if not isinstance(doc, dict):
            raise SchemaViolation(f"{args.config}: config must be a table/object")
        doc = dict(doc)
        doc.setdefault("stage", stage)
        if doc["stage"] != stage:
            raise ValueError(f"--config: stage {doc['stage']!r} does not match subcommand {stage!r}")
    else:
        doc["stage"] = stage
    return TrainConfig.from_dict(doc, seed=args.seed, views=args.views,
                                 deterministic=args.deterministic,
                                 max_steps=getattr(args, "max_steps", None),
                                 epochs=getattr(args, "epochs", None),
                                 image_size=getattr(args, "image_size", None),
                                 log_path=getattr(args, "log", None))


def _embedder(args):
    if getattr(args, "embedder", "mock") == "vlm":
        client = VLMClient.from_env(args.vlm_endpoint)
        if client is None:
            raise ValueError(f"--embedder vlm needs --vlm-endpoint or {ENDPOINT_ENV}")
        return VLMEmbedder(client)
    return MockEmbedder()


def _load_motions(flag: str, paths):
    return [io.load_motion(_existing(flag, p)) for p in paths]


def _pair(args):
    return io.load_pair(_existing("--pair", args.pair))


def _checkpoint(args):
    return io.load_checkpoint(_existing("--checkpoint", args.checkpoint))


def _out(args) -> Path:
    if not args.out:
        raise ValueError("--out is required")
    out = Path(args.out)
    if not out.parent.exists():
        raise FileNotFoundError(f"--out: directory does not exist: {out.parent}")
    return out


# ---------------------------------------------------------------- subcommands

def cmd_make_character(args):
    from .character import make_synthetic_character

    out = _out(args)
    char = make_synthetic_character(n_joints=args.joints, seed=args.seed or 0, name=args.name)
    char.body_sdf  # fails loudly if the generated body is not watertight
    io.save_character(char, out)
    print(f"wrote {out} ({char.skeleton.n_joints} joints, {char.mesh.n_vertices} vertices)")


def cmd_pretrain(args):
    from .training import pretrain

    out = _out(args)
    cfg = _train_config(args, "pretrain")
    chars = [io.load_character(_existing("--characters", p)) for p in args.characters]
    by_name = {c.name: i for i, c in enumerate(chars)}
    if len(by_name) != len(chars):
        raise ValueError("--characters: character names must be unique")
    motions = [[] for _ in chars]
    for p in args.motions:
        name = io.motion_character_name(_existing("--motions", p))
        if name not in by_name:
            raise ValueError(f"--motions: {p} names character {name!r}, not among --characters")
        motions[by_name[name]].append(io.load_motion(p))
    res = pretrain(chars, motions, cfg)
    io.save_checkpoint(out, res.model, res.discriminator, res.steps,
                       meta={"id": out.stem, "stage": "pretrain", "characters": list(by_name),
                             "config": cfg.to_dict()})
    print(f"wrote {out} after {res.steps} steps")


def cmd_finetune(args):
    from .training import finetune

    out = _out(args)
    cfg = _train_config(args, "finetune")
    model, _, payload = _checkpoint(args)
    src, tgt, _ = _pair(args)
    clips = _load_motions("--motions", args.motions)
    res = finetune(model, src, tgt, clips, cfg, _embedder(args))
    io.save_checkpoint(out, res.model, None, payload.get("step", 0) + res.steps,
                       meta={"id": out.stem, "stage": "finetune", "parent": payload["meta"].get("id"),
                             "pair": [src.name, tgt.name], "config": cfg.to_dict()})
    print(f"wrote {out} after {res.steps} steps")


def cmd_retarget(args):
    from .training import retarget

    out = _out(args)
    model, _, payload = _checkpoint(args)
    src, tgt, ckpt_id = _pair(args)
    if ckpt_id and payload["meta"].get("id") not in (None, ckpt_id):
        logging.warning("pair expects checkpoint %r, got %r", ckpt_id, payload["meta"].get("id"))
    motion = io.load_motion(_existing("--source", args.source))
    result = retarget(model, motion, src, tgt)
    io.save_motion(result, out, character=tgt.name)
    print(f"wrote {out} ({result.frames} frames)")


def cmd_optimize(args):
    from .training import PairContext, direct_optimize

    out = _out(args)
    cfg = _train_config(args, "finetune")
    if args.iters is not None:
        cfg.direct_iters = args.iters
    src, tgt, _ = _pair(args)
    initial = io.load_motion(_existing("--motion", args.motion))
    reference = io.load_motion(_existing("--source", args.source))
    if reference.frames != initial.frames:
        raise ValueError("--source and --motion must have the same frame count")
    embedder = _embedder(args)
    if cfg.weights.sem > 0 and not embedder.differentiable:
        raise BackendNotDifferentiable(f"--embedder {args.embedder} cannot provide gradients")
    ctx = PairContext(src, tgt, cfg, embedder, dtype=torch.float64)
    ref = reference.numpy()
    k = cfg.sem_frame_stride
    E_ref = ctx.source_embeddings(torch.as_tensor(ref.rot6d[::k]), torch.as_tensor(ref.root_pos[::k]))
    res = direct_optimize(initial, tgt, E_ref, cfg, embedder)
    io.save_motion(res.motion, out, character=tgt.name)
    print(f"wrote {out}: loss {res.losses[0]:.6g} -> {res.best_losses[-1]:.6g} "
          f"(best iterate {res.best_iteration})")


def cmd_evaluate(args):
    from .metrics import evaluate

    out = _out(args)
    model, _, _ = _checkpoint(args)
    src, tgt, _ = _pair(args)
    clips = _load_motions("--motions", args.motions)
    gt = _load_motions("--ground-truth", args.ground_truth) if args.ground_truth else None
    client = VLMClient.from_env(args.vlm_endpoint)
    report = evaluate(model, src, tgt, clips, gt, embedder=_embedder(args), client=client,
                      image_size=args.image_size or 128, views=args.views or 3)
    report.save(out)
    itm = "null" if report.itm is None else f"{report.itm:.4f}"
    print(f"wrote {out}: mse {report.mse_global:.4g}, pen {report.pen_percent:.3g}%, "
          f"scl {report.scl:.4g}, itm {itm}")


def cmd_render(args):
    from PIL import Image

    from .render import render_views
    from .skinning import skin_motion

    out = Path(args.out) if args.out else None
    if out is None:
        raise ValueError("--out is required")
    if out.exists() and not out.is_dir():
        raise ValueError(f"--out: {out} exists and is not a directory")
    if not out.parent.exists():
        raise FileNotFoundError(f"--out: directory does not exist: {out.parent}")
    motion = io.load_motion(_existing("--motion", args.motion))
    char = io.load_character(_existing("--character", args.character))
    if motion.n_joints != char.skeleton.n_joints:
        raise PairMismatch(f"motion has {motion.n_joints} joints, character {char.skeleton.n_joints}")
    views = ("front", "left", "right")[:args.views or 3]
    cams = char.cameras(args.image_size or 128, views)
    m = motion.numpy()

    staging = Path(tempfile.mkdtemp(prefix=".render-", dir=out.parent))
    try:
        for t0 in range(0, m.frames, 16):
            with torch.no_grad():
                verts, _ = skin_motion(char.skeleton, char.mesh, torch.as_tensor(m.rot6d[t0:t0 + 16]),
                                    torch.as_tensor(m.root_pos[t0:t0 + 16]))
                imgs = render_views(verts, char.mesh.faces, cams).images.numpy()
            for i, frame in enumerate(imgs):
                for name, img in zip(views, frame):
                    pix = np.clip(np.rint((1.0 - img) * 255), 0, 255).astype(np.uint8)
                    Image.fromarray(pix, mode="L").save(staging / f"frame{t0 + i:05d}_{name}.png")
        out.mkdir(exist_ok=True)
        for f in sorted(staging.iterdir()):
            f.replace(out / f.name)
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    print(f"wrote {m.frames * len(views)} images to {out}")


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML or JSON file with TrainConfig fields")
    common.add_argument("--seed", type=int, help="random seed (overrides the config)")
    common.add_argument("--out", help="output path")
    common.add_argument("--vlm-endpoint", default=os.environ.get(ENDPOINT_ENV),
                        help=f"vision-language service URL (default: ${ENDPOINT_ENV})")
    common.add_argument("--views", type=int, choices=(1, 2, 3), help="number of camera views")
    common.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                        help="single-threaded, bit-reproducible execution")
    common.add_argument("--image-size", type=int, help="render resolution in pixels")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="semretarget",
                     description="Skeleton-aware motion retargeting with semantic and geometric fine-tuning.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("make-character", parents=[common], help="write a synthetic humanoid")
    p.add_argument("--joints", type=int, default=17)
    p.add_argument("--name")
    p.set_defaults(func=cmd_make_character)

    p = sub.add_parser("pretrain", parents=[common], help="skeleton-aware pre-training")
    p.add_argument("--characters", nargs="+", required=True, help="character files (>= 2)")
    p.add_argument("--motions", nargs="+", required=True,
                   help="motion files; each names its character in the 'character' field")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--log", help="JSON-lines training log")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", parents=[common], help="per-pair semantic/geometric fine-tuning")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pair", required=True)
    p.add_argument("--motions", nargs="+", required=True, help="source character clips")
    p.add_argument("--embedder", choices=("mock", "vlm"), default="mock")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--log", help="JSON-lines training log")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("retarget", parents=[common], help="retarget a source motion")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pair", required=True)
    p.add_argument("--source", required=True, help="source motion file")
    p.set_defaults(func=cmd_retarget)

    p = sub.add_parser("optimize", parents=[common], help="direct joint-angle optimisation")
    p.add_argument("--pair", required=True)
    p.add_argument("--motion", required=True, help="initial target motion")
    p.add_argument("--source", required=True, help="source motion providing reference renders")
    p.add_argument("--embedder", choices=("mock", "vlm"), default="mock")
    p.add_argument("--iters", type=int)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on a pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pair", required=True)
    p.add_argument("--motions", nargs="+", required=True, help="source clips")
    p.add_argument("--ground-truth", nargs="+", help="target reference motions, one per clip")
    p.add_argument("--embedder", choices=("mock", "vlm"), default="mock")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("render", parents=[common], help="write per-frame silhouette PNGs")
    p.add_argument("--motion", required=True)
    p.add_argument("--character", required=True)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except _INVALID as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # runtime failure: training divergence, service errors, I/O
        logging.debug("traceback", exc_info=True)
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
