"""Two-stage training (skeleton-aware pre-training, semantics/geometry
fine-tuning), inference-time retargeting and direct joint-angle optimisation."""
from __future__ import annotations

import json
import logging
import math
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import losses as L
from .character import Character
from .errors import (BackendNotDifferentiable, DataEmpty, DivergenceDetected,
                     PairMismatch)
from .network import Discriminator, RetargetModel, SkeletonGraph
from .render import render_views
from .semantics import MockEmbedder
from .skeleton import Motion, global_transforms
from .skinning import linear_blend_skinning, rigid_transforms, to_body_frame

log = logging.getLogger(__name__)

STAGE_DEFAULTS = {
    "pretrain": {"lr": 3e-4, "epochs": 80, "batch_size": 16},
    "finetune": {"lr": 1e-4, "epochs": 25, "batch_size": 4},
}


@dataclass
class TrainConfig:
    stage: str = "pretrain"
    lr: float | None = None
    epochs: int | None = None
    batch_size: int | None = None
    window_T: int = 32
    seed: int = 0
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    pen_ramp: L.PenRamp = field(default_factory=L.PenRamp)
    sem_frame_stride: int = 4
    views: int = 3
    image_size: int = 128
    tau_scale: float = 1e-2
    adv_convention: str = "nonsaturating"
    max_steps: int | None = None
    deterministic: bool = True
    direct_iters: int = 200
    direct_lr: float = 1e-2
    log_path: str | None = None

    def __post_init__(self):
        if self.stage not in STAGE_DEFAULTS:
            raise ValueError(f"unknown stage {self.stage!r}")
        for key, value in STAGE_DEFAULTS[self.stage].items():
            if getattr(self, key) is None:
                setattr(self, key, value)
        if isinstance(self.weights, dict):
            self.weights = L.LossWeights(**self.weights)
        if isinstance(self.pen_ramp, dict):
            self.pen_ramp = L.PenRamp(**self.pen_ramp)
        if not (self.lr > 0 and self.epochs > 0 and self.batch_size > 0 and self.window_T > 0):
            raise ValueError("lr, epochs, batch_size and window_T must be positive")
        if self.sem_frame_stride < 1 or not 1 <= self.views <= 3:
            raise ValueError("sem_frame_stride must be >= 1 and views in 1..3")
        if self.adv_convention not in ("minimax", "nonsaturating"):
            raise ValueError(f"unknown adversarial convention {self.adv_convention!r}")

    @classmethod
    def from_dict(cls, doc: dict, **overrides) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        merged = {**doc, **{k: v for k, v in overrides.items() if v is not None}}
        return cls(**merged)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: RetargetModel
    discriminator: Discriminator | None
    step_losses: list[dict]
    epoch_log: list[dict]
    steps: int


# ---------------------------------------------------------------- helpers

@contextmanager
def deterministic_mode(enabled: bool):
    if not enabled:
        yield
        return
    prev_threads = torch.get_num_threads()
    prev_det = torch.are_deterministic_algorithms_enabled()
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.set_num_threads(prev_threads)
        torch.use_deterministic_algorithms(prev_det)


class CharacterTensors:
    """Per-character constants cached in the training dtype."""

    def __init__(self, char: Character, dtype=torch.float32):
        self.char = char
        self.skel = char.skeleton
        self.graph = SkeletonGraph.from_skeleton(char.skeleton, dtype)
        self.dtype = dtype

    def features(self, rot6d, root_pos):
        """Node features (rot6d || FK position) and global transforms."""
        R, P = global_transforms(self.skel, rot6d, root_pos)
        return torch.cat([rot6d, P], dim=-1), R, P


def _clip_tensors(clips: Sequence[Motion], dtype):
    out = []
    for m in clips:
        r6 = torch.as_tensor(np.asarray(m.rot6d) if not isinstance(m.rot6d, torch.Tensor) else m.rot6d)
        rp = torch.as_tensor(np.asarray(m.root_pos) if not isinstance(m.root_pos, torch.Tensor) else m.root_pos)
        out.append((r6.to(dtype), rp.to(dtype)))
    return out


def _check_finite(named: dict, step: int):
    vals = {k: float(v.detach()) if isinstance(v, torch.Tensor) else float(v) for k, v in named.items()}
    bad = {k: v for k, v in vals.items() if not math.isfinite(v)}
    if bad:
        raise DivergenceDetected(f"non-finite loss at step {step}: {bad}")


def _guarded_step(opt, params, step: int, what: str):
    for p in params:
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise DivergenceDetected(f"non-finite {what} gradient at step {step}")
    opt.step()


class _JsonlLog:
    def __init__(self, path):
        self.fh = open(path, "w") if path else None

    def write(self, rec: dict):
        if self.fh:
            self.fh.write(json.dumps(rec) + "\n")
            self.fh.flush()

    def close(self):
        if self.fh:
            self.fh.close()


def _window_starts(lengths: Sequence[int], T: int, stride: int) -> list[tuple[int, int]]:
    """Every (clip, start) whose window fits; starts are multiples of ``stride``."""
    out = []
    for ci, n in enumerate(lengths):
        if n < T:
            continue
        out.extend((ci, s) for s in range(0, n - T + 1, stride))
    return out


# ---------------------------------------------------------------- pre-training

def pretrain(characters: Sequence[Character], motions: Sequence[Sequence[Motion]],
             cfg: TrainConfig | None = None, model: RetargetModel | None = None,
             on_step: Callable[[int, dict], None] | None = None) -> TrainResult:
    """Skeleton-aware pre-training on unpaired clips of several characters.

    ``motions[i]`` holds the clips of ``characters[i]``. Each step retargets a
    batch of windows from a source character A to a different character B,
    takes one generator step on the weighted rec/cyc/adv/jdm objective and
    then one discriminator step.
    """
    cfg = cfg or TrainConfig(stage="pretrain")
    if len(characters) < 2 or len(motions) != len(characters):
        raise DataEmpty("pre-training needs clips for at least two characters")
    n_joints = {c.skeleton.n_joints for c in characters}
    if len(n_joints) != 1:
        raise PairMismatch("all characters must share the joint count and hierarchy order")
    T = cfg.window_T
    dtype = torch.float32
    with deterministic_mode(cfg.deterministic):
        torch.manual_seed(cfg.seed)
        rng = np.random.default_rng(cfg.seed)
        model = model or RetargetModel()
        disc = Discriminator()
        chars = [CharacterTensors(c, dtype) for c in characters]
        clips = [_clip_tensors(ms, dtype) for ms in motions]
        windows = [_window_starts([r.shape[0] for r, _ in cl], T, 1) for cl in clips]
        if any(not w for w in windows):
            raise DataEmpty(f"every character needs at least one clip of >= {T} frames")
        # features of real clips never change
        feats = [[ct.features(r, p)[0] for r, p in cl] for ct, cl in zip(chars, clips)]
        n_windows = sum(sum(r.shape[0] // T for r, _ in cl) for cl in clips)
        steps_per_epoch = max(1, math.ceil(n_windows / cfg.batch_size))
        total_steps = cfg.epochs * steps_per_epoch
        if cfg.max_steps is not None:
            total_steps = min(total_steps, cfg.max_steps)

        opt_g = torch.optim.Adam(model.parameters(), lr=cfg.lr)
        opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr)
        w = cfg.weights
        logger = _JsonlLog(cfg.log_path)
        step_losses, epoch_log = [], []
        t0 = time.perf_counter()

        def batch(ci):
            picks = rng.integers(0, len(windows[ci]), cfg.batch_size)
            return torch.stack([feats[ci][windows[ci][k][0]][windows[ci][k][1]:windows[ci][k][1] + T]
                                for k in picks])

        step = 0
        epoch_acc: dict[str, list[float]] = {}
        while step < total_steps:
            a = int(rng.integers(0, len(chars)))
            b = int((a + 1 + rng.integers(0, len(chars) - 1)) % len(chars))
            A, B = chars[a], chars[b]
            Q_A = batch(a)
            Q_B_real = batch(b)

            Z_A = model.encode(Q_A, A.graph)
            r6, root = model.decode(Z_A, A.graph)
            Q_rec = A.features(r6, root)[0]
            r6_b, root_b = model.decode(Z_A, B.graph)
            Q_B, _, P_B = B.features(r6_b, root_b)
            r6_c, root_c = model(Q_B, B.graph, A.graph)
            Q_cyc = A.features(r6_c, root_c)[0]
            probs = disc(Q_B, B.graph)
            parts = {
                "rec": L.rec_loss(Q_rec, Q_A),
                "cyc": L.cyc_loss(Q_cyc, Q_A),
                "adv": L.adv_loss_generator(probs, cfg.adv_convention),
                "jdm": L.jdm_loss(Q_A[..., 6:], P_B),
            }
            total = L.total_pretrain_loss(parts, w)
            _check_finite({**parts, "total": total}, step)
            opt_g.zero_grad(set_to_none=True)
            total.backward()
            _guarded_step(opt_g, model.parameters(), step, "generator")

            d_loss = L.adv_loss_discriminator(disc(Q_B_real, B.graph), disc(Q_B.detach(), B.graph))
            _check_finite({"disc": d_loss}, step)
            opt_d.zero_grad(set_to_none=True)
            d_loss.backward()
            _guarded_step(opt_d, disc.parameters(), step, "discriminator")

            rec = {k: float(v.detach()) for k, v in parts.items()}
            rec.update(total=float(total.detach()), disc=float(d_loss.detach()), source=a, target=b)
            step_losses.append(rec)
            for k in ("rec", "cyc", "adv", "jdm", "disc", "total"):
                epoch_acc.setdefault(k, []).append(rec[k])
            if on_step:
                on_step(step, rec)
            step += 1
            if step % steps_per_epoch == 0 or step == total_steps:
                entry = {
                    "epoch": (step - 1) // steps_per_epoch,
                    "losses": {k: float(np.mean(v)) for k, v in epoch_acc.items()},
                    "lambda_effective": {"rec": w.rec, "cyc": w.cyc, "adv": w.adv, "jdm": w.jdm},
                    "wall_time": time.perf_counter() - t0,
                }
                epoch_log.append(entry)
                logger.write(entry)
                log.info("pretrain epoch %d: %s", entry["epoch"], entry["losses"])
                epoch_acc = {}
        logger.close()
    return TrainResult(model, disc, step_losses, epoch_log, step)


# ---------------------------------------------------------------- fine-tuning

class PairContext:
    """Everything fine-tuning and evaluation need about a source/target pair."""

    def __init__(self, source: Character, target: Character, cfg: TrainConfig, embedder=None,
                 dtype=torch.float32):
        if source.skeleton.n_joints != target.skeleton.n_joints:
            raise PairMismatch(
                f"source has {source.skeleton.n_joints} joints, target {target.skeleton.n_joints}")
        self.cfg = cfg
        self.dtype = dtype
        self.src = CharacterTensors(source, dtype)
        self.tgt = CharacterTensors(target, dtype)
        self.embedder = embedder or MockEmbedder()
        views = ("front", "left", "right")[:cfg.views]
        self.src_cams = source.cameras(cfg.image_size, views)
        self.tgt_cams = target.cameras(cfg.image_size, views)
        self.tgt_limbs = torch.as_tensor(target.partition.limb_vertex_ids)

    def skin(self, ct: CharacterTensors, rot6d, root_pos):
        R, P = global_transforms(ct.skel, rot6d, root_pos)
        T = rigid_transforms(R, P)
        return linear_blend_skinning(ct.char.mesh, T), T

    def render_embed(self, ct: CharacterTensors, cams, verts):
        frame = render_views(verts, ct.char.mesh.faces, cams, tau_scale=self.cfg.tau_scale)
        return self.embedder(frame)

    def embed_motion(self, ct, cams, rot6d, root_pos):
        verts, _ = self.skin(ct, rot6d, root_pos)
        return self.render_embed(ct, cams, verts)

    def target_pen(self, verts, T):
        char = self.tgt.char
        body = to_body_frame(verts, T, char.mesh, char.partition.anchor_joint)
        return L.pen_loss(char.body_sdf, body[..., self.tgt_limbs, :])

    def source_embeddings(self, rot6d, root_pos, chunk: int = 32):
        with torch.no_grad():
            outs = [self.embed_motion(self.src, self.src_cams, rot6d[i:i + chunk], root_pos[i:i + chunk])
                    for i in range(0, rot6d.shape[0], chunk)]
        return torch.cat(outs)


def retarget_tensors(model: RetargetModel, ctx: PairContext, rot6d, root_pos):
    Q_A = ctx.src.features(rot6d, root_pos)[0]
    return model(Q_A, ctx.src.graph, ctx.tgt.graph)


def finetune(model: RetargetModel, source: Character, target: Character,
             clips: Sequence[Motion], cfg: TrainConfig | None = None, embedder=None,
             on_epoch: Callable[[int, dict], None] | None = None) -> TrainResult:
    """Per-pair fine-tuning on ``lambda_s * L_sem + lambda_p(epoch) * L_pen``.

    Each step retargets a batch of source windows, skins and renders the
    target at every ``sem_frame_stride``-th frame, embeds the views and
    compares them with the source's embeddings; penetration is measured on
    every frame. One epoch visits every stride-aligned window start once.
    """
    cfg = cfg or TrainConfig(stage="finetune")
    embedder = embedder or MockEmbedder()
    if cfg.weights.sem > 0 and not getattr(embedder, "differentiable", False):
        raise BackendNotDifferentiable(
            f"embedder {getattr(embedder, 'backend_id', embedder)!r} cannot provide gradients")
    if not clips:
        raise DataEmpty("fine-tuning needs at least one source clip")
    T, k = cfg.window_T, cfg.sem_frame_stride
    with deterministic_mode(cfg.deterministic):
        torch.manual_seed(cfg.seed)
        rng = np.random.default_rng(cfg.seed)
        ctx = PairContext(source, target, cfg, embedder)
        data = _clip_tensors(clips, ctx.dtype)
        for r6, _ in data:
            if r6.shape[1] != source.skeleton.n_joints:
                raise PairMismatch("clip joint count differs from the source skeleton")
        windows = _window_starts([r.shape[0] for r, _ in data], T, k)
        if not windows:
            raise DataEmpty(f"no clip has >= {T} frames")
        feats = [ctx.src.features(r, p)[0] for r, p in data]
        need_sem = cfg.weights.sem > 0
        src_emb = [ctx.source_embeddings(r[::k], p[::k]) if need_sem else None for r, p in data]
        sem_idx = torch.arange(0, T, k)

        opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
        steps_per_epoch = max(1, math.ceil(len(windows) / cfg.batch_size))
        logger = _JsonlLog(cfg.log_path)
        step_losses, epoch_log = [], []
        t0 = time.perf_counter()
        step = 0
        for epoch in range(cfg.epochs):
            lam_p = cfg.pen_ramp.weight(epoch)
            order = rng.permutation(len(windows))
            acc: dict[str, list[float]] = {}
            for s in range(steps_per_epoch):
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
                picks = [windows[i] for i in order[s * cfg.batch_size:(s + 1) * cfg.batch_size]]
                Q_A = torch.stack([feats[c][st:st + T] for c, st in picks])
                r6_b, root_b = model(Q_A, ctx.src.graph, ctx.tgt.graph)
                verts, Tf = ctx.skin(ctx.tgt, r6_b, root_b)
                parts = {"pen": ctx.target_pen(verts, Tf)}
                if need_sem:
                    E_A = torch.stack([src_emb[c][st // k: st // k + len(sem_idx)] for c, st in picks])
                    E_B = ctx.render_embed(ctx.tgt, ctx.tgt_cams, verts[:, sem_idx])
                    parts["sem"] = L.sem_loss(E_A, E_B)
                else:
                    parts["sem"] = torch.zeros((), dtype=ctx.dtype)
                total = L.total_finetune_loss(parts, cfg.weights, pen_weight=lam_p)
                _check_finite({**parts, "total": total}, step)
                opt.zero_grad(set_to_none=True)
                total.backward()
                _guarded_step(opt, model.parameters(), step, "generator")
                rec = {"sem": float(parts["sem"].detach()), "pen": float(parts["pen"].detach()),
                       "total": float(total.detach()), "epoch": epoch}
                step_losses.append(rec)
                for key in ("sem", "pen", "total"):
                    acc.setdefault(key, []).append(rec[key])
                step += 1
            if not acc:
                break
            entry = {"epoch": epoch, "losses": {key: float(np.mean(v)) for key, v in acc.items()},
                     "lambda_effective": {"sem": cfg.weights.sem, "pen": lam_p},
                     "wall_time": time.perf_counter() - t0}
            epoch_log.append(entry)
            logger.write(entry)
            log.info("finetune epoch %d: %s", epoch, entry["losses"])
            if on_epoch:
                on_epoch(epoch, entry)
        logger.close()
    return TrainResult(model, None, step_losses, epoch_log, step)


# ---------------------------------------------------------------- inference

def retarget(model: RetargetModel, source_motion: Motion, source: Character,
             target: Character) -> Motion:
    """Map a source motion onto the target skeleton (deterministic, no grad)."""
    if source.skeleton.n_joints != target.skeleton.n_joints:
        raise PairMismatch(
            f"source has {source.skeleton.n_joints} joints, target {target.skeleton.n_joints}")
    if source_motion.n_joints != source.skeleton.n_joints:
        raise PairMismatch("motion joint count differs from the source skeleton")
    dtype = next(model.parameters()).dtype
    src = CharacterTensors(source, dtype)
    tgt = CharacterTensors(target, dtype)
    r6 = torch.as_tensor(np.asarray(source_motion.numpy().rot6d), dtype=dtype)
    rp = torch.as_tensor(np.asarray(source_motion.numpy().root_pos), dtype=dtype)
    with torch.no_grad():
        out_r6, out_root = model(src.features(r6, rp)[0], src.graph, tgt.graph)
    return Motion(out_r6.double().numpy(), out_root.double().numpy(), source_motion.fps)


@dataclass
class DirectResult:
    motion: Motion
    losses: list[float]  # loss of every iterate
    best_losses: list[float]  # best-so-far, non-increasing
    best_iteration: int


def direct_optimize(initial: Motion, target: Character, reference_embeddings,
                    cfg: TrainConfig | None = None, embedder=None) -> DirectResult:
    """Optimise joint angles and root positions directly on the fine-tuning objective.

    ``reference_embeddings`` holds one embedding per ``sem_frame_stride``-th
    frame of ``initial`` (e.g. from source renders or video frames).
    Returns the iterate with the lowest loss.
    """
    cfg = cfg or TrainConfig(stage="finetune")
    embedder = embedder or MockEmbedder()
    if cfg.weights.sem > 0 and not getattr(embedder, "differentiable", False):
        raise BackendNotDifferentiable(
            f"embedder {getattr(embedder, 'backend_id', embedder)!r} cannot provide gradients")
    dtype = torch.float64
    ct = CharacterTensors(target, dtype)
    ctx_cams = target.cameras(cfg.image_size, ("front", "left", "right")[:cfg.views])
    limbs = torch.as_tensor(target.partition.limb_vertex_ids)
    init = initial.numpy()
    r6 = torch.tensor(init.rot6d, dtype=dtype, requires_grad=True)
    rp = torch.tensor(init.root_pos, dtype=dtype, requires_grad=True)
    k = cfg.sem_frame_stride
    E_ref = torch.as_tensor(np.asarray(reference_embeddings), dtype=dtype)
    opt = torch.optim.Adam([r6, rp], lr=cfg.direct_lr)

    def objective():
        R, P = global_transforms(ct.skel, r6, rp)
        Tf = rigid_transforms(R, P)
        verts = linear_blend_skinning(target.mesh, Tf)
        body = to_body_frame(verts, Tf, target.mesh, target.partition.anchor_joint)
        pen = L.pen_loss(target.body_sdf, body[..., limbs, :])
        total = cfg.weights.pen * pen
        if cfg.weights.sem > 0:
            frame = render_views(verts[::k], target.mesh.faces, ctx_cams, tau_scale=cfg.tau_scale)
            total = total + cfg.weights.sem * L.sem_loss(E_ref, embedder(frame))
        return total

    best = (math.inf, init.rot6d.copy(), init.root_pos.copy(), -1)
    losses, best_losses = [], []
    with deterministic_mode(cfg.deterministic):
        for it in range(cfg.direct_iters + 1):
            loss = objective()
            val = float(loss.detach())
            _check_finite({"direct": val}, it)
            losses.append(val)
            if val < best[0]:
                best = (val, r6.detach().numpy().copy(), rp.detach().numpy().copy(), it)
            best_losses.append(best[0])
            if it == cfg.direct_iters:
                break
            opt.zero_grad(set_to_none=True)
            loss.backward()
            _guarded_step(opt, [r6, rp], it, "direct")
    return DirectResult(Motion(best[1], best[2], initial.fps), losses, best_losses, best[3])
