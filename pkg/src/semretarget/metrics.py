"""Evaluation metrics and the per-pair evaluation report."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from .errors import DataEmpty, InsufficientSamples, ShapeMismatch
from .render import render_views
from .sdf import SignedDistanceGrid, query_sdf
from .semantics import MockEmbedder, PromptTemplate, guided_vqa
from .skeleton import Motion, global_transforms
from .skinning import BodyPartition, to_body_frame
from .training import PairContext, TrainConfig, retarget

REPORT_SCHEMA_VERSION = 1
FID_EPS = 1e-6


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def mse_metric(P_hat, P_gt, h: float, local: bool = False) -> float:
    """Height-normalised squared joint error, averaged over frames and joints.

    ``P_hat`` and ``P_gt`` are ``(T, N, 3)`` (or ``(N, 3)``). In local mode
    each pose is first translated so that its root (joint 0) sits at the
    origin.
    """
    a, b = _np(P_hat), _np(P_gt)
    if a.shape != b.shape or a.shape[-1] != 3:
        raise ShapeMismatch(f"joint positions differ: {a.shape} vs {b.shape}")
    if not h > 0:
        raise ValueError("character height must be positive")
    if local:
        a = a - a[..., :1, :]
        b = b - b[..., :1, :]
    return float(((a - b) ** 2).sum(-1).mean() / h)


def pen_metric(grid: SignedDistanceGrid, partition: BodyPartition, vertices) -> float:
    """Percentage of mesh vertices inside the body, averaged over frames.

    ``vertices`` are ``(T, V, 3)`` (or ``(V, 3)``) in the body SDF's frame.
    Only limb vertices are tested; the denominator is every vertex.
    """
    v = torch.as_tensor(_np(vertices))
    if v.ndim == 2:
        v = v.unsqueeze(0)
    limbs = torch.as_tensor(np.asarray(partition.limb_vertex_ids, dtype=np.int64))
    with torch.no_grad():
        phi, _ = query_sdf(grid, v[:, limbs])
    inside = (phi < 0).sum(-1).double()
    return float((100.0 * inside / v.shape[1]).mean())


def _sqrt_psd(S: np.ndarray) -> np.ndarray:
    w, U = np.linalg.eigh(0.5 * (S + S.T))
    return (U * np.sqrt(np.clip(w, 0.0, None))) @ U.T


def fid_metric(E_src, E_tgt) -> float:
    """Frechet distance between Gaussian fits of two embedding sets ``(n, K)``."""
    a, b = _np(E_src), _np(E_tgt)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeMismatch(f"embedding sets must be (n, K) with equal K: {a.shape}, {b.shape}")
    if len(a) < 2 or len(b) < 2:
        raise InsufficientSamples(f"need >= 2 samples per side, got {len(a)} and {len(b)}")
    eye = FID_EPS * np.eye(a.shape[1])
    mu_a, mu_b = a.mean(0), b.mean(0)
    S_a = np.cov(a, rowvar=False).reshape(a.shape[1], -1) + eye
    S_b = np.cov(b, rowvar=False).reshape(b.shape[1], -1) + eye
    r = _sqrt_psd(S_a)
    cross = _sqrt_psd(r @ S_b @ r)
    val = float(((mu_a - mu_b) ** 2).sum() + np.trace(S_a) + np.trace(S_b) - 2.0 * np.trace(cross))
    return max(val, 0.0)


def scl_metric(E_src, E_tgt) -> float:
    """Mean over frames of the squared embedding distance."""
    a, b = _np(E_src), _np(E_tgt)
    if a.shape != b.shape:
        raise ShapeMismatch(f"embeddings differ: {a.shape} vs {b.shape}")
    return float(((a - b) ** 2).sum(-1).mean())


# ---------------------------------------------------------------- report

@dataclass
class EvalReport:
    mse_global: float
    mse_local: float
    pen_percent: float
    fid: float | None
    scl: float
    itm: float | None
    itm_status: str = "ok"
    embedder: str = ""
    clips: list[dict] = field(default_factory=list)
    schema_version: int = REPORT_SCHEMA_VERSION

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        from .io import _validate

        _validate(doc, "report", "<report>")
        return cls(**doc)

    def save(self, path) -> None:
        from .io import _validate, _write_json

        doc = self.to_dict()
        _validate(doc, "report", str(path))
        _write_json(doc, path)

    @classmethod
    def load(cls, path) -> "EvalReport":
        from .io import _read_json

        return cls.from_dict(_read_json(path))


def copy_baseline(source_motion: Motion, source, target) -> Motion:
    """Reference target motion: source rotations copied, root path scaled by height ratio."""
    m = source_motion.numpy()
    return Motion(m.rot6d.copy(), m.root_pos * (target.height / source.height), m.fps)


def evaluate(model, source, target, clips: Sequence[Motion],
             ground_truth: Sequence[Motion] | None = None, embedder=None, client=None,
             image_size: int = 128, views: int = 3, sem_frame_stride: int = 4,
             tau_scale: float = 1e-2) -> EvalReport:
    """Retarget every clip and score it on skeleton, geometry and semantics.

    ``ground_truth`` optionally gives one target motion per clip; without it
    the copy baseline (:func:`copy_baseline`) is the reference. ``client`` is
    an optional :class:`~semretarget.semantics.VLMClient` used for ITM; when
    it is None the ITM field is null.
    """
    if not clips:
        raise DataEmpty("evaluation needs at least one clip")
    if ground_truth is not None and len(ground_truth) != len(clips):
        raise ShapeMismatch(f"{len(ground_truth)} ground-truth motions for {len(clips)} clips")
    embedder = embedder or MockEmbedder()
    cfg = TrainConfig(stage="finetune", image_size=image_size, views=views,
                      sem_frame_stride=sem_frame_stride, tau_scale=tau_scale)
    ctx = PairContext(source, target, cfg, embedder, dtype=torch.float64)
    k = sem_frame_stride
    rows, all_src, all_tgt, itms = [], [], [], []
    for i, clip in enumerate(clips):
        out = retarget(model, clip, source, target)
        gt = (ground_truth[i] if ground_truth is not None else copy_baseline(clip, source, target)).numpy()
        src = clip.numpy()
        r6, rp = torch.as_tensor(out.rot6d), torch.as_tensor(out.root_pos)
        s6, sp = torch.as_tensor(src.rot6d), torch.as_tensor(src.root_pos)
        with torch.no_grad():
            _, P_out = global_transforms(target.skeleton, r6, rp)
            _, P_gt = global_transforms(target.skeleton, torch.as_tensor(gt.rot6d),
                                        torch.as_tensor(gt.root_pos))
            verts, T = ctx.skin(ctx.tgt, r6, rp)
            body = to_body_frame(verts, T, target.mesh, target.partition.anchor_joint)
            src_render = render_views(ctx.skin(ctx.src, s6[::k], sp[::k])[0], source.mesh.faces,
                                      ctx.src_cams, tau_scale=tau_scale)
            tgt_render = render_views(verts[::k], target.mesh.faces, ctx.tgt_cams, tau_scale=tau_scale)
            E_src, E_tgt = _np(embedder(src_render)), _np(embedder(tgt_render))
        row = {
            "clip": i,
            "frames": out.frames,
            "mse_global": mse_metric(P_out, P_gt, target.height),
            "mse_local": mse_metric(P_out, P_gt, target.height, local=True),
            "pen_percent": pen_metric(target.body_sdf, target.partition, body),
            "scl": scl_metric(E_src, E_tgt),
        }
        if client is not None:
            scores = []
            for s_views, t_views in zip(src_render.images, tgt_render.images):
                text = guided_vqa(list(s_views), PromptTemplate(), client)
                scores.append(client.itm(list(t_views), text))
            row["itm"] = float(np.mean(scores))
            itms.append(row["itm"])
        rows.append(row)
        all_src.append(E_src)
        all_tgt.append(E_tgt)

    weights = np.array([r["frames"] for r in rows], dtype=np.float64)

    def mean(key):
        return float(np.average([r[key] for r in rows], weights=weights))

    E_a, E_b = np.concatenate(all_src), np.concatenate(all_tgt)
    return EvalReport(
        mse_global=mean("mse_global"), mse_local=mean("mse_local"),
        pen_percent=mean("pen_percent"),
        fid=fid_metric(E_a, E_b) if len(E_a) >= 2 else None,
        scl=scl_metric(E_a, E_b),
        itm=float(np.mean(itms)) if itms else None,
        itm_status="ok" if client is not None else "backend unavailable",
        embedder=getattr(embedder, "backend_id", type(embedder).__name__), clips=rows)
