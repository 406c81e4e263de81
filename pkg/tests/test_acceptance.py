"""Acceptance criteria 1-7.

Each test records one PASS/FAIL line (printed in the terminal summary) before
asserting, so a failing criterion is still reported with its measurements.
"""
import copy
import json
import time

import numpy as np
import pytest
import torch
from scipy.spatial.transform import Rotation

import conftest
from oracles import autograd, central_diff, rel_error
from semretarget import io
from semretarget.character import make_synthetic_character, make_synthetic_motion
from semretarget.cli import main
from semretarget.geometry import icosphere
from semretarget.losses import (adv_loss_discriminator, adv_loss_generator, cyc_loss, jdm_loss,
                                pen_loss, rec_loss, sem_loss)
from semretarget.metrics import EvalReport, evaluate, fid_metric
from semretarget.network import GraphConvLayer, RetargetModel, SkeletonGraph, graph_conv
from semretarget.render import default_cameras, render_views
from semretarget.sdf import SignedDistanceGrid, build_sdf, query_sdf
from semretarget.semantics import BEAM_WIDTH, LENGTH_PENALTY, PromptTemplate, VLMClient, guided_vqa
from semretarget.skeleton import (Motion, Skeleton, global_transforms, identity_rot6d,
                                  joint_distance_matrix, matrix_to_rot6d, normalize_jdm,
                                  rot6d_to_matrix)
from semretarget.skinning import SkinnedMesh, linear_blend_skinning, rigid_transforms
from semretarget.training import (PairContext, TrainConfig, direct_optimize, finetune, pretrain,
                                  retarget_tensors)
from test_render_semantics import _Stub


def record(n: int, ok: bool, detail: str):
    conftest.ACCEPTANCE_LINES[n] = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}"
    assert ok, conftest.ACCEPTANCE_LINES[n]


def t64(x):
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


# ---------------------------------------------------------------- 1. math oracles

def test_criterion_1_math_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    err = {}

    skel = Skeleton(["r", "a", "b", "c", "d"], [-1, 0, 1, 0, 3],
                    np.vstack([np.zeros(3), rng.normal(size=(4, 3))]), 1.0)
    r6, root = t64(rng.normal(size=(2, 5, 6))), t64(rng.normal(size=(2, 3)))
    w = t64(rng.normal(size=(2, 5, 3)))
    fk = lambda x: (global_transforms(skel, x, root)[1] * w).sum()  # noqa: E731
    err["fk"] = rel_error(autograd(fk, r6), central_diff(fk, r6))

    verts = rng.normal(size=(12, 3))
    W = rng.random((12, 5))
    W /= W.sum(1, keepdims=True)
    mesh = SkinnedMesh.from_skeleton(skel, verts, np.array([[0, 1, 2]]), W)
    wv = t64(rng.normal(size=(2, 12, 3)))

    def lbs(x):
        R, P = global_transforms(skel, x, root)
        return (linear_blend_skinning(mesh, rigid_transforms(R, P)) * wv).sum()

    err["lbs"] = rel_error(autograd(lbs, r6), central_diff(lbs, r6))

    P = t64(rng.normal(size=(2, 5, 3)))
    wj = t64(rng.normal(size=(2, 5, 5)))
    jd = lambda x: (normalize_jdm(joint_distance_matrix(x)) * wj).sum()  # noqa: E731
    err["jdm"] = rel_error(autograd(jd, P), central_diff(jd, P))

    sv, sf = icosphere(4)
    spacing = conftest.SPHERE_SPACING
    grid = build_sdf(sv, sf, spacing=spacing, margin=1.05)
    q = t64([[0.31, -0.42, 0.27], [0.12, 0.537, -0.33], [0.83, 0.41, 0.13]])
    sd = lambda x: query_sdf(grid, x)[0].sum()  # noqa: E731
    err["sdf"] = rel_error(autograd(sd, q), central_diff(sd, q))

    rv, rf = icosphere(2)
    cams = default_cameras([0, 0, 0], 1.0, image_size=24)
    wr = torch.randn(3, 24, 24, dtype=torch.float64)
    ren = lambda x: (render_views(x, rf, cams).images * wr).sum()  # noqa: E731
    V = t64(0.3 * rv)
    err["render"] = rel_error(autograd(ren, V), central_diff(ren, V))

    A, B = t64(rng.normal(size=(2, 4, 9))), t64(rng.normal(size=(2, 4, 9)))
    probs = t64(rng.uniform(0.1, 0.9, size=6))
    loss_fns = {
        "rec": (lambda x: rec_loss(x, B), A),
        "cyc": (lambda x: cyc_loss(x, B), A),
        "sem": (lambda x: sem_loss(x, B), A),
        "jdm_loss": (lambda x: jdm_loss(x, P.flip(0)), P),
        "adv_minimax": (lambda x: adv_loss_generator(x, "minimax"), probs),
        "adv_ns": (lambda x: adv_loss_generator(x, "nonsaturating"), probs),
        "adv_disc": (lambda x: adv_loss_discriminator(x, 1 - x.flip(0)), probs),
        "pen": (lambda x: pen_loss(grid, x), q[:2]),
    }
    for name, (fn, x) in loss_fns.items():
        err[name] = rel_error(autograd(fn, x), central_diff(fn, x))

    R = t64(Rotation.random(1000, random_state=1).as_matrix())
    rot_err = float((rot6d_to_matrix(matrix_to_rot6d(R)) - R).abs().max())

    pts = rng.uniform(-1.5, 1.5, size=(500, 3))
    phi = query_sdf(grid, t64(pts))[0].numpy()
    sphere_err = float(np.abs(phi - (np.linalg.norm(pts, axis=1) - 1.0)).max())

    D = joint_distance_matrix(P)
    eta_err = float((normalize_jdm(3.7 * D) - normalize_jdm(D)).abs().max())
    elapsed = time.perf_counter() - t0

    limits = {k: (1e-2 if k == "render" else 1e-3 if k == "sdf" else 1e-4) for k in err}
    bad = {k: v for k, v in err.items() if v >= limits[k]}
    ok = (not bad and rot_err < 1e-6 and sphere_err < spacing and eta_err < 1e-9 and elapsed < 120)
    worst = max(err, key=lambda k: err[k] / limits[k])
    record(1, ok, f"max FD rel err {worst}={err[worst]:.2e} (limit {limits[worst]:g}), "
                  f"rot round-trip {rot_err:.1e}, sphere SDF err {sphere_err:.3f} < {spacing}, "
                  f"eta scale err {eta_err:.1e}, {elapsed:.0f}s" + (f", failing {bad}" if bad else ""))


# ---------------------------------------------------------------- 2. invariances

def test_criterion_2_invariances():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    P = t64(rng.normal(size=(4, 7, 3)))
    jdm_vals = [float(jdm_loss(P, s * P)) for s in (0.5, 2.0, 7.0)]

    parent = [-1, 0, 1, 2, 1, 4, 0, 6]
    skel = Skeleton([f"j{i}" for i in range(8)], parent,
                    np.vstack([np.zeros(3), rng.normal(size=(7, 3))]), 1.0)
    g = SkeletonGraph.from_skeleton(skel, torch.float64)
    layer = GraphConvLayer(6, 6).double()
    with torch.no_grad():
        for p in layer.parameters():
            p.zero_()
    x = torch.randn(3, 8, 6, dtype=torch.float64)
    passthrough = torch.equal(graph_conv(x, g, layer), x)

    perm = [0, 6, 1, 4, 7, 2, 5, 3]
    pg = SkeletonGraph.from_skeleton(skel.permuted(perm), torch.float64)
    m = RetargetModel().double()
    Q = torch.randn(5, 8, 9, dtype=torch.float64)
    with torch.no_grad():
        Z, pZ = m.encode(Q, g), m.encode(Q[:, perm], pg)
        (r6, rt), (pr6, prt) = m.decode(Z, g), m.decode(pZ, pg)
    equiv = max(float((pZ - Z[:, perm]).abs().max()), float((pr6 - r6[:, perm]).abs().max()),
                float((prt - rt).abs().max()))

    X = rng.normal(size=(100, 4))
    fid_same = fid_metric(X, X)
    d = np.array([0.5, -1.0, 2.0, 0.0])
    fid_shift_err = abs(fid_metric(X, X + d) - float(d @ d))

    char = make_synthetic_character(n_joints=9, seed=2, segments=6)
    R, Pj = global_transforms(char.skeleton, identity_rot6d(1, 9), torch.zeros(1, 3, dtype=torch.float64))
    bind = linear_blend_skinning(char.mesh, rigid_transforms(R, Pj))[0].numpy()
    bind_err = float(np.abs(bind - char.mesh.vertices_bind).max())
    elapsed = time.perf_counter() - t0

    ok = (max(jdm_vals) < 1e-12 and passthrough and equiv < 1e-6 and fid_same < 1e-6
          and fid_shift_err < 1e-6 and bind_err < 1e-9 and elapsed < 60)
    record(2, ok, f"jdm(P,sP) max {max(jdm_vals):.1e}, zero-param pass-through {passthrough}, "
                  f"permutation err {equiv:.1e}, FID(X,X) {fid_same:.1e}, mean-shift err "
                  f"{fid_shift_err:.1e}, bind-pose err {bind_err:.1e}, {elapsed:.1f}s")


# ---------------------------------------------------------------- 3. pre-training

@pytest.fixture(scope="module")
def pair():
    src = make_synthetic_character(seed=0, name="a")
    tgt = make_synthetic_character(seed=1, name="fat",
                                   proportions={"torso_radius": 0.2, "shoulder_gap": 0.0})
    return src, tgt


@pytest.fixture(scope="module")
def pretrained(pair):
    src, tgt = pair
    clips = [[make_synthetic_motion(c.skeleton, frames=128, seed=10 * i + j) for j in range(4)]
             for i, c in enumerate(pair)]
    t0 = time.perf_counter()
    res = pretrain([src, tgt], clips, TrainConfig(stage="pretrain", epochs=100, max_steps=200, seed=0))
    return res, time.perf_counter() - t0


def _moving_average(values, end, width=10):
    return float(np.mean(values[end - width + 1:end + 1]))


@pytest.mark.slow
def test_criterion_3_pretraining(pretrained):
    res, elapsed = pretrained
    rec = [s["rec"] for s in res.step_losses]
    cyc = [s["cyc"] for s in res.step_losses]
    finite = all(np.isfinite(v) for s in res.step_losses for k, v in s.items()
                 if k not in ("source", "target"))
    rec0, rec1 = _moving_average(rec, 10), _moving_average(rec, len(rec) - 1)
    cyc0, cyc1 = _moving_average(cyc, 10), _moving_average(cyc, len(cyc) - 1)
    rec_drop, cyc_drop = 1 - rec1 / rec0, 1 - cyc1 / cyc0
    ok = res.steps == 200 and finite and rec_drop >= 0.8 and cyc_drop >= 0.5 and elapsed < 600
    record(3, ok, f"{res.steps} steps, rec MA10 {rec0:.4g} -> {rec1:.4g} ({100 * rec_drop:.1f}% drop, "
                  f">= 80%), cyc {cyc0:.4g} -> {cyc1:.4g} ({100 * cyc_drop:.1f}%, >= 50%), "
                  f"finite {finite}, {elapsed:.0f}s")


# ---------------------------------------------------------------- 4. fine-tuning

FT_IMAGE = 32


def _pair_scores(model, ctx, clip):
    """Per-frame penetration and SCL (mean over strided frames) of one clip."""
    k = ctx.cfg.sem_frame_stride
    r6 = torch.as_tensor(clip.rot6d, dtype=ctx.dtype)
    rp = torch.as_tensor(clip.root_pos, dtype=ctx.dtype)
    with torch.no_grad():
        out6, outp = retarget_tensors(model, ctx, r6, rp)
        verts, T = ctx.skin(ctx.tgt, out6, outp)
        pen = float(ctx.target_pen(verts, T)) / clip.frames
        E_b = ctx.render_embed(ctx.tgt, ctx.tgt_cams, verts[::k])
        E_a = ctx.source_embeddings(r6[::k], rp[::k])
        scl = float(((E_a - E_b) ** 2).sum(-1).mean())
    return pen, scl


@pytest.mark.slow
def test_criterion_4_finetuning(pair, pretrained):
    src, tgt = pair
    base = pretrained[0].model
    poses = ["arms_in", "arms_down", "arms_in", "hands_front"]
    clips = [make_synthetic_motion(src.skeleton, frames=64, seed=100 + i, poses=poses) for i in range(5)]
    cfg_full = TrainConfig(stage="finetune", image_size=FT_IMAGE)
    cfg_nosem = TrainConfig(stage="finetune", image_size=FT_IMAGE, weights={"sem": 0.0})
    ctx = PairContext(src, tgt, cfg_full)

    def scores(model):
        per_clip = np.array([_pair_scores(model, ctx, c) for c in clips])
        return tuple(per_clip.mean(0))

    pen0, scl0 = scores(base)
    t0 = time.perf_counter()
    full = finetune(copy.deepcopy(base), src, tgt, clips, cfg_full).model
    nosem = finetune(copy.deepcopy(base), src, tgt, clips, cfg_nosem).model
    elapsed = time.perf_counter() - t0
    pen_f, scl_f = scores(full)
    pen_n, scl_n = scores(nosem)

    pen_drop, scl_drop, pen_drop_n = 1 - pen_f / pen0, 1 - scl_f / scl0, 1 - pen_n / pen0
    ok = (pen0 > 0 and scl_drop >= 0.5 and pen_drop >= 0.9 and pen_drop_n >= 0.9
          and scl_n > scl_f and elapsed < 900)
    record(4, ok, f"initial pen/frame {pen0:.4g}, SCL {scl0:.4g}; full objective: pen -{100 * pen_drop:.1f}%"
                  f" (>= 90%), SCL {scl_f:.4g} (-{100 * scl_drop:.1f}%, >= 50%); lambda_s=0: pen "
                  f"-{100 * pen_drop_n:.1f}%, SCL {scl_n:.4g} > {scl_f:.4g}; {elapsed:.0f}s")


# ---------------------------------------------------------------- 5. direct optimisation

def _pen_of(motion, tgt):
    ctx = PairContext(tgt, tgt, TrainConfig(stage="finetune"), dtype=torch.float64)
    m = motion.numpy()
    with torch.no_grad():
        verts, T = ctx.skin(ctx.tgt, torch.as_tensor(m.rot6d), torch.as_tensor(m.root_pos))
        return float(ctx.target_pen(verts, T))


@pytest.mark.slow
def test_criterion_5_direct_optimization(pair):
    src, tgt = pair
    cfg = TrainConfig(stage="finetune", image_size=FT_IMAGE)
    init = make_synthetic_motion(tgt.skeleton, frames=4, seed=3, poses=["arms_in"] * 3)
    src_motion = make_synthetic_motion(src.skeleton, frames=4, seed=3, poses=["arms_in"] * 3)
    ctx = PairContext(src, tgt, cfg, dtype=torch.float64)
    m = src_motion.numpy()
    ref = ctx.source_embeddings(torch.as_tensor(m.rot6d[::4]), torch.as_tensor(m.root_pos[::4]))
    t0 = time.perf_counter()
    res = direct_optimize(init, tgt, ref, cfg)
    elapsed = time.perf_counter() - t0
    pen0, pen1 = _pen_of(init, tgt), _pen_of(res.motion, tgt)

    # a loss-optimal input: a T-pose whose reference is its own render
    still = Motion(identity_rot6d(2, tgt.skeleton.n_joints).numpy(),
                   np.tile([0.0, -tgt.skeleton.rest_positions()[:, 1].min(), 0.0], (2, 1)))
    tctx = PairContext(tgt, tgt, cfg, dtype=torch.float64)
    s = still.numpy()
    own = tctx.source_embeddings(torch.as_tensor(s.rot6d[::4]), torch.as_tensor(s.root_pos[::4]))
    fixed = direct_optimize(still, tgt, own, TrainConfig(stage="finetune", image_size=FT_IMAGE,
                                                          direct_iters=20))
    change = max(float(np.abs(fixed.motion.rot6d - s.rot6d).max()),
                 float(np.abs(fixed.motion.root_pos - s.root_pos).max()))
    ok = pen0 > 0 and pen1 < 0.01 * pen0 and change < 1e-4 and max(fixed.losses) == 0.0
    record(5, ok, f"arm-in-torso pen {pen0:.4g} -> {pen1:.4g} (< 1% of initial) in "
                  f"{cfg.direct_iters} iterations ({elapsed:.0f}s); fixed point loss "
                  f"{max(fixed.losses):.1e}, max parameter change {change:.1e} < 1e-4")


# ---------------------------------------------------------------- 6. protocol conformance

def test_criterion_6_protocol(tmp_path, monkeypatch):
    stub = _Stub()
    try:
        views = list(torch.rand(3, 16, 16))
        answer = guided_vqa(views, PromptTemplate(), VLMClient(stub.url, retries=0))
        reqs = list(stub.requests)
    finally:
        stub.close()
    r1, r2 = reqs if len(reqs) == 2 else (reqs + [{}, {}])[:2]
    protocol_ok = (len(reqs) == 2 and r1.get("prompt") == PromptTemplate().q1
                   and r2.get("prompt") == PromptTemplate().round2("near the hips")
                   and all(r.get("beam_width") == 5 and r.get("length_penalty") == 1.0 for r in reqs)
                   and BEAM_WIDTH == 5 and LENGTH_PENALTY == 1.0 and answer == "standing")

    monkeypatch.delenv("SEMRETARGET_VLM_ENDPOINT", raising=False)
    a = make_synthetic_character(n_joints=9, seed=2, name="a", segments=6)
    b = make_synthetic_character(n_joints=9, seed=5, name="b", segments=6)
    io.save_character(a, tmp_path / "a.json")
    io.save_character(b, tmp_path / "b.json")
    io.save_pair(tmp_path / "pair.json", tmp_path / "a.json", tmp_path / "b.json")
    io.save_motion(make_synthetic_motion(a.skeleton, frames=8, seed=1), tmp_path / "m.json", "a")
    io.save_checkpoint(tmp_path / "c.ckpt", RetargetModel())
    code = main(["evaluate", "--checkpoint", str(tmp_path / "c.ckpt"), "--pair", str(tmp_path / "pair.json"),
                 "--motions", str(tmp_path / "m.json"), "--image-size", "16",
                 "--out", str(tmp_path / "r.json")])
    itm = json.loads((tmp_path / "r.json").read_text())["itm"] if code == 0 else "missing"
    ok = protocol_ok and code == 0 and itm is None
    record(6, ok, f"two-round VQA {'conforms' if protocol_ok else 'DEVIATES'} "
                  f"(round-2 prompt {r2.get('prompt')!r}, beam 5, length penalty 1); "
                  f"evaluate without endpoint: exit {code}, itm {itm}")


# ---------------------------------------------------------------- 7. determinism and persistence

def test_criterion_7_determinism_and_persistence(tmp_path):
    a = make_synthetic_character(n_joints=9, seed=2, name="a", segments=6)
    b = make_synthetic_character(n_joints=9, seed=5, name="b", segments=6)
    clips = [[make_synthetic_motion(c.skeleton, frames=40, seed=i) for i in range(2)] for c in (a, b)]
    runs = [pretrain([a, b], clips, TrainConfig(max_steps=5, batch_size=4, seed=3)) for _ in range(2)]
    same_losses = runs[0].step_losses == runs[1].step_losses
    same_params = all(torch.equal(v, runs[1].model.state_dict()[k])
                      for k, v in runs[0].model.state_dict().items())
    fts = [finetune(copy.deepcopy(runs[0].model), a, b, [clips[0][0]],
                    TrainConfig(stage="finetune", image_size=16, epochs=1, seed=3)) for _ in range(2)]
    same_ft = fts[0].step_losses == fts[1].step_losses and all(
        torch.equal(v, fts[1].model.state_dict()[k]) for k, v in fts[0].model.state_dict().items())
    bit_repro = same_losses and same_params and same_ft

    model = runs[0].model
    io.save_checkpoint(tmp_path / "c.ckpt", model, runs[0].discriminator, step=5)
    loaded, _, _ = io.load_checkpoint(tmp_path / "c.ckpt")
    ctx = PairContext(a, b, TrainConfig(stage="finetune"))
    r6 = torch.as_tensor(clips[0][0].rot6d, dtype=torch.float32)
    rp = torch.as_tensor(clips[0][0].root_pos, dtype=torch.float32)
    with torch.no_grad():
        o1, o2 = retarget_tensors(model, ctx, r6, rp), retarget_tensors(loaded, ctx, r6, rp)
    ckpt_ok = torch.equal(o1[0], o2[0]) and torch.equal(o1[1], o2[1])

    formats = {}
    io.save_character(a, tmp_path / "a.json")
    a2 = io.load_character(tmp_path / "a.json")
    formats["character"] = (np.array_equal(a2.mesh.vertices_bind, a.mesh.vertices_bind)
                            and np.array_equal(a2.mesh.weights, a.mesh.weights)
                            and np.array_equal(a2.skeleton.offsets, a.skeleton.offsets)
                            and a2.limb_chains == a.limb_chains)
    mo = clips[0][1]
    io.save_motion(mo, tmp_path / "m.json")
    m2 = io.load_motion(tmp_path / "m.json")
    formats["motion_json"] = np.array_equal(m2.rot6d, mo.rot6d) and np.array_equal(m2.root_pos, mo.root_pos)
    io.save_motion(mo, tmp_path / "m.bin")
    m3 = io.load_motion(tmp_path / "m.bin")
    formats["motion_bin"] = (np.array_equal(m3.rot6d, mo.rot6d.astype(np.float32))
                             and np.array_equal(m3.root_pos, mo.root_pos.astype(np.float32)))
    io.save_pair(tmp_path / "p.json", tmp_path / "a.json", tmp_path / "a.json", checkpoint_id="c")
    formats["pair"] = io.load_pair(tmp_path / "p.json")[2] == "c"
    grid = a.body_sdf
    grid.save(tmp_path / "a.sdf")
    g2 = SignedDistanceGrid.load(tmp_path / "a.sdf")
    f32 = np.float32
    formats["sdf"] = (np.array_equal(g2.values, grid.values.astype(f32))
                      and np.array_equal(g2.origin, grid.origin.astype(f32))
                      and g2.spacing == f32(grid.spacing))
    rep = evaluate(model, a, b, [Motion(mo.rot6d[:8], mo.root_pos[:8])], image_size=16)
    rep.save(tmp_path / "r.json")
    formats["report"] = EvalReport.load(tmp_path / "r.json") == rep

    ok = bit_repro and ckpt_ok and all(formats.values())
    record(7, ok, f"bit-reproducible pretrain/finetune {bit_repro}, checkpoint forward identical "
                  f"{ckpt_ok}, round trips {formats}")


# ---------------------------------------------------------------- evaluate example after pre-training

@pytest.mark.slow
def test_identity_pair_after_pretraining_beats_untrained(pair, pretrained):
    src, _ = pair
    clip = make_synthetic_motion(src.skeleton, frames=16, seed=7)
    rep = evaluate(pretrained[0].model, src, src, [clip], image_size=32)
    untrained = evaluate(RetargetModel(), src, src, [clip], image_size=32)
    assert rep.mse_global < untrained.mse_global and rep.scl < untrained.scl


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="a 200-step desk-scale model does not reproduce its input "
                                       "exactly, so identity-pair renders differ and SCL > 0")
def test_identity_pair_after_pretraining_has_zero_scl(pair, pretrained):
    src, _ = pair
    clip = make_synthetic_motion(src.skeleton, frames=16, seed=7)
    assert evaluate(pretrained[0].model, src, src, [clip], image_size=32).scl == 0.0
