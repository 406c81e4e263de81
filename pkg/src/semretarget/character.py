"""Characters (skeleton + skinned mesh + limb chains) and the synthetic
humanoid generator used in place of a production asset library."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import torch
from scipy.spatial.transform import Rotation

from .geometry import capsule
from .render import Camera, default_cameras
from .sdf import SignedDistanceGrid, build_sdf
from .skeleton import Motion, Skeleton
from .skinning import BodyPartition, SkinnedMesh, partition_limbs


@dataclass
class Character:
    name: str
    skeleton: Skeleton
    mesh: SkinnedMesh
    limb_chains: list[list[str]] = field(default_factory=list)
    sdf_spacing: float | None = None

    @cached_property
    def partition(self) -> BodyPartition:
        return partition_limbs(self.mesh, self.skeleton, self.limb_chains)

    @cached_property
    def body_sdf(self) -> SignedDistanceGrid:
        """SDF of the bind-pose body, built once (torso treated as rigid)."""
        faces = self.mesh.faces[self.partition.body_face_ids]
        return build_sdf(self.mesh.vertices_bind, faces, spacing=self.sdf_spacing)

    @property
    def height(self) -> float:
        return self.skeleton.height

    def centroid(self) -> np.ndarray:
        v = self.mesh.vertices_bind
        return 0.5 * (v.min(0) + v.max(0))

    def cameras(self, image_size=128, views=("front", "left", "right")) -> list[Camera]:
        return default_cameras(self.centroid(), self.height, image_size=image_size, views=views)


# ---------------------------------------------------------------- synthetic humanoid

def _layout(n_joints: int) -> tuple[int, int]:
    """Split a joint budget into (spine joints above the root, joints per limb)."""
    if n_joints < 6:
        raise ValueError("synthetic characters need at least 6 joints")
    limb = min(3, (n_joints - 2) // 4)
    spine = n_joints - 1 - 4 * limb
    return spine, limb


def synthetic_proportions(seed: int) -> dict:
    rng = np.random.default_rng(seed)
    scale = rng.uniform(0.85, 1.15)
    torso_r = rng.uniform(0.11, 0.17) * scale
    limb_r = rng.uniform(0.035, 0.05) * scale
    return {
        "scale": scale,
        "torso_radius": torso_r,
        "limb_radius": limb_r,
        "torso_length": rng.uniform(0.42, 0.55) * scale,
        "neck": rng.uniform(0.08, 0.12) * scale,
        "head_radius": rng.uniform(0.09, 0.12) * scale,
        "shoulder_gap": rng.uniform(0.02, 0.05) * scale,
        "upper_arm": rng.uniform(0.24, 0.32) * scale,
        "forearm": rng.uniform(0.22, 0.30) * scale,
        "hip_width": rng.uniform(0.08, 0.11) * scale,
        "thigh": rng.uniform(0.38, 0.48) * scale,
        "shin": rng.uniform(0.36, 0.46) * scale,
    }


def make_synthetic_character(n_joints: int = 17, seed: int = 0, name: str | None = None,
                             proportions: dict | None = None, segments: int = 8) -> Character:
    """Capsule humanoid: spine column, two arms, two legs; y-up, facing +z.

    The torso is one closed capsule rigidly bound to the root and the head a
    separate closed sphere, so the body surface is watertight. Each limb bone
    is a capsule bound to its parent joint, blended with the child joint near
    the far end.
    """
    spine_n, limb_n = _layout(n_joints)
    p = dict(synthetic_proportions(seed))
    if proportions:
        p.update(proportions)
    rt, rl = p["torso_radius"], p["limb_radius"]

    names, parent, offsets = ["pelvis"], [-1], [np.zeros(3)]
    seg = p["torso_length"] / max(spine_n - 1, 1)
    spine_ids = [0]
    for k in range(spine_n):
        last = k == spine_n - 1 and spine_n > 1
        names.append("head" if last else f"spine{k}")
        parent.append(spine_ids[-1])
        offsets.append(np.array([0.0, p["neck"] + 0.02 if last else seg, 0.0]))
        spine_ids.append(len(names) - 1)
    chest = spine_ids[-2] if spine_n > 1 else spine_ids[-1]
    chest_y = sum(o[1] for o in offsets[:chest + 1])
    shoulder_x = rt + rl + p["shoulder_gap"]
    shoulder_y = chest_y - (0.02 if spine_n > 1 else 0.0)

    chains = []
    arm_lengths = [p["upper_arm"], p["forearm"], 0.0]
    leg_lengths = [p["thigh"], p["shin"], 0.0]
    limb_names = {"arm": ["shoulder", "elbow", "hand"], "leg": ["hip", "knee", "foot"]}
    for kind in ("arm", "leg"):
        for side, sgn in (("l", 1.0), ("r", -1.0)):
            chain = []
            for k in range(limb_n):
                nm = f"{side}_{limb_names[kind][3 - limb_n + k]}"
                if k == 0:
                    par = chest if kind == "arm" else 0
                    off = (np.array([sgn * shoulder_x, shoulder_y - chest_y, 0.0]) if kind == "arm"
                           else np.array([sgn * p["hip_width"], -0.06, 0.0]))
                else:
                    par = len(names) - 1
                    lengths = arm_lengths if kind == "arm" else leg_lengths
                    ln = lengths[3 - limb_n + k - 1]
                    off = (np.array([sgn * ln, 0.0, 0.0]) if kind == "arm"
                           else np.array([0.0, -ln, 0.0]))
                names.append(nm)
                parent.append(par)
                offsets.append(off)
                chain.append(nm)
            chains.append(chain)

    offsets = np.asarray(offsets)
    rest_tmp = Skeleton(names, parent, offsets, 1.0).rest_positions()
    height = float(rest_tmp[:, 1].max() + p["head_radius"] - (rest_tmp[:, 1].min() - rl))
    skel = Skeleton(names, parent, offsets, height)
    rest = skel.rest_positions()
    n = skel.n_joints

    verts, faces, weights = [], [], []

    def add(v, f, w):
        base = sum(len(x) for x in verts)
        verts.append(v)
        faces.append(f + base)
        weights.append(w)

    def rigid(nv, j):
        w = np.zeros((nv, n))
        w[:, j] = 1.0
        return w

    # torso: closed capsule between pelvis and chest, clear of the hip caps
    bottom = np.array([0.0, -0.06 + rl + 0.02 + rt, 0.0])
    top = np.array([0.0, max(rest[chest][1] - 0.01, bottom[1] + 0.05), 0.0])
    v, f, _ = capsule(bottom, top, rt, segments=max(segments, 8), cap_rings=3, body_rings=3)
    add(v, f, rigid(len(v), 0))
    # head: closed sphere-capsule bound to the top of the spine column
    if spine_n > 1:
        head = spine_ids[-1]
        hc = rest[head]
        v, f, _ = capsule(hc, hc + np.array([0.0, 0.02, 0.0]), p["head_radius"],
                          segments=max(segments, 8), cap_rings=3, body_rings=1)
        add(v, f, rigid(len(v), head))
    # limbs
    for chain in chains:
        ids = [skel.index(nm) for nm in chain]
        for a, b in zip(ids[:-1], ids[1:]):
            v, f, s = capsule(rest[a], rest[b], rl, segments=segments, cap_rings=2, body_rings=2)
            w = rigid(len(v), a)
            blend = np.clip((s - 0.85) / 0.15, 0.0, 1.0) * 0.5
            w[:, a] -= blend
            w[:, b] += blend
            add(v, f, w)
        end = ids[-1]
        is_arm = chain[0].endswith(("shoulder", "elbow", "hand"))
        tip = rest[end] + (np.array([np.sign(rest[end][0]) * 0.06, 0.0, 0.0]) if is_arm
                           else np.array([0.0, 0.0, 0.1]))
        v, f, _ = capsule(rest[end], tip, rl * 1.1, segments=segments, cap_rings=2, body_rings=1)
        add(v, f, rigid(len(v), end))

    mesh = SkinnedMesh.from_skeleton(skel, np.concatenate(verts), np.concatenate(faces),
                                     np.concatenate(weights))
    skel.height = float(np.ptp(mesh.vertices_bind[:, 1]))  # rest-pose bounding-box height
    return Character(name or f"synthetic_{seed}", skel, mesh, chains)


# ---------------------------------------------------------------- synthetic motion

POSES = ("t_pose", "arms_down", "arms_up", "wave", "hands_front", "arms_in", "step")


def _pose_rotvecs(skel: Skeleton, pose: str, rng) -> np.ndarray:
    """Local rotation vectors ``N x 3`` for a named key pose, lightly jittered."""
    rv = np.zeros((skel.n_joints, 3))
    j = {nm: i for i, nm in enumerate(skel.joint_names)}

    def arm(side, down, fwd=0.0, elbow=0.0):
        sgn = 1.0 if side == "l" else -1.0
        root = f"{side}_shoulder" if f"{side}_shoulder" in j else None
        if root is not None:
            rot = Rotation.from_rotvec([0, 0, -sgn * down]) * Rotation.from_rotvec([0, -sgn * fwd, 0])
            rv[j[root]] = rot.as_rotvec()
        if f"{side}_elbow" in j:
            rv[j[f"{side}_elbow"]] = [0, -sgn * elbow, 0]

    if pose == "arms_down":
        arm("l", 1.35); arm("r", 1.35)
    elif pose == "arms_up":
        arm("l", -1.2); arm("r", -1.2)
    elif pose == "wave":
        arm("l", 1.3); arm("r", -1.1, elbow=0.8)
    elif pose == "hands_front":
        arm("l", 0.3, fwd=1.2, elbow=0.4); arm("r", 0.3, fwd=1.2, elbow=0.4)
    elif pose == "arms_in":
        arm("l", 1.75, fwd=0.25); arm("r", 1.75, fwd=0.25)
    elif pose == "step":
        arm("l", 1.3, fwd=0.4); arm("r", 1.3, fwd=-0.4)
        for side, s in (("l", 1.0), ("r", -1.0)):
            if f"{side}_hip" in j:
                rv[j[f"{side}_hip"]] = [-0.5 * s, 0, 0]
            if f"{side}_knee" in j:
                rv[j[f"{side}_knee"]] = [0.4 * (s > 0), 0, 0]
    rv += rng.normal(scale=0.05, size=rv.shape)
    rv[skel.root] = [0.0, rng.normal(scale=0.1), 0.0]
    return rv


def rotvecs_to_rot6d(rv: np.ndarray) -> np.ndarray:
    mats = Rotation.from_rotvec(rv.reshape(-1, 3)).as_matrix()
    r6 = np.concatenate([mats[:, :, 0], mats[:, :, 1]], axis=-1)
    return r6.reshape(*rv.shape[:-1], 6)


def make_synthetic_motion(skel: Skeleton, frames: int = 128, seed: int = 0,
                          poses=None, key_every: int = 32, fps: float = 30.0) -> Motion:
    """Smoothly interpolated sequence of jittered key poses (deterministic per seed)."""
    rng = np.random.default_rng(seed)
    n_keys = frames // key_every + 2
    if poses is None:
        poses = [POSES[i] for i in rng.integers(0, len(POSES), n_keys)]
    poses = list(poses)
    while len(poses) < n_keys:
        poses.append(poses[-1])
    keys = Rotation.concatenate([Rotation.from_rotvec(_pose_rotvecs(skel, p, rng))
                                 for p in poses[:n_keys]])
    key_r = keys.as_quat().reshape(n_keys, skel.n_joints, 4)
    t = np.arange(frames) / key_every
    k0 = np.floor(t).astype(int)
    a = 0.5 - 0.5 * np.cos(np.pi * (t - k0))  # ease in/out
    q0, q1 = key_r[k0], key_r[k0 + 1]  # T x N x 4
    q1 = np.where((q0 * q1).sum(-1, keepdims=True) < 0, -q1, q1)
    q = (1 - a)[:, None, None] * q0 + a[:, None, None] * q1
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    rot6d = rotvecs_to_rot6d(Rotation.from_quat(q.reshape(-1, 4)).as_rotvec().reshape(frames, -1, 3))
    hip_h = -skel.rest_positions()[:, 1].min()
    root = np.zeros((frames, 3))
    root[:, 1] = hip_h + 0.01 * np.sin(2 * np.pi * np.arange(frames) / 40.0 + rng.uniform(0, 6))
    root[:, 0] = 0.02 * np.sin(2 * np.pi * np.arange(frames) / 90.0 + rng.uniform(0, 6))
    return Motion(rot6d, root, fps)


def as_torch(motion: Motion, dtype=torch.float32) -> Motion:
    return Motion(torch.as_tensor(np.asarray(motion.rot6d), dtype=dtype),
                  torch.as_tensor(np.asarray(motion.root_pos), dtype=dtype), motion.fps)
