"""Skinned character meshes, linear blend skinning and the limb/body split."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
import torch

from .errors import ShapeMismatch, UnknownJoint
from .skeleton import Skeleton, global_transforms


@dataclass
class SkinnedMesh:
    vertices_bind: np.ndarray  # V x 3
    faces: np.ndarray  # F x 3
    weights: np.ndarray  # V x N, rows sum to one
    bind_inverse: np.ndarray  # N x 4 x 4

    def __post_init__(self):
        self.vertices_bind = np.asarray(self.vertices_bind, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bind_inverse = np.asarray(self.bind_inverse, dtype=np.float64)
        v = len(self.vertices_bind)
        if self.vertices_bind.shape != (v, 3) or self.weights.shape[0] != v:
            raise ShapeMismatch("vertices and weight rows disagree")
        if self.bind_inverse.shape != (self.weights.shape[1], 4, 4):
            raise ShapeMismatch("need one 4x4 bind inverse per joint")
        if np.any(self.weights < 0):
            raise ValueError("skinning weights must be nonnegative")
        bad = np.flatnonzero(np.abs(self.weights.sum(1) - 1.0) > 1e-5)
        if len(bad):
            raise ValueError(f"weights of vertex {bad[0]} do not sum to 1")
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= v):
            raise ValueError("face index out of range")
        if len(self.faces):
            a, b, c = (self.vertices_bind[self.faces[:, i]] for i in range(3))
            area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
            if np.mean(area <= 1e-12) > 0.01:
                raise ValueError("more than 1% of faces are degenerate")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices_bind)

    @classmethod
    def from_skeleton(cls, skel: Skeleton, vertices, faces, weights) -> "SkinnedMesh":
        """Bind the mesh to the skeleton's reference pose (identity local rotations)."""
        rest = skel.rest_positions()
        inv = np.tile(np.eye(4), (skel.n_joints, 1, 1))
        inv[:, :3, 3] = -rest
        return cls(vertices, faces, weights, inv)


@dataclass
class BodyPartition:
    limb_vertex_ids: np.ndarray
    body_face_ids: np.ndarray
    anchor_joint: int  # joint whose frame carries the rigid body for SDF queries


def rigid_transforms(R, t) -> torch.Tensor:
    """Stack rotations ``(..., 3, 3)`` and translations ``(..., 3)`` into 4x4."""
    top = torch.cat([R, t.unsqueeze(-1)], dim=-1)
    bottom = torch.zeros(*R.shape[:-2], 1, 4, dtype=R.dtype)
    bottom[..., 0, 3] = 1.0
    return torch.cat([top, bottom], dim=-2)


def pose_transforms(skel: Skeleton, rot6d, root_pos) -> torch.Tensor:
    """Global joint transforms ``(..., N, 4, 4)`` for a posed skeleton."""
    R, p = global_transforms(skel, rot6d, root_pos)
    return rigid_transforms(R, p)


def linear_blend_skinning(mesh: SkinnedMesh, joint_transforms) -> torch.Tensor:
    """Deform bind vertices by the weighted blend of ``T_j @ inv(B_j)``.

    ``joint_transforms`` has shape ``(..., N, 4, 4)``; the result is ``(..., V, 3)``.
    """
    T = torch.as_tensor(joint_transforms)
    dtype = T.dtype
    n = mesh.weights.shape[1]
    if T.shape[-3:] != (n, 4, 4):
        raise ShapeMismatch(f"expected (..., {n}, 4, 4) transforms, got {tuple(T.shape)}")
    bind_inv = torch.as_tensor(mesh.bind_inverse, dtype=dtype)
    M = (T @ bind_inv)[..., :3, :]  # (..., N, 3, 4)
    W = torch.as_tensor(mesh.weights, dtype=dtype)
    blended = torch.einsum("vn,...nij->...vij", W, M)
    v = torch.as_tensor(mesh.vertices_bind, dtype=dtype)
    return (blended[..., :3] @ v.unsqueeze(-1)).squeeze(-1) + blended[..., 3]


def skin_motion(skel: Skeleton, mesh: SkinnedMesh, rot6d, root_pos):
    """FK followed by LBS. Returns ``(vertices (..., V, 3), transforms (..., N, 4, 4))``."""
    T = pose_transforms(skel, rot6d, root_pos)
    return linear_blend_skinning(mesh, T), T


def partition_limbs(mesh: SkinnedMesh, skel: Skeleton,
                    limb_chains: Iterable[Iterable[str]]) -> BodyPartition:
    """Split vertices into limbs and body by their dominant skinning joint.

    A vertex is a limb vertex when its largest weight belongs to a joint in
    one of ``limb_chains``; body faces are those with no limb vertex.
    """
    limb_joints = set()
    for chain in limb_chains:
        for name in chain:
            if name not in skel.joint_names:
                raise UnknownJoint(name)
            limb_joints.add(skel.index(name))
    dominant = np.argmax(mesh.weights, axis=1)
    is_limb = np.isin(dominant, sorted(limb_joints))
    body_faces = np.flatnonzero(~is_limb[mesh.faces].any(axis=1))
    body_verts = np.unique(mesh.faces[body_faces]) if len(body_faces) else np.flatnonzero(~is_limb)
    if len(body_verts):
        anchor = int(np.argmax(mesh.weights[body_verts].sum(0)))
    else:
        anchor = skel.root
    return BodyPartition(np.flatnonzero(is_limb), body_faces, anchor)


def to_body_frame(points, joint_transforms, mesh: SkinnedMesh, anchor: int) -> torch.Tensor:
    """Map posed points back into the anchor joint's bind-pose frame.

    The body is treated as rigid with the anchor joint, so an SDF built on
    the bind-pose body can be queried at these coordinates.
    """
    T = torch.as_tensor(joint_transforms)
    A = T[..., anchor, :, :] @ torch.as_tensor(mesh.bind_inverse[anchor], dtype=T.dtype)
    R = A[..., :3, :3]
    t = A[..., :3, 3]
    # inverse rigid map: R^T (p - t), batched over leading dims
    return ((points - t.unsqueeze(-2)) @ R)
