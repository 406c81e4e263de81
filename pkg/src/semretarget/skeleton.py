"""Skeleton and motion containers, the 6D rotation representation, forward
kinematics and joint distance matrices.

All tensor math is written in torch so that it stays differentiable; numpy
inputs are accepted and converted on the way in.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .errors import DegenerateRotation, NotARotation, ShapeMismatch

GS_EPS = 1e-8
JDM_EPS = 1e-8


def _as_tensor(x, dtype=None):
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype or torch.float64)


@dataclass
class Skeleton:
    """Joint hierarchy in its reference pose.

    ``offsets[j]`` is joint ``j`` relative to its parent, expressed in the
    parent's frame. The root carries a zero offset and parent ``-1``.
    """

    joint_names: list[str]
    parent: np.ndarray
    offsets: np.ndarray
    height: float
    _order: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.parent = np.asarray(self.parent, dtype=np.int64)
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        self.joint_names = list(self.joint_names)
        n = len(self.joint_names)
        if self.parent.shape != (n,) or self.offsets.shape != (n, 3):
            raise ShapeMismatch(
                f"parent {self.parent.shape} / offsets {self.offsets.shape} "
                f"do not match {n} joint names")
        if len(set(self.joint_names)) != n:
            raise ValueError("joint names must be unique")
        roots = np.flatnonzero(self.parent == -1)
        if len(roots) != 1:
            raise ValueError(f"expected exactly one root, found {len(roots)}")
        if np.any((self.parent < -1) | (self.parent >= n)):
            raise ValueError("parent index out of range")
        if not np.all(np.isfinite(self.offsets)):
            raise ValueError("offsets must be finite")
        if np.any(self.offsets[roots[0]] != 0.0):
            raise ValueError("root offset must be the zero vector")
        if not self.height > 0:
            raise ValueError("height must be positive")
        self._order = self._topological_order()

    def _topological_order(self) -> np.ndarray:
        n = self.n_joints
        children = [[] for _ in range(n)]
        for j, p in enumerate(self.parent):
            if p >= 0:
                children[p].append(j)
        order = [self.root]
        for j in order:
            order.extend(children[j])
        if len(order) != n:
            raise ValueError("parent array contains a cycle")
        return np.asarray(order, dtype=np.int64)

    @property
    def n_joints(self) -> int:
        return len(self.joint_names)

    @property
    def root(self) -> int:
        return int(np.flatnonzero(self.parent == -1)[0])

    @property
    def order(self) -> np.ndarray:
        """Joint indices sorted so that every parent precedes its children."""
        return self._order

    def index(self, name: str) -> int:
        return self.joint_names.index(name)

    def edges(self) -> list[tuple[int, int]]:
        """(parent, child) pairs, one per bone."""
        return [(int(p), j) for j, p in enumerate(self.parent) if p >= 0]

    def rest_positions(self) -> np.ndarray:
        pos = np.zeros((self.n_joints, 3))
        for j in self._order:
            p = self.parent[j]
            if p >= 0:
                pos[j] = pos[p] + self.offsets[j]
        return pos

    def permuted(self, perm: Sequence[int]) -> "Skeleton":
        """Relabel joints so that new joint ``k`` is old joint ``perm[k]``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        parent = np.where(self.parent[perm] >= 0, inv[self.parent[perm]], -1)
        return Skeleton([self.joint_names[i] for i in perm], parent,
                        self.offsets[perm], self.height)


@dataclass
class Motion:
    """Per-frame local joint rotations (6D) plus root translation.

    Fields may hold numpy arrays or torch tensors.
    """

    rot6d: object  # T x N x 6
    root_pos: object  # T x 3
    fps: float = 30.0

    def __post_init__(self):
        r, p = self.rot6d, self.root_pos
        if r.ndim != 3 or r.shape[-1] != 6:
            raise ShapeMismatch(f"rot6d must be T x N x 6, got {tuple(r.shape)}")
        if p.shape != (r.shape[0], 3):
            raise ShapeMismatch(
                f"root_pos must be {r.shape[0]} x 3, got {tuple(p.shape)}")
        if r.shape[0] < 1:
            raise ShapeMismatch("a motion needs at least one frame")
        if not self.fps > 0:
            raise ValueError("fps must be positive")

    @property
    def frames(self) -> int:
        return int(self.rot6d.shape[0])

    @property
    def n_joints(self) -> int:
        return int(self.rot6d.shape[1])

    def numpy(self) -> "Motion":
        def cv(x):
            return x.detach().cpu().numpy() if isinstance(x, torch.Tensor) else np.asarray(x)
        return Motion(cv(self.rot6d).astype(np.float64),
                      cv(self.root_pos).astype(np.float64), float(self.fps))

    def slice(self, start: int, stop: int) -> "Motion":
        return Motion(self.rot6d[start:stop], self.root_pos[start:stop], self.fps)


# ---------------------------------------------------------------- rotations

def rot6d_to_matrix(r6) -> torch.Tensor:
    """Map ``(..., 6)`` vectors to ``(..., 3, 3)`` rotations by Gram-Schmidt.

    The two 3-vector halves become the first two matrix columns after
    orthonormalisation; the third column is their cross product.
    """
    r6 = _as_tensor(r6)
    a1, a2 = r6[..., :3], r6[..., 3:]
    n1 = torch.linalg.norm(a1, dim=-1, keepdim=True)
    if bool((n1 <= GS_EPS).any()):
        raise DegenerateRotation("first 6D column has (near) zero norm")
    b1 = a1 / n1
    u2 = a2 - (b1 * a2).sum(-1, keepdim=True) * b1
    n2 = torch.linalg.norm(u2, dim=-1, keepdim=True)
    if bool((n2 <= GS_EPS).any()):
        raise DegenerateRotation("6D columns are (near) parallel or zero")
    b2 = u2 / n2
    b3 = torch.cross(b1, b2, dim=-1)
    return torch.stack([b1, b2, b3], dim=-1)


def matrix_to_rot6d(R, atol: float = 1e-5) -> torch.Tensor:
    """First two columns of ``R``, flattened column-major into a 6-vector."""
    R = _as_tensor(R)
    if R.shape[-2:] != (3, 3):
        raise ShapeMismatch(f"expected (..., 3, 3), got {tuple(R.shape)}")
    eye = torch.eye(3, dtype=R.dtype)
    ortho_err = (R.transpose(-1, -2) @ R - eye).abs().amax() if R.numel() else 0.0
    det = torch.linalg.det(R) if R.numel() else torch.ones(1)
    if ortho_err > atol or bool(((det - 1).abs() > atol).any()):
        raise NotARotation(
            f"matrix is not a proper rotation (orthonormality error {float(ortho_err):.2e})")
    return torch.cat([R[..., :, 0], R[..., :, 1]], dim=-1)


def identity_rot6d(*shape: int, dtype=torch.float64) -> torch.Tensor:
    r6 = torch.zeros(*shape, 6, dtype=dtype)
    r6[..., 0] = 1.0
    r6[..., 4] = 1.0
    return r6


# ---------------------------------------------------------------- kinematics

def global_transforms(skel: Skeleton, rot6d, root_pos):
    """Global joint rotations ``(..., N, 3, 3)`` and positions ``(..., N, 3)``.

    Global rotation of a joint is the product of local rotations from the root
    down to it; a child's offset is applied in its parent's global frame.
    """
    rot6d = _as_tensor(rot6d)
    root_pos = _as_tensor(root_pos, rot6d.dtype)
    n = skel.n_joints
    if rot6d.shape[-2] != n:
        raise ShapeMismatch(
            f"motion has {rot6d.shape[-2]} joints, skeleton has {n}")
    if root_pos.shape[:-1] != rot6d.shape[:-2]:
        raise ShapeMismatch("root_pos batch shape does not match rot6d")
    local = rot6d_to_matrix(rot6d)
    offsets = torch.as_tensor(skel.offsets, dtype=rot6d.dtype)
    rots: list = [None] * n
    pos: list = [None] * n
    for j in skel.order:
        p = int(skel.parent[j])
        if p < 0:
            rots[j] = local[..., j, :, :]
            pos[j] = root_pos
        else:
            rots[j] = rots[p] @ local[..., j, :, :]
            pos[j] = pos[p] + (rots[p] @ offsets[j].unsqueeze(-1)).squeeze(-1)
    return torch.stack(rots, dim=-3), torch.stack(pos, dim=-2)


def forward_kinematics(skel: Skeleton, motion: Motion) -> torch.Tensor:
    """Global joint positions, ``T x N x 3``."""
    return global_transforms(skel, motion.rot6d, motion.root_pos)[1]


def motion_features(skel: Skeleton, rot6d, root_pos) -> torch.Tensor:
    """Network node features: 6D rotation and FK position per joint, ``(..., N, 9)``."""
    rot6d = _as_tensor(rot6d)
    pos = global_transforms(skel, rot6d, root_pos)[1]
    return torch.cat([rot6d, pos], dim=-1)


# ---------------------------------------------------------------- distances

def joint_distance_matrix(P) -> torch.Tensor:
    """Pairwise joint distances ``(..., N, N)`` from positions ``(..., N, 3)``.

    Coincident joints get distance 0 and a zero subgradient.
    """
    P = _as_tensor(P)
    diff = P.unsqueeze(-2) - P.unsqueeze(-3)
    sq = (diff * diff).sum(-1)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))),
                       torch.zeros_like(sq))


def normalize_jdm(D) -> torch.Tensor:
    """Divide each row by its L1 norm (plus a small guard)."""
    D = _as_tensor(D)
    return D / (D.abs().sum(-1, keepdim=True) + JDM_EPS)
