"""Training objectives for both stages, all as differentiable torch scalars."""
from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Mapping

import torch
import torch.nn.functional as F

from .errors import ShapeMismatch
from .sdf import SignedDistanceGrid, query_sdf
from .skeleton import joint_distance_matrix, normalize_jdm

PROB_EPS = 1e-7


@dataclass
class LossWeights:
    rec: float = 10.0
    cyc: float = 1.0
    adv: float = 0.1
    jdm: float = 1.0
    pen: float = 1.0
    sem: float = 0.1

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")


@dataclass
class PenRamp:
    """Penetration weight schedule for fine-tuning.

    The weight rises linearly from ``start`` (epoch 0) to ``peak`` (epoch
    ``ramp_epochs - 1``) and drops back to ``start`` afterwards.
    """

    start: float = 1.0
    peak: float = 10.0
    ramp_epochs: int = 5

    def weight(self, epoch: int) -> float:
        if epoch >= self.ramp_epochs or self.ramp_epochs <= 0:
            return self.start
        if self.ramp_epochs == 1:
            return self.peak
        return self.start + (self.peak - self.start) * epoch / (self.ramp_epochs - 1)


def _check_same(a, b):
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def rec_loss(Q_hat, Q):
    """Sum over frames of squared L2 error over all joint channels."""
    _check_same(Q_hat, Q)
    return ((Q_hat - Q) ** 2).sum()


def cyc_loss(Q_cyc, Q):
    _check_same(Q_cyc, Q)
    return ((Q_cyc - Q) ** 2).sum()


def adv_loss_generator(probs, convention: str = "minimax"):
    """Generator adversarial term.

    ``minimax`` is ``sum log(1 - p)`` (minimised as p -> 1); ``nonsaturating`` is
    ``-sum log p`` with the same optimum but stronger early gradients.
    """
    p = probs.clamp(PROB_EPS, 1 - PROB_EPS)
    if convention == "minimax":
        return torch.log1p(-p).sum()
    if convention == "nonsaturating":
        return -torch.log(p).sum()
    raise ValueError(f"unknown adversarial convention {convention!r}")


def adv_loss_discriminator(real_probs, fake_probs):
    """Binary cross-entropy: real frames labelled 1, retargeted frames 0."""
    real = real_probs.clamp(PROB_EPS, 1 - PROB_EPS)
    fake = fake_probs.clamp(PROB_EPS, 1 - PROB_EPS)
    return -torch.log(real).sum() - torch.log1p(-fake).sum()


def jdm_loss(P_A, P_B):
    """Squared Frobenius distance between row-normalised joint distance matrices."""
    if P_A.shape != P_B.shape:
        raise ShapeMismatch(f"joint positions differ: {tuple(P_A.shape)} vs {tuple(P_B.shape)}")
    d = normalize_jdm(joint_distance_matrix(P_A)) - normalize_jdm(joint_distance_matrix(P_B))
    return (d ** 2).sum()


def sem_loss(E_A, E_B):
    _check_same(E_A, E_B)
    return ((E_A - E_B) ** 2).sum()


def pen_loss(grid: SignedDistanceGrid, limb_vertices):
    """Total depth of limb vertices inside the body (points in the grid's frame)."""
    phi, _ = query_sdf(grid, limb_vertices)
    return F.relu(-phi).sum()


def total_pretrain_loss(parts: Mapping[str, torch.Tensor], w: LossWeights):
    return w.rec * parts["rec"] + w.cyc * parts["cyc"] + w.adv * parts["adv"] + w.jdm * parts["jdm"]


def total_finetune_loss(parts: Mapping[str, torch.Tensor], w: LossWeights,
                        pen_weight: float | None = None):
    lam_p = w.pen if pen_weight is None else pen_weight
    return w.sem * parts["sem"] + lam_p * parts["pen"]
