"""Graph-convolutional motion encoder/decoder and the per-frame discriminator."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import ShapeMismatch
from .skeleton import Skeleton

LEAKY_SLOPE = 0.2
LOGIT_CLAMP = 15.0


@dataclass
class SkeletonGraph:
    """Directed message-passing edges of a skeleton.

    Every bone contributes two edges. The edge feature of parent -> child is
    the child's offset; the reverse edge carries its negation.
    """

    src: torch.Tensor
    dst: torch.Tensor
    edge_attr: torch.Tensor  # E x 3
    n_nodes: int
    root: int

    @classmethod
    def from_skeleton(cls, skel: Skeleton, dtype=torch.float32) -> "SkeletonGraph":
        src, dst, attr = [], [], []
        for p, c in skel.edges():
            off = skel.offsets[c]
            src += [p, c]
            dst += [c, p]
            attr += [off, -off]
        return cls(torch.tensor(src, dtype=torch.long), torch.tensor(dst, dtype=torch.long),
                   torch.as_tensor(np.asarray(attr, dtype=np.float64), dtype=dtype).reshape(-1, 3), skel.n_joints, skel.root)


class GraphConvLayer(nn.Module):
    """``x_i' = lift(x_i) + sum_j LeakyReLU(W [x_i, x_j, e_ji] + b)`` over neighbours j.

    ``lift`` is the identity when widths match and a bias-free linear map
    otherwise, so the residual path survives channel changes.
    """

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.message = nn.Linear(2 * in_channels + 3, out_channels)
        self.lift = (nn.Identity() if in_channels == out_channels
                     else nn.Linear(in_channels, out_channels, bias=False))

    def forward(self, x: torch.Tensor, graph: SkeletonGraph) -> torch.Tensor:
        if x.shape[-1] != self.in_channels or x.shape[-2] != graph.n_nodes:
            raise ShapeMismatch(
                f"expected (..., {graph.n_nodes}, {self.in_channels}), got {tuple(x.shape)}")
        x_dst = x.index_select(-2, graph.dst)
        x_src = x.index_select(-2, graph.src)
        e = graph.edge_attr.to(x.dtype).expand(*x.shape[:-2], -1, -1)
        msg = F.leaky_relu(self.message(torch.cat([x_dst, x_src, e], dim=-1)), LEAKY_SLOPE)
        agg = torch.zeros(*x.shape[:-1], self.out_channels, dtype=x.dtype)
        agg = agg.index_add(-2, graph.dst, msg)
        return self.lift(x) + agg


def graph_conv(x, graph: SkeletonGraph, layer: GraphConvLayer) -> torch.Tensor:
    return layer(x, graph)


class TemporalConv(nn.Module):
    """Channel-preserving residual 1-D convolution along time, shared by all joints."""

    def __init__(self, channels: int, kernel_size: int = 3, activate: bool = True):
        super().__init__()
        self.conv = nn.Conv1d(channels, channels, kernel_size, padding=kernel_size // 2)
        self.activate = activate

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (..., T, N, C)
        lead = x.shape[:-3]
        t, n, c = x.shape[-3:]
        h = x.reshape(-1, t, n, c).permute(0, 2, 3, 1).reshape(-1, c, t)
        h = self.conv(h)
        if self.activate:
            h = F.leaky_relu(h, LEAKY_SLOPE)
        h = h.reshape(-1, n, c, t).permute(0, 3, 1, 2).reshape(*lead, t, n, c)
        return x + h


class MotionEncoder(nn.Module):
    def __init__(self, channels=(9, 16, 32)):
        super().__init__()
        self.gc1 = GraphConvLayer(channels[0], channels[1])
        self.gc2 = GraphConvLayer(channels[1], channels[2])
        self.temporal = TemporalConv(channels[2])

    def forward(self, Q, graph):
        return self.temporal(self.gc2(self.gc1(Q, graph), graph))


class MotionDecoder(nn.Module):
    def __init__(self, channels=(32, 16, 6)):
        super().__init__()
        self.gc1 = GraphConvLayer(channels[0], channels[1])
        self.gc2 = GraphConvLayer(channels[1], channels[2])
        self.temporal = TemporalConv(channels[2], activate=False)
        self.root_mlp = nn.Sequential(
            nn.Linear(channels[1], 16), nn.LeakyReLU(LEAKY_SLOPE), nn.Linear(16, 3))

    def forward(self, Z, graph):
        h = self.gc1(Z, graph)
        rot6d = self.temporal(self.gc2(h, graph))
        root = self.root_mlp(h[..., graph.root, :])
        return rot6d, root


class RetargetModel(nn.Module):
    """Encoder/decoder pair mapping source node features to target joint angles."""

    def __init__(self, in_channels: int = 9, hidden: int = 16, latent: int = 32):
        super().__init__()
        self.hparams = {"in_channels": in_channels, "hidden": hidden, "latent": latent}
        self.encoder = MotionEncoder((in_channels, hidden, latent))
        self.decoder = MotionDecoder((latent, hidden, 6))

    def encode(self, Q, graph: SkeletonGraph) -> torch.Tensor:
        """``(..., T, N, 9)`` features to ``(..., T, N, 32)`` latent."""
        if Q.ndim < 3:
            raise ShapeMismatch(f"expected (..., T, N, C) features, got {tuple(Q.shape)}")
        return self.encoder(Q, graph)

    def decode(self, Z, graph: SkeletonGraph):
        """Latent to ``(rot6d (..., T, N, 6), root_pos (..., T, 3))``; rot6d is unnormalised."""
        if Z.ndim < 3:
            raise ShapeMismatch(f"expected (..., T, N, C) latent, got {tuple(Z.shape)}")
        return self.decoder(Z, graph)

    def forward(self, Q, graph_src, graph_tgt):
        return self.decode(self.encode(Q, graph_src), graph_tgt)


class Discriminator(nn.Module):
    """Per-frame real/fake probability from a frame's ``N x 9`` node features."""

    def __init__(self, channels=(9, 16, 32)):
        super().__init__()
        self.gc1 = GraphConvLayer(channels[0], channels[1])
        self.gc2 = GraphConvLayer(channels[1], channels[2])
        self.head = nn.Linear(channels[2], 1)

    def logits(self, Q_t, graph):
        h = self.gc2(self.gc1(Q_t, graph), graph)
        return self.head(h.mean(-2)).squeeze(-1).clamp(-LOGIT_CLAMP, LOGIT_CLAMP)

    def forward(self, Q_t, graph):
        return torch.sigmoid(self.logits(Q_t, graph))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
