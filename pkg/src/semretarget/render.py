"""Soft silhouette rasterisation of triangle meshes from several cameras.

Each face contributes ``sigmoid(d / tau)`` to a pixel, where ``d`` is the
signed 2-D distance from the pixel centre to the projected triangle
(positive inside). Pixel occupancy is ``1 - prod_f (1 - sigmoid(d_f / tau))``,
accumulated in log space. Face/pixel pairs further than a few ``tau`` outside
a face's screen bounding box are skipped, which keeps the cost proportional
to covered area instead of ``pixels x faces``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DegenerateCamera, ShapeMismatch

VIEW_NAMES = ("front", "left", "right")
DEFAULT_IMAGE_SIZE = 128
DEFAULT_TAU_SCALE = 1e-2
CULL_MARGIN = 8.0  # in units of tau; softplus(-8) ~ 3e-4
MAX_PAIRS = 2_000_000  # pixel/face pairs per rasterisation group


@dataclass
class Camera:
    view_name: str
    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    fov_deg: float = 30.0
    image_size: tuple[int, int] = (DEFAULT_IMAGE_SIZE, DEFAULT_IMAGE_SIZE)  # H, W

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.look_at = np.asarray(self.look_at, dtype=np.float64)
        self.up = np.asarray(self.up, dtype=np.float64)
        if isinstance(self.image_size, int):
            self.image_size = (self.image_size, self.image_size)
        self.image_size = tuple(int(s) for s in self.image_size)

    def basis(self) -> np.ndarray:
        """Rows are the camera's right, up and forward axes in world space."""
        fwd = self.look_at - self.position
        n = np.linalg.norm(fwd)
        if n < 1e-12:
            raise DegenerateCamera(f"camera {self.view_name!r}: position equals look_at")
        fwd = fwd / n
        right = np.cross(fwd, self.up)
        if np.linalg.norm(right) < 1e-12:
            raise DegenerateCamera(f"camera {self.view_name!r}: up is parallel to view direction")
        right /= np.linalg.norm(right)
        up = np.cross(right, fwd)
        return np.stack([right, up, fwd])

    def project(self, points: torch.Tensor) -> torch.Tensor:
        """World points ``(..., 3)`` to pixel coordinates ``(..., 2)`` (x right, y down)."""
        basis = torch.as_tensor(self.basis(), dtype=points.dtype)
        cam = (points - torch.as_tensor(self.position, dtype=points.dtype)) @ basis.T
        depth = cam[..., 2].clamp(min=1e-3)
        f = 1.0 / np.tan(np.radians(self.fov_deg) / 2)
        h, w = self.image_size
        s = 0.5 * min(h, w)
        x = w / 2 + s * f * cam[..., 0] / depth
        y = h / 2 - s * f * cam[..., 1] / depth
        return torch.stack([x, y], dim=-1)


def default_cameras(centroid, height: float, image_size=DEFAULT_IMAGE_SIZE,
                    fov_deg: float = 30.0, views=VIEW_NAMES) -> list[Camera]:
    """Front/left/right cameras at 2.5 x height from the character centroid.

    Characters are y-up and face +z, so their left side is +x.
    """
    c = np.asarray(centroid, dtype=np.float64)
    d = 2.5 * height
    dirs = {"front": (0.0, 0.0, 1.0), "left": (1.0, 0.0, 0.0), "right": (-1.0, 0.0, 0.0),
            "back": (0.0, 0.0, -1.0)}
    return [Camera(v, c + d * np.asarray(dirs[v]), c, fov_deg=fov_deg, image_size=image_size)
            for v in views]


@dataclass
class RenderedFrame:
    images: torch.Tensor  # (..., n_views, H, W) occupancy in [0, 1]
    view_names: tuple[str, ...] = VIEW_NAMES


def _signed_distance(px, corners, edges, inv_len2):
    """Signed distance from pixel centres to 2-D triangles (rows paired).

    ``corners`` and ``edges`` are ``(P, 3, 2)`` (edge e runs from corner e to
    corner e+1), ``inv_len2`` is ``(P, 3)``. Positive inside. Also returns,
    for the nearest edge, its index ``e``, the clamped parameter ``t`` along
    it and the unit offset ``n`` from the closest point to the pixel.
    """
    q = px.unsqueeze(1) - corners
    t = ((q * edges).sum(-1) * inv_len2).clamp_(0.0, 1.0)
    r = q - t.unsqueeze(-1) * edges
    d2, e = (r * r).sum(-1).min(-1)
    idx = e.unsqueeze(-1)
    t = t.gather(1, idx).squeeze(1)
    r = r.gather(1, idx.unsqueeze(-1).expand(-1, 1, 2)).squeeze(1)
    dist = torch.sqrt(d2 + 1e-20)
    n = r / dist.unsqueeze(-1)
    side = edges[..., 0] * q[..., 1] - edges[..., 1] * q[..., 0]
    inside = (side > 0).all(-1) | (side < 0).all(-1)
    return torch.where(inside, dist, -dist), e, t, n


class _SoftCoverage(torch.autograd.Function):
    """``acc[pix] = sum softplus(sd(pix, face) / tau)`` over culled pixel/face pairs.

    The backward pass is written out: d sd / d corner is nonzero only for the
    two endpoints of the nearest edge, ``-sign * n * (1 - t)`` and
    ``-sign * n * t`` (the dependence through ``t`` vanishes because ``n`` is
    orthogonal to the edge wherever ``t`` is not clamped).
    """

    @staticmethod
    def forward(ctx, tri, centers, pair_face, flat, n_pix, tau):
        edges = tri.roll(-1, dims=1) - tri
        inv_len2 = 1.0 / (edges * edges).sum(-1).clamp(min=1e-20)
        sd, e, t, n = _signed_distance(centers, tri[pair_face], edges[pair_face], inv_len2[pair_face])
        acc = torch.zeros(n_pix, dtype=tri.dtype).index_add_(0, flat, F.softplus(sd / tau))
        ctx.save_for_backward(pair_face, flat, e, t, n * (torch.sigmoid(sd / tau) / tau
                                                          * torch.sign(sd)).unsqueeze(-1))
        ctx.n_faces = tri.shape[0]
        return acc

    @staticmethod
    def backward(ctx, g):
        pair_face, flat, e, t, wn = ctx.saved_tensors
        gw = -(g[flat].unsqueeze(-1) * wn)  # d loss / d (closest point), per pair
        grad = torch.zeros(ctx.n_faces * 3, 2, dtype=g.dtype)
        base = pair_face * 3
        grad.index_add_(0, base + e, gw * (1.0 - t).unsqueeze(-1))
        grad.index_add_(0, base + (e + 1) % 3, gw * t.unsqueeze(-1))
        return grad.reshape(ctx.n_faces, 3, 2), None, None, None, None, None


def rasterize(pix_verts: torch.Tensor, faces, image_size, tau: float,
              max_pairs: int = MAX_PAIRS) -> torch.Tensor:
    """Soft silhouettes from screen-space vertices ``(B, V, 2)``; returns ``(B, H, W)``.

    Images are processed in groups of at most ``max_pairs`` pixel/face pairs
    (a single image larger than that forms its own group) to bound memory.
    """
    h, w = image_size
    nb = pix_verts.shape[0]
    dtype = pix_verts.dtype
    faces = torch.as_tensor(np.asarray(faces, dtype=np.int64).reshape(-1, 3))
    if len(faces) == 0:
        return torch.zeros(nb, h, w, dtype=dtype)
    tri = pix_verts[:, faces]  # B x F x 3 x 2
    with torch.no_grad():
        margin = CULL_MARGIN * tau
        lo = (tri.amin(2) - margin).floor()
        hi = (tri.amax(2) + margin).ceil()
        x0 = lo[..., 0].clamp(0, w).long()
        y0 = lo[..., 1].clamp(0, h).long()
        x1 = hi[..., 0].clamp(0, w).long()
        y1 = hi[..., 1].clamp(0, h).long()
        bw = (x1 - x0).clamp(min=0)
        bh = (y1 - y0).clamp(min=0)
        per_image = (bw * bh).sum(1).tolist()
    groups, start, load = [], 0, 0
    for i, n in enumerate(per_image):
        if i > start and load + n > max_pairs:
            groups.append((start, i))
            start, load = i, 0
        load += n
    groups.append((start, nb))
    out = [_rasterize_group(tri[i:j], x0[i:j], y0[i:j], bw[i:j], bh[i:j], h, w, tau)
           for i, j in groups]
    return out[0] if len(out) == 1 else torch.cat(out)


def _rasterize_group(tri, x0, y0, bw, bh, h, w, tau):
    nb, nf = tri.shape[:2]
    counts = (bw * bh).reshape(-1)
    total = int(counts.sum())
    if total == 0:
        return torch.zeros(nb, h, w, dtype=tri.dtype)
    with torch.no_grad():
        pair_face = torch.repeat_interleave(torch.arange(nb * nf), counts)
        starts = torch.cumsum(counts, 0) - counts
        k = torch.arange(total) - starts[pair_face]
        bw_f = bw.reshape(-1)[pair_face]
        px_i = x0.reshape(-1)[pair_face] + k % bw_f
        py_i = y0.reshape(-1)[pair_face] + k // bw_f
        img = pair_face // nf
        flat = img * (h * w) + py_i * w + px_i
        centers = torch.stack([px_i.to(tri.dtype) + 0.5, py_i.to(tri.dtype) + 0.5], dim=-1)
        del k, bw_f, px_i, py_i, img, starts
    acc = _SoftCoverage.apply(tri.reshape(nb * nf, 3, 2), centers, pair_face, flat, nb * h * w, tau)
    return (1.0 - torch.exp(-acc)).reshape(nb, h, w)


def render_views(vertices, faces, cameras: list[Camera],
                 tau_scale: float = DEFAULT_TAU_SCALE) -> RenderedFrame:
    """Silhouettes of ``vertices (..., V, 3)`` seen from each camera.

    Returns images of shape ``(..., n_views, H, W)``; depth is discarded.
    """
    V = torch.as_tensor(vertices)
    if V.shape[-1] != 3:
        raise ShapeMismatch(f"vertices must be (..., V, 3), got {tuple(V.shape)}")
    lead = V.shape[:-2]
    flat = V.reshape(-1, V.shape[-2], 3)
    sizes = {cam.image_size for cam in cameras}
    if len(sizes) != 1:
        raise ValueError("all cameras must share one image size")
    (h, w), = sizes
    tau = tau_scale * float(np.hypot(h, w))
    pix = torch.stack([cam.project(flat) for cam in cameras], dim=1)  # B x C x V x 2
    imgs = rasterize(pix.reshape(-1, V.shape[-2], 2), faces, (h, w), tau)
    imgs = imgs.reshape(*lead, len(cameras), h, w)
    return RenderedFrame(imgs, tuple(cam.view_name for cam in cameras))
