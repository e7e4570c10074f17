"""Articulated objects: part poses from keypoints, and volumetric skinning.

Part poses map canonical to posed space, ``x_d = R_p x_c + t_p``.  Rendering
looks up the canonical point of a posed sample with inverse LBS weights

    w_p(x_d) = w^c_p(y_p) / sum_q w^c_q(y_q),   y_p = R_p^T (x_d - t_p)
    x_c      = sum_p w_p(x_d) y_p

and treats samples with ``sum_q w^c_q(y_q) < eps`` as empty space.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .camera import Intrinsics, Pose, Rays, generate_rays, ray_box_intersect
from .renderer import RenderOutput, RenderSettings, render_field
from .voxgrid import VoxelGrid, sample_trilinear

UNCOVERED_EPS = 1e-4
_CV = torch.tensor([1.0, -1.0, -1.0])  # our camera frame <-> OpenCV (y down, z forward)


def stack_poses(poses, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """List of Pose (or an (R, t) pair of tensors) -> (P, 3, 3), (P, 3)."""
    if isinstance(poses, tuple) and len(poses) == 2 and torch.is_tensor(poses[0]):
        return poses[0].to(dtype), poses[1].to(dtype)
    rot = torch.stack([p.rotation for p in poses]).to(dtype)
    trans = torch.stack([p.translation for p in poses]).to(dtype)
    return rot, trans


def _lbs_weights(lbs, points: torch.Tensor) -> torch.Tensor:
    if isinstance(lbs, VoxelGrid):
        return sample_trilinear(lbs, points, oob_policy="clamp")
    if callable(lbs):
        return lbs(points)
    return lbs


def lbs_forward(x_c: torch.Tensor, poses, lbs) -> torch.Tensor:
    """Forward skinning ``x_d = sum_p w_p(x_c) (R_p x_c + t_p)``.

    ``lbs`` is an LBS grid (sampled trilinearly with clamping), a callable,
    or explicit weights of shape (..., P).  Evaluated as
    ``x_c + sum_p w_p (T_p x_c - x_c)``, which is the same for normalised
    weights and leaves points exactly in place under identity poses.
    """
    rot, trans = stack_poses(poses, x_c.dtype)
    w = _lbs_weights(lbs, x_c)
    moved = torch.einsum("pij,...j->...pi", rot, x_c) + trans  # (..., P, 3)
    return x_c + (w[..., None] * (moved - x_c[..., None, :])).sum(-2)


def lbs_inverse_sample(x_d: torch.Tensor, poses, lbs, eps: float = UNCOVERED_EPS):
    """Approximate canonical point for posed samples.

    Returns ``(x_c, covered, weights)``; uncovered samples keep ``x_c = x_d``
    and must be treated as empty by the caller.
    """
    rot, trans = stack_poses(poses, x_d.dtype)
    y = torch.einsum("pji,...pj->...pi", rot, x_d[..., None, :] - trans)  # R^T (x_d - t)
    wc = _lbs_weights(lbs, y)  # (..., P, P): weights of every part at every preimage
    wc = wc.diagonal(dim1=-2, dim2=-1)  # w^c_p(y_p)
    denom = wc.sum(-1, keepdim=True)
    covered = denom[..., 0] > eps
    w = wc / denom.clamp(min=eps)
    # x_d + sum w_p (y_p - x_d) equals sum w_p y_p when the weights sum to one,
    # and is exact for identity poses
    x_c = x_d + (w[..., None] * (y - x_d[..., None, :])).sum(-2)
    return x_c, covered, w


def articulated_field(grid: VoxelGrid, poses, eps: float = UNCOVERED_EPS, n_parts: int | None = None):
    """Field ``x_d -> (raw density, rgb, keep)`` of a posed articulated grid."""
    n_parts = n_parts or grid.channels - 4
    lbs = grid.with_values(grid.values[..., 4:4 + n_parts], "lbs")
    lo, hi = grid.extent

    def fn(x_d):
        x_c, covered, _ = lbs_inverse_sample(x_d, poses, lbs, eps)
        vals = sample_trilinear(grid, x_c, oob_policy="zero")
        inside = ((x_c >= lo) & (x_c <= hi)).all(-1)
        return vals[..., 0], vals[..., 1:4], covered & inside

    return fn


def articulated_rays(intr: Intrinsics, cam_pose: Pose, ref_pose: Pose | None = None,
                     margin: float = 3**0.5, dtype=torch.float32) -> Rays:
    """Camera rays bounded by a cube of half-size ``margin`` around the reference part."""
    rays = generate_rays(intr, cam_pose, near_far=(0.0, 1.0), dtype=dtype)
    local = rays if ref_pose is None else rays.transform(ref_pose.inverse())
    near, far = ray_box_intersect(local.origins, local.directions, -margin, margin)
    return Rays(rays.origins, rays.directions, near, far)


def render_articulated(grid: VoxelGrid, poses, rays: Rays, settings: RenderSettings | None = None,
                       eps: float = UNCOVERED_EPS, generator=None) -> RenderOutput:
    """Render an articulated canonical grid under per-part poses."""
    settings = settings or RenderSettings()
    if grid.channels <= 4:
        raise ValueError("articulated rendering needs 4 + N_p channels")
    return render_field(articulated_field(grid, poses, eps), rays, settings, generator)


def motion_transfer(grid: VoxelGrid, pose_sequence, intr: Intrinsics, cam_pose: Pose,
                    settings: RenderSettings | None = None, margin: float = 3**0.5) -> list[RenderOutput]:
    """Render ``grid`` under every frame of ``pose_sequence`` from one camera."""
    if len(pose_sequence) == 0:
        raise ValueError("pose sequence is empty")
    rays = articulated_rays(intr, cam_pose, margin=margin, dtype=grid.values.dtype)
    frames = []
    for poses in pose_sequence:
        with torch.no_grad():
            out = render_articulated(grid, poses, rays, settings)
        frames.append(out.image(intr.height, intr.width))
    return frames


def save_pose_sequence(frames, path) -> Path:
    """JSON list of frames; each frame is N_p lists of 9 rotation + 3 translation floats."""
    data = [[[float(v) for v in p.rotation.reshape(-1)] + [float(v) for v in p.translation] for p in f]
            for f in frames]
    path = Path(path)
    path.write_text(json.dumps(data))
    return path


def load_pose_sequence(path) -> list[list[Pose]]:
    data = json.loads(Path(path).read_text())
    frames = []
    for i, frame in enumerate(data):
        poses = []
        for row in frame:
            if len(row) != 12:
                raise ValueError(f"{path}: frame {i} has a part with {len(row)} values, expected 12")
            poses.append(Pose(torch.tensor(row[:9], dtype=torch.float64).reshape(3, 3),
                              torch.tensor(row[9:], dtype=torch.float64)))
        frames.append(poses)
    return frames


# -- Perspective-n-Point -----------------------------------------------------


@dataclass
class PnPResult:
    rotation: torch.Tensor
    translation: torch.Tensor
    ok: bool
    reprojection_rmse: float

    def pose(self) -> Pose:
        return Pose(self.rotation, self.translation)


def _skew(v):
    z = torch.zeros_like(v[..., 0])
    x, y, w = v.unbind(-1)
    return torch.stack([z, -w, y, w, z, -x, -y, x, z], dim=-1).reshape(*v.shape[:-1], 3, 3)


def _so3_exp(w):
    theta = w.norm()
    k = _skew(w)
    if theta < 1e-10:
        return torch.eye(3, dtype=w.dtype) + k
    return torch.eye(3, dtype=w.dtype) + torch.sin(theta) / theta * k + (1 - torch.cos(theta)) / theta**2 * (k @ k)


def _dlt(x3: torch.Tensor, xn: torch.Tensor):
    """Linear pose estimate in the OpenCV frame from normalised image points."""
    mu = x3.mean(0)
    scale = (x3 - mu).norm(dim=-1).mean().clamp(min=1e-12)
    xs = (x3 - mu) / scale
    n = x3.shape[0]
    xh = torch.cat([xs, torch.ones(n, 1, dtype=x3.dtype)], dim=-1)
    zero = torch.zeros_like(xh)
    rows1 = torch.cat([xh, zero, -xn[:, :1] * xh], dim=-1)
    rows2 = torch.cat([zero, xh, -xn[:, 1:] * xh], dim=-1)
    a = torch.cat([rows1, rows2], dim=0)
    _, _, vh = torch.linalg.svd(a, full_matrices=False)
    p = vh[-1].reshape(3, 4)
    # P = lambda [R | t]; fix the sign so lambda > 0
    p = p * torch.sign(torch.det(p[:, :3]))
    u, s, vt = torch.linalg.svd(p[:, :3])
    r = u @ vt
    t = p[:, 3] / s.mean()
    # undo the 3D normalisation of the object points
    t_full = t * scale - r @ mu
    return r, t_full


def _project_cv(r, t, x3):
    pc = x3 @ r.T + t
    return pc[:, :2] / pc[:, 2:3], pc


def pnp_solve(points3d: torch.Tensor, points2d: torch.Tensor, intr: Intrinsics, iterations: int = 10,
              rank_tol: float = 1e-6) -> PnPResult:
    """Camera-from-object pose minimising reprojection error.

    Linear DLT initialisation followed by Gauss-Newton on the reprojection
    residuals; every step is a differentiable torch op, so gradients flow
    to both point sets.  Degenerate inputs (fewer than 6 points, planar or
    collinear 3D points) return ``ok=False`` with an identity pose.
    """
    dtype = points3d.dtype
    n = points3d.shape[0]
    fail = PnPResult(torch.eye(3, dtype=dtype), torch.zeros(3, dtype=dtype), False, float("inf"))
    if n < 6 or points2d.shape[0] != n:
        return fail
    centered = points3d - points3d.mean(0)
    sv = torch.linalg.svdvals(centered.detach())
    if sv[-1] <= rank_tol * max(float(sv[0]), 1e-12):
        return fail
    fx, fy, cx, cy = intr.matrix()
    xn = torch.stack([(points2d[:, 0] - cx) / fx, (points2d[:, 1] - cy) / fy], dim=-1).to(dtype)
    r, t = _dlt(points3d, xn)
    for _ in range(iterations):
        proj, pc = _project_cv(r, t, points3d)
        res = (proj - xn).reshape(-1)
        z = pc[:, 2]
        jp = torch.zeros(n, 2, 3, dtype=dtype)
        jp[:, 0, 0] = 1 / z
        jp[:, 0, 2] = -pc[:, 0] / z**2
        jp[:, 1, 1] = 1 / z
        jp[:, 1, 2] = -pc[:, 1] / z**2
        q = pc - t
        jw = -jp @ _skew(q)
        j = torch.cat([jw, jp], dim=-1).reshape(-1, 6)
        h = j.T @ j + 1e-12 * torch.eye(6, dtype=dtype)
        delta = -torch.linalg.solve(h, j.T @ res)
        r = _so3_exp(delta[:3]) @ r
        t = t + delta[3:]
    proj, pc = _project_cv(r, t, points3d)
    if (pc[:, 2] <= 0).any():
        return fail
    rmse_px = float(((proj.detach() - xn.detach()) * torch.tensor([fx, fy], dtype=dtype)).pow(2).sum(-1).mean().sqrt())
    flip = _CV.to(dtype)
    return PnPResult(flip[:, None] * r, flip * t, True, rmse_px)


# -- learned keypoints ----------------------------------------------------------


class KeypointPredictor(nn.Module):
    """Image -> per-part 2D keypoints via spatial-softmax heatmaps.

    The input is resized to ``input_size`` square; outputs are pixel
    coordinates in the original image.
    """

    def __init__(self, n_parts: int, n_keypoints: int, input_size: int = 64, channels: int = 32):
        super().__init__()
        self.n_parts, self.n_keypoints, self.input_size = n_parts, n_keypoints, input_size
        c = channels
        self.encoder = nn.Sequential(
            nn.Conv2d(3, c, 3, padding=1), nn.ReLU(),
            nn.Conv2d(c, c, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(2 * c, 2 * c, 3, padding=1), nn.ReLU(),
        )
        self.head = nn.Conv2d(2 * c, n_parts * n_keypoints, 1)
        self.temperature = nn.Parameter(torch.tensor(1.0))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """(B, H, W, 3) in [0, 1] -> (B, N_p, N_k, 2) pixel coordinates (u, v)."""
        b, h, w, _ = images.shape
        x = F.interpolate(images.permute(0, 3, 1, 2), size=(self.input_size, self.input_size),
                          mode="bilinear", align_corners=False)
        heat = self.head(self.encoder(x))  # (B, K, s, s)
        k, s = heat.shape[1], heat.shape[-1]
        prob = torch.softmax(heat.flatten(2) * self.temperature, dim=-1).view(b, k, s, s)
        coords = (torch.arange(s, dtype=prob.dtype) + 0.5) / s
        u = (prob.sum(2) * coords).sum(-1) * w
        v = (prob.sum(3) * coords).sum(-1) * h
        return torch.stack([u, v], dim=-1).view(b, self.n_parts, self.n_keypoints, 2)


class PartKeypoints(nn.Module):
    """Canonical 3D keypoints shared across all objects, plus the 2D predictor."""

    def __init__(self, n_parts: int = 10, n_keypoints: int = 125, input_size: int = 64, channels: int = 32,
                 generator: torch.Generator | None = None):
        super().__init__()
        init = (torch.rand(n_parts, n_keypoints, 3, generator=generator) - 0.5)
        self.points3d = nn.Parameter(init)
        self.predictor = KeypointPredictor(n_parts, n_keypoints, input_size, channels)

    def estimate_poses(self, image: torch.Tensor, intr: Intrinsics):
        """Per-part camera-from-canonical poses for one (H, W, 3) image.

        Returns ``(rotations (P,3,3), translations (P,3), ok (P,))``; failed
        parts get the identity pose and ``ok=False``.
        """
        kp2d = self.predictor(image[None])[0]
        rots, trans, ok = [], [], []
        for p in range(self.points3d.shape[0]):
            res = pnp_solve(self.points3d[p].double(), kp2d[p].double(), intr)
            rots.append(res.rotation.float())
            trans.append(res.translation.float())
            ok.append(res.ok)
        return torch.stack(rots), torch.stack(trans), torch.tensor(ok)

    def regularizer(self) -> torch.Tensor:
        """Keeps keypoints inside the canonical cube."""
        return F.relu(self.points3d.abs() - 1.0).pow(2).mean()
