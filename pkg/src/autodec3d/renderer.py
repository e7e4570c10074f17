"""Emission-absorption volume rendering of voxel radiance fields.

Quadrature is piecewise constant along each ray: with ``n`` samples on
``[near, far]`` every sample owns an interval of length ``(far-near)/n``,
``alpha_i = 1 - exp(-sigma_i * delta)`` and
``w_i = alpha_i * prod_{j<i} (1 - alpha_j)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import torch
import torch.nn.functional as F

from .camera import Rays
from .voxgrid import VoxelGrid, sample_trilinear, split_channels

# points -> (raw density, rgb) or (raw density, rgb, keep mask)
FieldFn = Callable[[torch.Tensor], tuple]


@dataclass
class RenderSettings:
    n_samples: int = 128
    density_activation: str = "softplus"  # softplus | relu | identity
    density_shift: float = 0.0
    background_color: tuple[float, float, float] = (0.0, 0.0, 0.0)
    stratified: bool = False
    chunk_rays: int = 8192
    normal_eps: float | None = None  # finite-difference step, default one cell

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError("n_samples must be >= 2")
        if self.density_activation not in ("softplus", "relu", "identity"):
            raise ValueError(f"unknown density activation {self.density_activation!r}")


@dataclass
class RenderOutput:
    color: torch.Tensor  # (N, 3)
    occupancy: torch.Tensor  # (N,)
    depth: torch.Tensor  # (N,)
    weights: torch.Tensor | None = None  # (N, n_samples)
    normals: torch.Tensor | None = None  # (N, 3)
    extras: dict = field(default_factory=dict)

    def image(self, height: int, width: int) -> "RenderOutput":
        def r(x, *tail):
            return None if x is None else x.reshape(height, width, *tail)

        return RenderOutput(
            r(self.color, 3), r(self.occupancy), r(self.depth), r(self.weights, -1), r(self.normals, 3),
            dict(self.extras),
        )


def activate_density(raw: torch.Tensor, settings: RenderSettings) -> torch.Tensor:
    x = raw + settings.density_shift if settings.density_shift else raw
    if settings.density_activation == "softplus":
        return F.softplus(x)
    if settings.density_activation == "relu":
        return F.relu(x)
    return x


def sample_depths(rays: Rays, settings: RenderSettings, generator: torch.Generator | None = None):
    """Sample parameters (N, n) and the common interval length (N,)."""
    n = settings.n_samples
    dtype = rays.origins.dtype
    span = (rays.far - rays.near).clamp(min=0.0)
    delta = span / n
    if settings.stratified:
        offs = torch.rand(len(rays), n, generator=generator, dtype=dtype)
    else:
        offs = torch.full((len(rays), n), 0.5, dtype=dtype)
    idx = torch.arange(n, dtype=dtype)
    t = rays.near[:, None] + (idx[None, :] + offs) * delta[:, None]
    return t, delta


def composite(sigma: torch.Tensor, rgb: torch.Tensor, t: torch.Tensor, delta: torch.Tensor,
              background) -> RenderOutput:
    """Alpha-composite per-sample densities (N, n) and colours (N, n, 3)."""
    alpha = 1.0 - torch.exp(-sigma * delta[:, None])
    trans = torch.cumprod(1.0 - alpha, dim=-1)
    trans = torch.cat([torch.ones_like(trans[:, :1]), trans[:, :-1]], dim=-1)
    w = alpha * trans
    acc = w.sum(-1)
    bg = torch.as_tensor(background, dtype=rgb.dtype)
    color = (w[..., None] * rgb).sum(-2) + (1.0 - acc)[:, None] * bg
    depth = (w * t).sum(-1) / acc.clamp(min=1e-10)
    return RenderOutput(color, acc, depth, w)


def grid_field(grid: VoxelGrid) -> FieldFn:
    """Field function over a radiance-layout grid (extra channels ignored).

    Samples outside the extent are empty regardless of the activation.
    """
    lo, hi = grid.extent

    def fn(points):
        vals = sample_trilinear(grid, points, oob_policy="zero")
        inside = ((points >= lo) & (points <= hi)).all(-1)
        return vals[..., 0], vals[..., 1:4], inside

    return fn


def _eval_field(field_fn: FieldFn, pts, settings):
    res = field_fn(pts)
    sigma = activate_density(res[0], settings)
    if len(res) > 2:
        sigma = torch.where(res[2], sigma, torch.zeros_like(sigma))
    return sigma, res[1]


def render_field(field_fn: FieldFn, rays: Rays, settings: RenderSettings,
                 generator: torch.Generator | None = None) -> RenderOutput:
    """Render an arbitrary field ``points -> (raw density, rgb)``."""
    outs = []
    for start in range(0, len(rays), settings.chunk_rays):
        sl = slice(start, start + settings.chunk_rays)
        sub = Rays(rays.origins[sl], rays.directions[sl], rays.near[sl], rays.far[sl])
        t, delta = sample_depths(sub, settings, generator)
        pts = sub.origins[:, None, :] + t[..., None] * sub.directions[:, None, :]
        sigma, rgb = _eval_field(field_fn, pts, settings)
        outs.append(composite(sigma, rgb, t.to(sigma.dtype), delta.to(sigma.dtype), settings.background_color))
    if len(outs) == 1:
        return outs[0]
    return RenderOutput(
        torch.cat([o.color for o in outs]),
        torch.cat([o.occupancy for o in outs]),
        torch.cat([o.depth for o in outs]),
        torch.cat([o.weights for o in outs]),
    )


def render(grid: VoxelGrid, rays: Rays, settings: RenderSettings | None = None,
           generator: torch.Generator | None = None) -> RenderOutput:
    settings = settings or RenderSettings()
    if grid.layout == "radiance":
        split_channels(grid, "radiance")
    elif grid.channels < 4:
        split_channels(grid, "radiance")  # raises LayoutError
    return render_field(grid_field(grid), rays, settings, generator)


def density_gradient(grid: VoxelGrid, points: torch.Tensor, settings: RenderSettings) -> torch.Tensor:
    """Central-difference gradient of the activated density at ``points``."""
    h = settings.normal_eps or grid.cell_size
    eye = torch.eye(3, dtype=points.dtype) * h
    grads = []
    for k in range(3):
        plus = sample_trilinear(grid, points + eye[k], "zero")[..., 0]
        minus = sample_trilinear(grid, points - eye[k], "zero")[..., 0]
        grads.append((activate_density(plus, settings) - activate_density(minus, settings)) / (2 * h))
    return torch.stack(grads, dim=-1)


def render_normals(grid: VoxelGrid, rays: Rays, settings: RenderSettings | None = None) -> torch.Tensor:
    """Composited surface normals ``-grad(sigma)/|grad(sigma)|`` per ray.

    Rays whose composited normal vanishes (empty space, flat density)
    return the zero vector.
    """
    settings = settings or RenderSettings()
    out = []
    for start in range(0, len(rays), settings.chunk_rays):
        sl = slice(start, start + settings.chunk_rays)
        sub = Rays(rays.origins[sl], rays.directions[sl], rays.near[sl], rays.far[sl])
        t, delta = sample_depths(sub, settings)
        pts = sub.origins[:, None, :] + t[..., None] * sub.directions[:, None, :]
        sigma, rgb = _eval_field(grid_field(grid), pts, settings)
        res = composite(sigma, rgb, t, delta, settings.background_color)
        g = density_gradient(grid, pts, settings)
        gn = g.norm(dim=-1, keepdim=True)
        n = torch.where(gn > 1e-12, -g / gn.clamp(min=1e-12), torch.zeros_like(g))
        nsum = (res.weights[..., None] * n).sum(-2)
        norm = nsum.norm(dim=-1, keepdim=True)
        out.append(torch.where(norm > 1e-8, nsum / norm.clamp(min=1e-12), torch.zeros_like(nsum)))
    return torch.cat(out)
