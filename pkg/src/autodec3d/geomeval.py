"""Mesh extraction, surface sampling and point-cloud generative metrics.

Chamfer distance is the *sum* (not mean) of squared nearest-neighbour
distances in both directions.  Clouds are compared in canonical
coordinates with no alignment or rescaling.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.spatial import cKDTree
from skimage import measure

from .renderer import RenderSettings, activate_density
from .voxgrid import VoxelGrid

PSNR_INF = float("inf")
DEFAULT_SATURATION = 20.0  # interior density of procedural primitives


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")
        if not np.isfinite(self.vertices).all():
            raise ValueError("non-finite mesh vertex")

    @property
    def empty(self) -> bool:
        return len(self.faces) == 0

    def areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def density_of(grid: VoxelGrid) -> np.ndarray:
    """Channel 0 as a (z, y, x) numpy array."""
    return grid.values[..., 0].detach().double().cpu().numpy()


def density_grid(grid: VoxelGrid, settings: RenderSettings | None = None) -> VoxelGrid:
    """Single-channel grid of activated density."""
    settings = settings or RenderSettings()
    sigma = activate_density(grid.values[..., :1].detach(), settings)
    return VoxelGrid(sigma, grid.extent, "density", dict(grid.meta))


def default_iso_level(saturation: float = DEFAULT_SATURATION) -> float:
    """Half the density a fully occupied voxel saturates at."""
    return 0.5 * saturation


def marching_cubes(grid: VoxelGrid, iso_level: float) -> TriangleMesh:
    """Iso-surface of the density channel in world coordinates."""
    if grid.resolution < 8:
        raise ValueError("marching cubes needs resolution >= 8")
    vol = density_of(grid)
    if not (vol.min() < iso_level < vol.max()):
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    verts, faces, _, _ = measure.marching_cubes(vol, level=iso_level, allow_degenerate=False)
    # skimage returns (z, y, x) index coordinates
    idx = verts[:, ::-1]
    lo, _ = grid.extent
    world = lo + idx * grid.cell_size
    # skimage winding is already outward once read in x,y,z order
    return TriangleMesh(world, faces.astype(np.int64))


def downsample_grid(grid: VoxelGrid, resolution: int) -> VoxelGrid:
    """Resample to a coarser cell-centre grid over the same extent."""
    from .voxgrid import sample_trilinear

    lo, hi = grid.extent
    c = torch.linspace(lo, hi, resolution, dtype=torch.float64)
    zz, yy, xx = torch.meshgrid(c, c, c, indexing="ij")
    pts = torch.stack([xx, yy, zz], dim=-1).reshape(-1, 3)
    vals = sample_trilinear(grid, pts.to(grid.values.dtype), "clamp")
    return grid.with_values(vals.reshape(resolution, resolution, resolution, -1))


def sample_surface(mesh: TriangleMesh, n: int = 2048, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface, (n, 3)."""
    if mesh.empty:
        raise ValueError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.areas()
    if areas.sum() <= 0:
        raise ValueError("mesh has zero area")
    tri = rng.choice(len(areas), size=n, p=areas / areas.sum())
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    a, b, c = (mesh.vertices[mesh.faces[tri, i]] for i in range(3))
    return a + u[:, None] * (b - a) + v[:, None] * (c - a)


def _check_cloud(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if len(x) == 0:
        raise ValueError("empty point cloud")
    if not np.isfinite(x).all():
        raise ValueError("non-finite point")
    return x


def chamfer(x, y, reduction: str = "sum") -> float:
    """Sum of squared nearest-neighbour distances, X->Y plus Y->X.

    ``reduction="mean"`` averages each direction instead, which makes the
    value independent of the cloud sizes.
    """
    x, y = _check_cloud(x), _check_cloud(y)
    dx, _ = cKDTree(y).query(x)
    dy, _ = cKDTree(x).query(y)
    if reduction == "mean":
        return float(np.mean(dx**2) + np.mean(dy**2))
    if reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return float(np.sum(dx**2) + np.sum(dy**2))


def chamfer_matrix(gen, ref) -> np.ndarray:
    if len(gen) == 0 or len(ref) == 0:
        raise ValueError("empty cloud set")
    return np.array([[chamfer(g, r) for r in ref] for g in gen])


def coverage(gen, ref, cd: np.ndarray | None = None) -> float:
    """Fraction of references that are the nearest match of some generated cloud.

    Ties resolve to the lowest reference index.
    """
    cd = chamfer_matrix(gen, ref) if cd is None else cd
    matched = set(int(np.argmin(row)) for row in cd)
    return len(matched) / cd.shape[1]


def mmd(gen, ref, cd: np.ndarray | None = None) -> float:
    """Mean over references of the distance to the closest generated cloud."""
    cd = chamfer_matrix(gen, ref) if cd is None else cd
    return float(cd.min(axis=0).mean())


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; identical images give +inf."""
    a, b = torch.as_tensor(a, dtype=torch.float64), torch.as_tensor(b, dtype=torch.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = torch.mean((a - b) ** 2).item()
    if mse == 0:
        return PSNR_INF
    return 10.0 * math.log10(1.0 / mse)


def write_obj(mesh: TriangleMesh, path) -> Path:
    path = Path(path)
    lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_obj(path) -> TriangleMesh:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def metric_report(metrics: dict, config: dict, seed: int) -> list[dict]:
    """One JSON record per metric: {metric, value, config, seed}."""
    def clean(v):
        return "inf" if isinstance(v, float) and math.isinf(v) else v

    return [{"metric": k, "value": clean(v), "config": config, "seed": seed} for k, v in sorted(metrics.items())]


def write_report(records: list[dict], path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(records, indent=1, sort_keys=True) + "\n")
    return path
