"""Dense voxel grids over an axis-aligned cube.

Values are stored channel-last with x varying fastest among the spatial
axes, i.e. ``values[z, y, x, c]``.  Grid index ``i`` is the centre of cell
``i`` and the extent corners coincide with the outermost cell centres.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

VOLUME_FORMAT_VERSION = 1
_MAGIC = b"AD3DVOL\x00"

LAYOUTS = ("density", "radiance", "articulated")


class LayoutError(ValueError):
    """Channel count does not match the requested layout."""


@dataclass
class VoxelGrid:
    values: torch.Tensor  # (S, S, S, C)
    extent: tuple[float, float] = (-1.0, 1.0)
    layout: str = "radiance"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.values.ndim != 4:
            raise ValueError(f"expected (S, S, S, C) values, got shape {tuple(self.values.shape)}")
        s = self.values.shape[0]
        if self.values.shape[1] != s or self.values.shape[2] != s:
            raise ValueError("voxel grid must be cubic")
        if s < 2:
            raise ValueError("resolution must be at least 2")
        lo, hi = self.extent
        if not hi > lo:
            raise ValueError(f"degenerate extent {self.extent}")

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[-1]

    @property
    def cell_size(self) -> float:
        lo, hi = self.extent
        return (hi - lo) / (self.resolution - 1)

    def with_values(self, values: torch.Tensor, layout: str | None = None) -> "VoxelGrid":
        return VoxelGrid(values, self.extent, layout or self.layout, dict(self.meta))

    @classmethod
    def zeros(cls, resolution: int, channels: int, extent=(-1.0, 1.0), layout="radiance", dtype=torch.float32):
        return cls(torch.zeros(resolution, resolution, resolution, channels, dtype=dtype), tuple(extent), layout)

    def cell_centers(self) -> torch.Tensor:
        """World positions of all cell centres, shape (S, S, S, 3) as (x, y, z)."""
        lo, hi = self.extent
        ax = torch.linspace(lo, hi, self.resolution, dtype=self.values.dtype)
        z, y, x = torch.meshgrid(ax, ax, ax, indexing="ij")
        return torch.stack([x, y, z], dim=-1)


def world_to_grid(points, grid: VoxelGrid):
    """Map world coordinates to continuous grid coordinates in ``[0, S-1]``.

    Points outside the extent map outside that range; nothing is clamped.
    """
    lo, hi = grid.extent
    return (points - lo) * ((grid.resolution - 1) / (hi - lo))


def grid_to_world(coords, grid: VoxelGrid):
    lo, hi = grid.extent
    return coords * ((hi - lo) / (grid.resolution - 1)) + lo


def sample_trilinear(grid: VoxelGrid, points: torch.Tensor, oob_policy: str = "zero") -> torch.Tensor:
    """Trilinearly interpolate grid values at world points.

    Args:
        grid: source grid.
        points: (..., 3) world coordinates, (x, y, z) order.
        oob_policy: ``"zero"`` returns zeros for points outside the extent,
            ``"clamp"`` clamps coordinates to the boundary.

    Returns:
        (..., C) tensor, differentiable with respect to ``grid.values``
        and ``points``.
    """
    if oob_policy not in ("zero", "clamp"):
        raise ValueError(f"unknown oob_policy {oob_policy!r}")
    lo, hi = grid.extent
    batch_shape = points.shape[:-1]
    flat = points.reshape(-1, 3).to(grid.values.dtype)
    # grid_sample with align_corners=True puts -1/+1 on the outermost cell centres
    norm = (flat - lo) * (2.0 / (hi - lo)) - 1.0
    vol = grid.values.permute(3, 0, 1, 2).unsqueeze(0)  # (1, C, D=z, H=y, W=x)
    out = F.grid_sample(
        vol,
        norm.view(1, 1, 1, -1, 3),
        mode="bilinear",
        padding_mode="border",
        align_corners=True,
    )
    out = out.view(grid.channels, -1).transpose(0, 1)
    if oob_policy == "zero":
        inside = ((flat >= lo) & (flat <= hi)).all(dim=-1, keepdim=True)
        out = torch.where(inside, out, torch.zeros_like(out))
    return out.reshape(*batch_shape, grid.channels)


def split_channels(grid: VoxelGrid, layout: str | None = None, n_parts: int | None = None):
    """Split a grid into (density, rgb, lbs) grids according to its layout."""
    layout = layout or grid.layout
    c = grid.channels
    if layout == "radiance":
        if c != 4:
            raise LayoutError(f"radiance layout needs 4 channels, got {c}")
        lbs = None
    elif layout == "articulated":
        expected = 4 + (n_parts if n_parts is not None else c - 4)
        if c != expected or c <= 4:
            raise LayoutError(f"articulated layout needs 4 + N_p channels, got {c}")
    elif layout == "density":
        if c != 1:
            raise LayoutError(f"density layout needs 1 channel, got {c}")
        return grid.with_values(grid.values, "density"), None, None
    else:
        raise LayoutError(f"unknown layout {layout!r}")
    v = grid.values
    density = grid.with_values(v[..., :1], "density")
    rgb = grid.with_values(v[..., 1:4], "rgb")
    if layout == "articulated":
        lbs = grid.with_values(v[..., 4:], "lbs")
    return density, rgb, lbs


# -- volume files -----------------------------------------------------------
#
# magic (8 bytes) | header length (uint32 LE) | JSON header | float32 LE payload


def save_volume(grid: VoxelGrid, path) -> Path:
    path = Path(path)
    header = {
        "resolution": grid.resolution,
        "channels": grid.channels,
        "extent": [float(grid.extent[0]), float(grid.extent[1])],
        "layout": grid.layout,
        "dtype": "<f4",
        "version": VOLUME_FORMAT_VERSION,
    }
    if grid.meta:
        header["meta"] = grid.meta
    raw = json.dumps(header, sort_keys=True).encode()
    payload = grid.values.detach().cpu().numpy().astype("<f4", copy=False).tobytes(order="C")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(payload)
    return path


def load_volume(path) -> VoxelGrid:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a volume file")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n))
        if header.get("version") != VOLUME_FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported volume version {header.get('version')}")
        payload = fh.read()
    s, c = header["resolution"], header["channels"]
    arr = np.frombuffer(payload, dtype="<f4")
    if arr.size != s**3 * c:
        raise ValueError(f"{path}: payload has {arr.size} floats, expected {s**3 * c}")
    values = torch.from_numpy(arr.reshape(s, s, s, c).astype(np.float32))
    return VoxelGrid(values, tuple(header["extent"]), header["layout"], header.get("meta", {}))
