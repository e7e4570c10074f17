"""Pinhole cameras, rays and projection.

Conventions: right-handed world, the camera looks down its local -z axis,
image x grows to the right and image y grows downward.  Poses map world to
camera coordinates, ``x_cam = R @ x_world + t``.  Continuous pixel
coordinates place the centre of pixel ``(i, j)`` at ``(i + 0.5, j + 0.5)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

RIGID_FOV = 0.7
ARTICULATED_FOV = 0.175


@dataclass(frozen=True)
class Intrinsics:
    width: int
    height: int
    fov: float | None = None
    fx: float | None = None
    fy: float | None = None
    cx: float | None = None
    cy: float | None = None

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        if self.fov is None and self.fx is None:
            raise ValueError("either fov or fx/fy/cx/cy must be given")
        if self.fov is not None and not self.fov > 0:
            raise ValueError("fov must be positive")

    @property
    def mode(self) -> str:
        return "fov" if self.fov is not None else "pinhole"

    def matrix(self) -> tuple[float, float, float, float]:
        """(fx, fy, cx, cy); fov is the horizontal field of view."""
        if self.fov is not None:
            f = 0.5 * self.width / math.tan(0.5 * self.fov)
            return f, f, 0.5 * self.width, 0.5 * self.height
        return self.fx, self.fy, self.cx, self.cy

    def to_dict(self) -> dict:
        if self.fov is not None:
            return {"mode": "fov", "fov": self.fov, "width": self.width, "height": self.height}
        fx, fy, cx, cy = self.matrix()
        return {"mode": "pinhole", "fx": fx, "fy": fy, "cx": cx, "cy": cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        if d.get("mode", "fov") == "fov":
            return cls(int(d["width"]), int(d["height"]), fov=float(d["fov"]))
        return cls(int(d["width"]), int(d["height"]), fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"])


@dataclass(frozen=True)
class Pose:
    rotation: torch.Tensor  # (3, 3)
    translation: torch.Tensor  # (3,)

    @classmethod
    def identity(cls, dtype=torch.float64) -> "Pose":
        return cls(torch.eye(3, dtype=dtype), torch.zeros(3, dtype=dtype))

    def apply(self, points: torch.Tensor) -> torch.Tensor:
        return points @ self.rotation.T + self.translation

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    @property
    def center(self) -> torch.Tensor:
        return -self.rotation.T @ self.translation

    def is_valid(self, tol: float = 1e-6) -> bool:
        r = self.rotation.double()
        eye = torch.eye(3, dtype=torch.float64)
        return bool((r @ r.T - eye).abs().max() < tol and abs(torch.det(r) - 1.0) < tol)

    def to_dict(self) -> dict:
        return {"rotation": [float(v) for v in self.rotation.reshape(-1)],
                "translation": [float(v) for v in self.translation]}

    @classmethod
    def from_dict(cls, d: dict, dtype=torch.float64) -> "Pose":
        return cls(torch.tensor(d["rotation"], dtype=dtype).reshape(3, 3),
                   torch.tensor(d["translation"], dtype=dtype))


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0), dtype=torch.float64) -> Pose:
    eye = torch.as_tensor(eye, dtype=dtype)
    target = torch.as_tensor(target, dtype=dtype)
    up = torch.as_tensor(up, dtype=dtype)
    back = eye - target
    back = back / back.norm()
    right = torch.linalg.cross(up, back)
    if right.norm() < 1e-9:
        # looking along the up vector; pick any perpendicular
        right = torch.linalg.cross(torch.tensor([0.0, 0.0, 1.0], dtype=dtype), back)
    right = right / right.norm()
    true_up = torch.linalg.cross(back, right)
    c2w = torch.stack([right, true_up, back], dim=1)
    rot = c2w.T
    return Pose(rot, -rot @ eye)


def orbit_pose(azimuth: float, elevation: float, distance: float, dtype=torch.float64) -> Pose:
    """Camera on a sphere around the origin, looking at it."""
    ce = math.cos(elevation)
    eye = (distance * ce * math.sin(azimuth), distance * math.sin(elevation), distance * ce * math.cos(azimuth))
    return look_at(eye, dtype=dtype)


@dataclass
class Rays:
    origins: torch.Tensor  # (N, 3)
    directions: torch.Tensor  # (N, 3), unit
    near: torch.Tensor  # (N,)
    far: torch.Tensor  # (N,)

    def __len__(self):
        return self.origins.shape[0]

    def transform(self, pose: Pose) -> "Rays":
        """Rigidly move rays; ray parameters (near/far) are unchanged."""
        r = pose.rotation.to(self.origins.dtype)
        t = pose.translation.to(self.origins.dtype)
        return Rays(self.origins @ r.T + t, self.directions @ r.T, self.near, self.far)


def ray_box_intersect(origins, directions, lo: float = -1.0, hi: float = 1.0):
    """Slab-method entry/exit parameters; misses give ``near == far``."""
    with torch.no_grad():
        safe = torch.where(directions.abs() < 1e-12, torch.full_like(directions, 1e-12), directions)
    inv = 1.0 / safe
    t0 = (lo - origins) * inv
    t1 = (hi - origins) * inv
    tmin = torch.minimum(t0, t1).amax(dim=-1)
    tmax = torch.maximum(t0, t1).amin(dim=-1)
    near = tmin.clamp(min=0.0)
    hit = tmax > near
    far = torch.where(hit, tmax, near)
    return near, far


def pixel_grid(intr: Intrinsics, dtype=torch.float64) -> torch.Tensor:
    """(H*W, 2) integer pixel indices (col, row), row-major."""
    rows, cols = torch.meshgrid(torch.arange(intr.height), torch.arange(intr.width), indexing="ij")
    return torch.stack([cols.reshape(-1), rows.reshape(-1)], dim=-1).to(dtype)


def generate_rays(intr: Intrinsics, pose: Pose, pixel_subset=None, extent=(-1.0, 1.0),
                  near_far=None, dtype=torch.float64) -> Rays:
    """One ray per pixel, through its centre.

    ``pixel_subset`` is an (N, 2) tensor of (col, row) indices; default is
    the full image in row-major order.  Near/far come from the intersection
    with the cube ``extent`` unless ``near_far`` fixes them explicitly.
    """
    fx, fy, cx, cy = intr.matrix()
    pix = pixel_grid(intr, dtype) if pixel_subset is None else torch.as_tensor(pixel_subset, dtype=dtype)
    u = pix[:, 0] + 0.5
    v = pix[:, 1] + 0.5
    d_cam = torch.stack([(u - cx) / fx, -(v - cy) / fy, -torch.ones_like(u)], dim=-1)
    d_cam = d_cam / d_cam.norm(dim=-1, keepdim=True)
    rot = pose.rotation.to(dtype)
    dirs = d_cam @ rot  # R^T d for row vectors
    origins = pose.center.to(dtype).expand_as(dirs).clone()
    if near_far is not None:
        near = torch.full((dirs.shape[0],), float(near_far[0]), dtype=dtype)
        far = torch.full((dirs.shape[0],), float(near_far[1]), dtype=dtype)
    else:
        near, far = ray_box_intersect(origins, dirs, *extent)
    return Rays(origins, dirs, near, far)


def project(points: torch.Tensor, intr: Intrinsics, pose: Pose):
    """Perspective projection to continuous pixel coordinates.

    Returns ``(uv, in_front)``; ``in_front`` is False for points at or
    behind the camera plane, whose ``uv`` is meaningless.
    """
    fx, fy, cx, cy = intr.matrix()
    pc = points @ pose.rotation.to(points.dtype).T + pose.translation.to(points.dtype)
    depth = -pc[..., 2]
    in_front = depth > 1e-12
    safe = torch.where(in_front, depth, torch.ones_like(depth))
    u = cx + fx * pc[..., 0] / safe
    v = cy - fy * pc[..., 1] / safe
    return torch.stack([u, v], dim=-1), in_front


def rotation_geodesic(r1: torch.Tensor, r2: torch.Tensor) -> torch.Tensor:
    """Angle in radians of ``r1^T r2``."""
    c = ((r1.transpose(-1, -2) @ r2).diagonal(dim1=-2, dim2=-1).sum(-1) - 1.0) / 2.0
    return torch.arccos(c.clamp(-1.0, 1.0))


def axis_angle_to_matrix(axis_angle: torch.Tensor) -> torch.Tensor:
    """Rodrigues formula, batched over leading dims."""
    theta = axis_angle.norm(dim=-1, keepdim=True)
    small = theta < 1e-12
    k = axis_angle / torch.where(small, torch.ones_like(theta), theta)
    kx, ky, kz = k.unbind(-1)
    zero = torch.zeros_like(kx)
    kmat = torch.stack([zero, -kz, ky, kz, zero, -kx, -ky, kx, zero], dim=-1).reshape(*k.shape[:-1], 3, 3)
    eye = torch.eye(3, dtype=axis_angle.dtype).expand_as(kmat)
    s = torch.sin(theta)[..., None]
    c = torch.cos(theta)[..., None]
    return eye + s * kmat + (1 - c) * (kmat @ kmat)


def rotation_6d_to_matrix(d6: torch.Tensor) -> torch.Tensor:
    """Gram-Schmidt map from the continuous 6D parameterisation to SO(3)."""
    a1, a2 = d6[..., :3], d6[..., 3:]
    b1 = a1 / a1.norm(dim=-1, keepdim=True)
    b2 = a2 - (b1 * a2).sum(-1, keepdim=True) * b1
    b2 = b2 / b2.norm(dim=-1, keepdim=True)
    b3 = torch.linalg.cross(b1, b2, dim=-1)
    return torch.stack([b1, b2, b3], dim=-2)


def matrix_to_rotation_6d(r: torch.Tensor) -> torch.Tensor:
    return torch.cat([r[..., 0, :], r[..., 1, :]], dim=-1)


def random_rotation(generator: torch.Generator, dtype=torch.float64) -> torch.Tensor:
    q = torch.randn(4, generator=generator, dtype=dtype)
    q = q / q.norm()
    w, x, y, z = q
    return torch.stack([
        torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)]),
        torch.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)]),
        torch.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)]),
    ])
