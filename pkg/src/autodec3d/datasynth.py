"""Procedural multi-view datasets with analytic ground truth.

Scenes are unions of signed-distance primitives inside the canonical cube.
Each object is voxelised, rendered from cameras on a sphere, and written as

    <root>/<object_id>/frame_%04d.png
    <root>/<object_id>/mask_%04d.png
    <root>/<object_id>/cameras.json
    <root>/labels.json        (optional, object_id -> class)
    <root>/manifest.json
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .camera import ARTICULATED_FOV, RIGID_FOV, Intrinsics, Pose, generate_rays, orbit_pose
from .renderer import RenderSettings, render
from .voxgrid import VoxelGrid

KINDS = ("sphere", "box", "torus", "capsule")
DIFFICULTIES = {"min": (1, 1), "easy": (1, 2), "medium": (2, 3), "hard": (3, 4)}
N_CLASSES = len(KINDS) * 3

GT_RENDER = RenderSettings(n_samples=128, density_activation="identity")


class DatasetError(ValueError):
    pass


@dataclass
class Primitive:
    kind: str
    center: tuple[float, float, float]
    size: tuple[float, ...]  # sphere (r,), box half-extents (x,y,z), torus (R, r), capsule (half_len, r)
    color: tuple[float, float, float]
    density_scale: float = 20.0
    part: int = 0

    def sdf(self, p: torch.Tensor) -> torch.Tensor:
        q = p - torch.as_tensor(self.center, dtype=p.dtype)
        if self.kind == "sphere":
            return q.norm(dim=-1) - self.size[0]
        if self.kind == "box":
            d = q.abs() - torch.as_tensor(self.size, dtype=p.dtype)
            outside = d.clamp(min=0).norm(dim=-1)
            inside = d.amax(dim=-1).clamp(max=0)
            return outside + inside
        if self.kind == "torus":
            big, small = self.size
            ring = torch.stack([q[..., [0, 2]].norm(dim=-1) - big, q[..., 1]], dim=-1)
            return ring.norm(dim=-1) - small
        if self.kind == "capsule":
            half, r = self.size
            y = q[..., 1].clamp(-half, half)
            return (q - torch.stack([torch.zeros_like(y), y, torch.zeros_like(y)], dim=-1)).norm(dim=-1) - r
        raise ValueError(f"unknown primitive kind {self.kind!r}")

    def bounding_radius(self) -> float:
        c = np.asarray(self.center)
        if self.kind == "sphere":
            ext = np.full(3, self.size[0])
        elif self.kind == "box":
            ext = np.asarray(self.size)
        elif self.kind == "torus":
            ext = np.array([self.size[0] + self.size[1], self.size[1], self.size[0] + self.size[1]])
        else:
            ext = np.array([self.size[1], self.size[0] + self.size[1], self.size[1]])
        return float(np.max(np.abs(c) + ext))


@dataclass
class Articulation:
    """Per-frame rigid transforms of each part, canonical -> posed."""

    n_parts: int
    frames: list  # frames[f][p] = {"rotation": 9 floats, "translation": 3 floats}
    hinge_angles: list = field(default_factory=list)

    def poses(self, frame: int, dtype=torch.float64) -> list[Pose]:
        return [Pose.from_dict(d, dtype) for d in self.frames[frame]]


@dataclass
class SceneSpec:
    seed: int
    primitives: list[Primitive]
    parts: Articulation | None = None

    def __post_init__(self):
        for prim in self.primitives:
            if not all(0.0 <= c <= 1.0 for c in prim.color):
                raise ValueError("primitive colours must lie in [0, 1]")

    @property
    def label(self) -> int:
        if not self.primitives:
            return 0
        main = max(self.primitives, key=lambda p: p.bounding_radius())
        return KINDS.index(main.kind) * 3 + int(np.argmax(main.color))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        prims = [Primitive(**{**p, "center": tuple(p["center"]), "size": tuple(p["size"]),
                              "color": tuple(p["color"])}) for p in d["primitives"]]
        parts = Articulation(**d["parts"]) if d.get("parts") else None
        return cls(d["seed"], prims, parts)


def _rot_z(angle: float) -> list[float]:
    c, s = math.cos(angle), math.sin(angle)
    return [c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0]


def hinge_frames(angles) -> list:
    """Two-part poses: part 0 fixed, part 1 rotates about the z axis through the origin."""
    ident = {"rotation": [1.0, 0, 0, 0, 1.0, 0, 0, 0, 1.0], "translation": [0.0, 0.0, 0.0]}
    return [[dict(ident), {"rotation": _rot_z(a), "translation": [0.0, 0.0, 0.0]}] for a in angles]


def make_hinge_scene(seed: int, angles, colors=None) -> SceneSpec:
    rng = np.random.default_rng(seed)
    if colors is None:
        colors = [tuple(float(v) for v in rng.uniform(0.2, 0.95, 3)) for _ in range(2)]
    body_len = float(rng.uniform(0.25, 0.35))
    arm_len = float(rng.uniform(0.25, 0.32))
    thick = float(rng.uniform(0.1, 0.14))
    prims = [
        Primitive("box", (-body_len - 0.02, 0.0, 0.0), (body_len, thick + 0.03, thick + 0.03), colors[0], part=0),
        Primitive("box", (arm_len + 0.02, 0.0, 0.0), (arm_len, thick, thick), colors[1], part=1),
    ]
    angles = [float(a) for a in angles]
    return SceneSpec(seed, prims, Articulation(2, hinge_frames(angles), angles))


def make_scene(seed: int, difficulty="easy", n_frames: int = 8, color=None) -> SceneSpec:
    """Deterministic random scene.

    ``difficulty`` is one of ``min`` (one centred sphere), ``easy``,
    ``medium``, ``hard`` (1-4 primitives), an integer primitive count, or
    ``articulated`` (two-part hinge with ``n_frames`` poses).  ``color``
    overrides every primitive colour.
    """
    rng = np.random.default_rng(seed)
    if difficulty == "articulated":
        angles = np.deg2rad(rng.uniform(0.0, 60.0, n_frames))
        colors = None if color is None else [tuple(color)] * 2
        return make_hinge_scene(seed, angles, colors)
    if difficulty == "min":
        col = tuple(color) if color is not None else tuple(float(v) for v in rng.uniform(0.2, 0.95, 3))
        return SceneSpec(seed, [Primitive("sphere", (0.0, 0.0, 0.0), (0.5,), col)])
    if isinstance(difficulty, int):
        lo = hi = difficulty
    else:
        lo, hi = DIFFICULTIES[difficulty]
    count = int(rng.integers(lo, hi + 1))
    prims = []
    for _ in range(count):
        kind = KINDS[int(rng.integers(len(KINDS)))]
        if kind == "sphere":
            size = (float(rng.uniform(0.2, 0.4)),)
        elif kind == "box":
            size = tuple(float(v) for v in rng.uniform(0.12, 0.32, 3))
        elif kind == "torus":
            size = (float(rng.uniform(0.2, 0.35)), float(rng.uniform(0.06, 0.12)))
        else:
            size = (float(rng.uniform(0.1, 0.3)), float(rng.uniform(0.08, 0.18)))
        center = tuple(float(v) for v in rng.uniform(-0.35, 0.35, 3))
        col = tuple(color) if color is not None else tuple(float(v) for v in rng.uniform(0.1, 0.95, 3))
        prims.append(Primitive(kind, center, size, col))
    return SceneSpec(seed, prims)


def _union(scene: SceneSpec, points: torch.Tensor, sharpness: float, primitives=None):
    prims = scene.primitives if primitives is None else primitives
    dens = torch.stack([p.density_scale * torch.sigmoid(-p.sdf(points) / sharpness) for p in prims], dim=-1)
    best = dens.argmax(dim=-1)
    colors = torch.tensor([p.color for p in prims], dtype=points.dtype)
    return dens.gather(-1, best[..., None])[..., 0], colors[best], best


def voxelize(scene: SceneSpec, resolution: int, sharpness: float | None = None, frame: int | None = None,
             extent=(-1.0, 1.0)) -> VoxelGrid:
    """Voxelise a scene into a radiance grid.

    Density is ``density_scale * sigmoid(-sdf / sharpness)`` with the
    union taken as the max over primitives and colour from the argmax.
    Articulated scenes get two extra channel groups: a one-hot LBS weight
    per part (from the densest part, so weights are defined everywhere).
    With ``frame`` set, primitives are placed in that frame's pose.
    """
    if resolution < 8:
        raise ValueError("voxelize needs resolution >= 8")
    grid = VoxelGrid.zeros(resolution, 4, extent, dtype=torch.float64)
    if not scene.primitives:
        return grid.with_values(grid.values.float())
    sharpness = sharpness or 0.5 * grid.cell_size
    pts = grid.cell_centers()
    if frame is not None and scene.parts is not None:
        poses = scene.parts.poses(frame)
        per_part = []
        for p in scene.primitives:
            pose = poses[p.part]
            # evaluate sdf at the canonical preimage of each cell centre
            per_part.append(pose.inverse().apply(pts))
        dens = torch.stack([p.density_scale * torch.sigmoid(-p.sdf(q) / sharpness)
                            for p, q in zip(scene.primitives, per_part)], dim=-1)
        best = dens.argmax(dim=-1)
        colors = torch.tensor([p.color for p in scene.primitives], dtype=pts.dtype)
        density, rgb = dens.gather(-1, best[..., None])[..., 0], colors[best]
    else:
        density, rgb, best = _union(scene, pts, sharpness)
    values = torch.cat([density[..., None], rgb], dim=-1)
    layout = "radiance"
    if scene.parts is not None and frame is None:
        part_ids = torch.tensor([p.part for p in scene.primitives])[best]
        lbs = torch.nn.functional.one_hot(part_ids, scene.parts.n_parts).to(values.dtype)
        values = torch.cat([values, lbs], dim=-1)
        layout = "articulated"
    return VoxelGrid(values.float(), tuple(extent), layout)


@dataclass
class CameraDistribution:
    distance: float = 4.0
    elevation_min: float = -0.3
    elevation_max: float = 0.8
    fov: float = RIGID_FOV

    @classmethod
    def articulated(cls) -> "CameraDistribution":
        return cls(distance=16.0, elevation_min=-0.2, elevation_max=0.4, fov=ARTICULATED_FOV)


def sample_cameras(n_views: int, image_size: int, dist: CameraDistribution, seed: int):
    rng = np.random.default_rng(seed)
    intr = Intrinsics(image_size, image_size, fov=dist.fov)
    cams = []
    for _ in range(n_views):
        az = float(rng.uniform(0.0, 2 * math.pi))
        el = float(rng.uniform(dist.elevation_min, dist.elevation_max))
        cams.append((intr, orbit_pose(az, el, dist.distance)))
    return cams


@dataclass
class FrameRecord:
    index: int
    image_path: Path
    mask_path: Path
    intrinsics: Intrinsics
    pose: Pose
    part_poses: list[Pose] | None = None

    def load_image(self) -> torch.Tensor:
        return torch.from_numpy(np.asarray(Image.open(self.image_path).convert("RGB"), dtype=np.float32) / 255.0)

    def load_mask(self) -> torch.Tensor:
        return torch.from_numpy(np.asarray(Image.open(self.mask_path).convert("L"), dtype=np.float32) / 255.0)


@dataclass
class ObjectRecord:
    object_id: str
    frames: list[FrameRecord]
    label: int | None = None


@dataclass
class Dataset:
    root: Path
    objects: list[ObjectRecord]

    def __len__(self):
        return len(self.objects)

    @property
    def image_size(self) -> tuple[int, int]:
        intr = self.objects[0].frames[0].intrinsics
        return intr.height, intr.width

    @property
    def articulated(self) -> bool:
        return self.objects[0].frames[0].part_poses is not None


def _to_png(array: np.ndarray) -> Image.Image:
    return Image.fromarray(np.clip(np.round(array * 255.0), 0, 255).astype(np.uint8))


def render_views(grid: VoxelGrid, cameras, settings: RenderSettings = GT_RENDER):
    """Yield (color HxWx3, occupancy HxW) for each (intrinsics, pose)."""
    for intr, pose in cameras:
        rays = generate_rays(intr, pose, extent=grid.extent, dtype=torch.float32)
        with torch.no_grad():
            out = render(grid, rays, settings).image(intr.height, intr.width)
        yield out.color, out.occupancy


def render_dataset(scene: SceneSpec, n_views: int, image_size: int, camera_distribution: CameraDistribution | None,
                   out_dir, object_id: str | None = None, gt_resolution: int = 64) -> ObjectRecord:
    """Render one scene into ``out_dir/<object_id>`` and return its index record."""
    dist = camera_distribution or (CameraDistribution.articulated() if scene.parts else CameraDistribution())
    object_id = object_id or f"obj_{scene.seed:05d}"
    obj_dir = Path(out_dir) / object_id
    try:
        obj_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {obj_dir}: {exc}") from exc
    cams = sample_cameras(n_views, image_size, dist, scene.seed)
    articulated = scene.parts is not None
    if articulated and len(scene.parts.frames) < n_views:
        raise ValueError(f"scene has {len(scene.parts.frames)} articulation frames, need {n_views}")
    canonical = None if articulated else voxelize(scene, gt_resolution)
    records, cam_json = [], []
    for i, (intr, pose) in enumerate(cams):
        grid = voxelize(scene, gt_resolution, frame=i) if articulated else canonical
        color, occ = next(render_views(grid, [(intr, pose)]))
        mask = (occ > 0.5).float()
        img_path = obj_dir / f"frame_{i:04d}.png"
        mask_path = obj_dir / f"mask_{i:04d}.png"
        try:
            _to_png(color.numpy()).save(img_path)
            _to_png(mask.numpy()).save(mask_path)
        except OSError as exc:
            raise OSError(f"failed writing frame {i} of {object_id} to {obj_dir}: {exc}") from exc
        entry = {"frame": i, "intrinsics": intr.to_dict(), **pose.to_dict()}
        part_poses = None
        if articulated:
            part_poses = scene.parts.poses(i)
            entry["part_poses"] = scene.parts.frames[i]
        cam_json.append(entry)
        records.append(FrameRecord(i, img_path, mask_path, intr, pose, part_poses))
    with open(obj_dir / "cameras.json", "w") as fh:
        json.dump(cam_json, fh, indent=1)
    with open(obj_dir / "scene.json", "w") as fh:
        json.dump(scene.to_dict(), fh, indent=1)
    return ObjectRecord(object_id, records, scene.label)


def synthesize_dataset(out_dir, n_objects: int, n_views: int = 8, image_size: int = 64, difficulty="easy",
                       seed: int = 0, gt_resolution: int = 64, color=None,
                       camera_distribution: CameraDistribution | None = None) -> Dataset:
    """Generate ``n_objects`` scenes with seeds ``seed, seed+1, ...``."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    objects, labels = [], {}
    for k in range(n_objects):
        scene = make_scene(seed + k, difficulty, n_frames=n_views, color=color)
        rec = render_dataset(scene, n_views, image_size, camera_distribution, root,
                             object_id=f"obj_{k:04d}", gt_resolution=gt_resolution)
        objects.append(rec)
        labels[rec.object_id] = rec.label
    with open(root / "labels.json", "w") as fh:
        json.dump(labels, fh, indent=1, sort_keys=True)
    manifest = {"n_objects": n_objects, "n_views": n_views, "image_size": image_size,
                "difficulty": difficulty, "seed": seed, "seeds": [seed + k for k in range(n_objects)],
                "gt_resolution": gt_resolution, "format_version": 1}
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return Dataset(root, objects)


def load_dataset(root) -> Dataset:
    """Index a dataset directory, validating that every frame is complete."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root}: not a directory")
    labels = {}
    if (root / "labels.json").exists():
        labels = json.loads((root / "labels.json").read_text())
    objects = []
    size = None
    for obj_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        cam_file = obj_dir / "cameras.json"
        if not cam_file.exists():
            raise DatasetError(f"{obj_dir.name}: missing cameras.json")
        frames = []
        for entry in json.loads(cam_file.read_text()):
            i = int(entry["frame"])
            img = obj_dir / f"frame_{i:04d}.png"
            mask = obj_dir / f"mask_{i:04d}.png"
            for path, what in ((img, "image"), (mask, "mask")):
                if not path.exists():
                    raise DatasetError(f"{obj_dir.name}/frame {i}: missing {what} {path.name}")
            intr = Intrinsics.from_dict(entry["intrinsics"])
            if size is None:
                size = (intr.width, intr.height)
            elif size != (intr.width, intr.height):
                raise DatasetError(f"{obj_dir.name}/frame {i}: image size {intr.width}x{intr.height} != {size}")
            parts = [Pose.from_dict(d) for d in entry["part_poses"]] if "part_poses" in entry else None
            frames.append(FrameRecord(i, img, mask, intr, Pose.from_dict(entry), parts))
        if not frames:
            raise DatasetError(f"{obj_dir.name}: no frames")
        # every mask/image on disk must be listed in cameras.json
        listed = {f.index for f in frames}
        for path in obj_dir.glob("mask_*.png"):
            if int(path.stem.split("_")[1]) not in listed:
                raise DatasetError(f"{obj_dir.name}/{path.name}: no camera entry")
        for path in obj_dir.glob("frame_*.png"):
            if int(path.stem.split("_")[1]) not in listed:
                raise DatasetError(f"{obj_dir.name}/{path.name}: no camera entry")
        objects.append(ObjectRecord(obj_dir.name, frames, labels.get(obj_dir.name)))
    if not objects:
        raise DatasetError(f"{root}: no objects")
    return Dataset(root, objects)


def load_scene(obj_dir) -> SceneSpec:
    return SceneSpec.from_dict(json.loads((Path(obj_dir) / "scene.json").read_text()))
