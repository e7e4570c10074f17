import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from autodec3d.articulation import (
    KeypointPredictor,
    articulated_rays,
    lbs_forward,
    lbs_inverse_sample,
    load_pose_sequence,
    motion_transfer,
    pnp_solve,
    render_articulated,
    save_pose_sequence,
)
from autodec3d.camera import Intrinsics, Pose, generate_rays, orbit_pose, project, random_rotation, rotation_geodesic
from autodec3d.datasynth import make_hinge_scene, voxelize
from autodec3d.renderer import RenderSettings, render
from autodec3d.voxgrid import VoxelGrid

from conftest import axis_camera

F64 = torch.float64


def _rand_pose(seed, scale=0.3):
    g = torch.Generator().manual_seed(seed)
    return Pose(random_rotation(g), torch.randn(3, generator=g, dtype=F64) * scale)


def _translation(t):
    return Pose(torch.eye(3, dtype=F64), torch.as_tensor(t, dtype=F64))


# -- skinning -------------------------------------------------------------------


def test_lbs_forward_examples():
    x = torch.rand(20, 3, dtype=F64) * 2 - 1
    ident = [Pose.identity(), Pose.identity()]
    w = torch.softmax(torch.randn(20, 2, dtype=F64), -1)
    assert torch.equal(lbs_forward(x, ident, w), x)
    t = torch.tensor([0.1, -0.2, 0.3], dtype=F64)
    assert torch.allclose(lbs_forward(x, [_translation(t)], torch.ones(20, 1, dtype=F64)), x + t, atol=1e-15)
    t1, t2 = [0.2, 0.0, 0.0], [0.0, 0.4, -0.2]
    half = torch.full((20, 2), 0.5, dtype=F64)
    out = lbs_forward(x, [_translation(t1), _translation(t2)], half)
    assert torch.allclose(out, x + torch.tensor([0.1, 0.2, -0.1], dtype=F64), atol=1e-15)


def _lbs_grid(values):
    return VoxelGrid(values, layout="lbs")


def test_inverse_identity_is_exact():
    lbs = _lbs_grid(torch.rand(6, 6, 6, 3, dtype=F64))
    x = torch.rand(50, 3, dtype=F64) * 2 - 1
    x_c, covered, w = lbs_inverse_sample(x, [Pose.identity()] * 3, lbs)
    assert covered.all() and torch.equal(x_c, x)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_single_part_round_trip(seed):
    pose = _rand_pose(seed)
    lbs = _lbs_grid(torch.ones(4, 4, 4, 1, dtype=F64))
    x = torch.rand(32, 3, dtype=F64) * 1.6 - 0.8
    x_d = lbs_forward(x, [pose], lbs)
    x_c, covered, _ = lbs_inverse_sample(x_d, [pose], lbs)
    assert covered.all()
    assert (x_c - x).abs().max() < 1e-6


def test_two_disjoint_parts_map_by_own_inverse():
    s = 8
    grid = VoxelGrid.zeros(s, 2, dtype=F64)
    left = grid.cell_centers()[..., 0] < 0
    vals = torch.stack([left, ~left], -1).to(F64)
    lbs = grid.with_values(vals, "lbs")
    a, b = _translation([0.0, 0.3, 0.0]), _translation([0.0, -0.3, 0.0])
    # points well inside each half after the inverse move
    xl = torch.tensor([[-0.7, 0.3, 0.1], [-0.5, 0.5, -0.2]], dtype=F64)
    xr = torch.tensor([[0.6, -0.3, 0.0], [0.8, -0.1, 0.3]], dtype=F64)
    x_c, covered, _ = lbs_inverse_sample(torch.cat([xl, xr]), [a, b], lbs)
    assert covered.all()
    assert torch.allclose(x_c[:2], a.inverse().apply(xl), atol=1e-15)
    assert torch.allclose(x_c[2:], b.inverse().apply(xr), atol=1e-15)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_inverse_weights_sum_to_one(seed):
    g = torch.Generator().manual_seed(seed)
    lbs = _lbs_grid(torch.rand(5, 5, 5, 3, generator=g, dtype=F64))
    poses = [_rand_pose(seed + k) for k in range(3)]
    x = torch.rand(40, 3, generator=g, dtype=F64) * 2 - 1
    _, covered, w = lbs_inverse_sample(x, poses, lbs)
    assert torch.allclose(w[covered].sum(-1), torch.ones(int(covered.sum()), dtype=F64), atol=1e-12)
    assert (w >= 0).all()


def test_uncovered_points_are_flagged():
    lbs = _lbs_grid(torch.zeros(4, 4, 4, 2, dtype=F64))
    _, covered, _ = lbs_inverse_sample(torch.zeros(3, 3, dtype=F64), [Pose.identity()] * 2, lbs)
    assert not covered.any()


# -- rendering ------------------------------------------------------------------


def _articulated_grid(n_parts, s=12, seed=0):
    g = torch.Generator().manual_seed(seed)
    vals = torch.rand(s, s, s, 4 + n_parts, generator=g, dtype=F64)
    vals[..., 0] *= 4
    vals[..., 4:] = torch.softmax(vals[..., 4:] * 3, -1)
    return VoxelGrid(vals, layout="articulated")


def test_identity_poses_match_rigid_render_bit_exactly():
    grid = _articulated_grid(2)
    intr, cam = axis_camera(size=6)
    st_ = RenderSettings(24)
    a = render_articulated(grid, [Pose.identity()] * 2, articulated_rays(intr, cam, margin=1.0, dtype=F64), st_)
    b = render(grid.with_values(grid.values[..., :4], "radiance"), generate_rays(intr, cam), st_)
    assert torch.equal(a.color, b.color) and torch.equal(a.occupancy, b.occupancy)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_single_part_equals_rigid_with_moved_camera(seed):
    grid = _articulated_grid(1, seed=seed)
    intr = Intrinsics(8, 8, fov=0.7)
    cam = orbit_pose(0.4 * seed, 0.3, 4.0)
    part = _rand_pose(seed + 10, scale=0.2)
    st_ = RenderSettings(32)
    art = render_articulated(grid, [part], articulated_rays(intr, cam, part, margin=1.0, dtype=F64), st_)
    rigid = render(grid.with_values(grid.values[..., :4], "radiance"), generate_rays(intr, cam.compose(part)), st_)
    assert (art.color - rigid.color).abs().max() < 1e-5
    assert (art.occupancy - rigid.occupancy).abs().max() < 1e-5


def test_global_rotation_is_camera_duality():
    grid = _articulated_grid(2, s=16, seed=4)
    intr = Intrinsics(16, 16, fov=0.7)
    cam = orbit_pose(0.2, 0.1, 4.0)
    rot = Pose(random_rotation(torch.Generator().manual_seed(9)), torch.zeros(3, dtype=F64))
    st_ = RenderSettings(64)
    posed = render_articulated(grid, [rot, rot], articulated_rays(intr, cam, rot, margin=1.0, dtype=F64), st_)
    rigid = render(grid.with_values(grid.values[..., :4], "radiance"), generate_rays(intr, cam.compose(rot)), st_)
    mse = ((posed.color - rigid.color) ** 2).mean().item()
    assert 10 * math.log10(1 / max(mse, 1e-30)) > 40


def _arm_angle(occupancy: torch.Tensor, hub_px: float) -> float:
    """Arm direction of a top-down hinge render from the principal axis of its mask.

    Keeps right-half pixels outside a disc around the hinge, a set that is
    mirror-symmetric about the arm axis, and takes second moments about the
    hinge point so the dominant axis is the arm direction.
    """
    h, w = occupancy.shape
    v, u = np.nonzero(occupancy.numpy() > 0.5)
    x, y = u + 0.5 - w / 2, h / 2 - (v + 0.5)
    keep = (x > 0) & (np.hypot(x, y) > hub_px)
    pts = np.stack([x[keep], y[keep]])
    evals, evecs = np.linalg.eigh(pts @ pts.T)
    d = evecs[:, -1] * np.sign(evecs[0, -1])
    return math.degrees(math.atan2(d[1], d[0]))


def test_hinge_motion_transfer_angle():
    driver = make_hinge_scene(11, [0.0, math.radians(30.0)])
    toy = make_hinge_scene(12, [0.0])
    grid = voxelize(toy, 64).with_values(voxelize(toy, 64).values.double())
    intr, cam = axis_camera(size=96, fov=0.5, distance=4.0)
    frames = motion_transfer(grid, [driver.parts.poses(0), driver.parts.poses(1)], intr, cam,
                             RenderSettings(96, density_activation="identity"))
    hub = 0.2 * intr.matrix()[0] / 4.0  # 0.2 world units at the hinge depth
    assert abs(_arm_angle(frames[0].occupancy, hub)) < 5.0
    assert abs(_arm_angle(frames[1].occupancy, hub) - 30.0) < 5.0


def test_motion_transfer_identity_and_own_poses():
    toy = make_hinge_scene(3, [0.0, 0.4])
    grid = voxelize(toy, 16)
    intr, cam = axis_camera(size=8)
    st_ = RenderSettings(16)
    frames = motion_transfer(grid, [[Pose.identity()] * 2] * 2, intr, cam, st_)
    assert torch.equal(frames[0].color, frames[1].color)
    own = motion_transfer(grid, [toy.parts.poses(1)], intr, cam, st_)[0]
    direct = render_articulated(grid, toy.parts.poses(1), articulated_rays(intr, cam, dtype=torch.float32), st_)
    assert torch.equal(own.color.reshape(-1, 3), direct.color)
    with pytest.raises(ValueError):
        motion_transfer(grid, [], intr, cam)


def test_pose_sequence_file_round_trip(tmp_path):
    frames = [[_rand_pose(k), _rand_pose(k + 1)] for k in range(3)]
    back = load_pose_sequence(save_pose_sequence(frames, tmp_path / "seq.json"))
    for fa, fb in zip(frames, back):
        for a, b in zip(fa, fb):
            assert torch.equal(a.rotation, b.rotation) and torch.equal(a.translation, b.translation)
    (tmp_path / "bad.json").write_text("[[[1, 2, 3]]]")
    with pytest.raises(ValueError, match="frame 0"):
        load_pose_sequence(tmp_path / "bad.json")


# -- PnP ------------------------------------------------------------------------------


def _pnp_case(seed, n=125, noise=0.0):
    g = torch.Generator().manual_seed(seed)
    intr = Intrinsics(64, 64, fov=0.7)
    pts = torch.rand(n, 3, generator=g, dtype=F64) - 0.5
    cam = orbit_pose(float(torch.rand(1, generator=g)) * 6.28, 0.3, 3.0)
    part = _rand_pose(seed + 1000, scale=0.1)
    pose = cam.compose(part)  # camera-from-part
    uv, front = project(pts, intr, pose)
    assert front.all()
    uv = uv + noise * torch.randn(uv.shape, generator=g, dtype=F64)
    return pts, uv, intr, pose


@pytest.mark.parametrize("seed", range(5))
def test_pnp_exact_correspondences(seed):
    pts, uv, intr, pose = _pnp_case(seed)
    res = pnp_solve(pts, uv, intr)
    assert res.ok
    assert rotation_geodesic(res.rotation, pose.rotation).item() < 1e-3
    assert (res.translation - pose.translation).norm().item() < 1e-3


def test_pnp_identity_pose():
    intr = Intrinsics(64, 64, fov=0.7)
    pts = torch.rand(20, 3, generator=torch.Generator().manual_seed(0), dtype=F64) - 0.5
    pts[:, 2] -= 4.0
    uv, _ = project(pts, intr, Pose.identity())
    res = pnp_solve(pts, uv, intr)
    assert torch.allclose(res.rotation, torch.eye(3, dtype=F64), atol=1e-9)
    assert torch.allclose(res.translation, torch.zeros(3, dtype=F64), atol=1e-9)


def test_pnp_half_pixel_noise():
    errs = []
    for seed in range(100):
        pts, uv, intr, pose = _pnp_case(seed, noise=0.5)
        res = pnp_solve(pts, uv, intr)
        assert res.ok
        errs.append(math.degrees(rotation_geodesic(res.rotation, pose.rotation).item()))
    assert max(errs) < 2.0, max(errs)


def test_pnp_degenerate_inputs_fail():
    pts, uv, intr, _ = _pnp_case(0, n=10)
    assert not pnp_solve(pts[:5], uv[:5], intr).ok
    planar = pts.clone()
    planar[:, 2] = 0.0
    assert not pnp_solve(planar, uv, intr).ok


def test_pnp_gradient_matches_finite_differences():
    pts, uv, intr, _ = _pnp_case(3, n=10, noise=0.3)
    wr = torch.randn(3, 3, generator=torch.Generator().manual_seed(1), dtype=F64)
    wt = torch.randn(3, generator=torch.Generator().manual_seed(2), dtype=F64)

    def f(x2):
        res = pnp_solve(pts, x2, intr)
        return (res.rotation * wr).sum() + (res.translation * wt).sum()

    x = uv.clone().requires_grad_(True)
    f(x).backward()
    fd = torch.zeros_like(uv)
    eps = 1e-6
    for i in range(uv.shape[0]):
        for j in range(2):
            p, m = uv.clone(), uv.clone()
            p[i, j] += eps
            m[i, j] -= eps
            fd[i, j] = (f(p) - f(m)) / (2 * eps)
    assert ((x.grad - fd).norm() / fd.norm()).item() < 1e-2
    # gradients reach the 3D points too
    p3 = pts.clone().requires_grad_(True)
    pnp_solve(p3, uv, intr).translation.sum().backward()
    assert p3.grad is not None and torch.isfinite(p3.grad).all()


def test_pnp_is_deterministic():
    pts, uv, intr, _ = _pnp_case(7, noise=0.5)
    a, b = pnp_solve(pts, uv, intr), pnp_solve(pts, uv, intr)
    assert torch.equal(a.rotation, b.rotation) and torch.equal(a.translation, b.translation)


def test_keypoint_predictor_output_range():
    net = KeypointPredictor(3, 5, input_size=16, channels=4)
    out = net(torch.rand(2, 40, 30, 3))
    assert out.shape == (2, 3, 5, 2)
    assert (out[..., 0] >= 0).all() and (out[..., 0] <= 30).all()
    assert (out[..., 1] >= 0).all() and (out[..., 1] <= 40).all()
