import numpy as np
import pytest
import torch

from autodec3d.camera import Intrinsics, Pose, generate_rays
from autodec3d.config import load_config
from autodec3d.datasynth import synthesize_dataset
from autodec3d.voxgrid import VoxelGrid

torch.set_num_threads(1)


def tiny_config(*overrides, seed=0):
    """Small decoder/denoiser so unit tests stay fast."""
    base = [
        "render.n_samples=16",
        "render.n_samples_eval=16",
        "embedding.dim=16",
        "decoder.embed_dim=16",
        "decoder.base_channels=16",
        "decoder.n_up_blocks=2",
        "decoder.blocks_per_resolution=1",
        "decoder.attention_resolutions=[8]",
        "decoder.latent_tap_resolution=8",
        "autodecoder.batch_objects=2",
        "autodecoder.views_per_object=2",
        "autodecoder.pyramid_levels=1",
        "denoiser.channels=8",
        "denoiser.depth=1",
        "denoiser.channel_mult=[1,2]",
        "denoiser.attention_resolutions=[4]",
        "denoiser.cross_attention_resolutions=[4]",
        "denoiser.cond_dim=8",
        "denoiser.heads=2",
        "denoiser.noise_embed_dim=16",
        "diffusion.batch_size=4",
    ]
    return load_config(None, base + list(overrides), seed)


@pytest.fixture
def make_tiny_config():
    return tiny_config


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_ds")
    synthesize_dataset(root, 2, n_views=3, image_size=12, difficulty="easy", seed=3, gt_resolution=16)
    return root


@pytest.fixture(scope="session")
def hinge_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("hinge_ds")
    synthesize_dataset(root, 2, n_views=3, image_size=12, difficulty="articulated", seed=5, gt_resolution=16)
    return root


def axis_camera(size=8, fov=0.7, distance=3.0):
    """Camera on +z looking down -z at the origin."""
    return Intrinsics(size, size, fov=fov), Pose(torch.eye(3, dtype=torch.float64),
                                                 torch.tensor([0.0, 0.0, -distance], dtype=torch.float64))


def random_grid(s=8, c=4, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return VoxelGrid(torch.rand(s, s, s, c, generator=g, dtype=dtype))


def center_rays(n=1, near=0.0, far=1.0, dtype=torch.float64):
    from autodec3d.camera import Rays

    o = torch.zeros(n, 3, dtype=dtype)
    o[:, 0] = -0.5
    d = torch.zeros(n, 3, dtype=dtype)
    d[:, 0] = 1.0
    return Rays(o, d, torch.full((n,), near, dtype=dtype), torch.full((n,), far, dtype=dtype))


# -- acceptance reporting ------------------------------------------------------------

_AC_RESULTS: dict[int, list[tuple[str, str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n): test belongs to acceptance criterion n")


def pytest_runtest_logreport(report):
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        for n in getattr(report, "acceptance", ()):
            _AC_RESULTS.setdefault(n, []).append((report.nodeid.split("::")[-1], report.outcome))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    outcome.get_result().acceptance = [m.args[0] for m in item.iter_markers("acceptance")]


def pytest_terminal_summary(terminalreporter):
    if not _AC_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_AC_RESULTS):
        res = _AC_RESULTS[n]
        ok = all(o == "passed" for _, o in res)
        failed = [name for name, o in res if o != "passed"]
        detail = f"{len(res)} checks" + (f"; failing: {', '.join(failed)}" if failed else "")
        terminalreporter.write_line(f"AC{n:<2} {'PASS' if ok else 'FAIL'}  ({detail})")
