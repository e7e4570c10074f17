"""Acceptance criteria AC1-AC12.

Each test carries ``@pytest.mark.acceptance(n)``; the terminal summary prints one
PASS/FAIL line per criterion.  Run alone with ``pytest tests/test_acceptance.py -s``.
"""

import hashlib
import json
import math
import time

import numpy as np
import pytest
import torch
from scipy.stats import chisquare

import test_articulation as ART
import test_embedding as EMB
import test_geomeval as GEO
import test_latentdiff as LD
import test_renderer as REN
from autodec3d.autodecoder import Trainer, hash_index, object_latents
from autodec3d.autodecoder.decoder import decode_latent
from autodec3d.cli import _settings, main
from autodec3d.config import load_config
from autodec3d.datasynth import load_dataset, sample_cameras, CameraDistribution, synthesize_dataset
from autodec3d.camera import generate_rays
from autodec3d.latentdiff.training import DiffusionTrainer
from autodec3d.renderer import render

from conftest import tiny_config

ac = pytest.mark.acceptance

# AC3: budget and threshold frozen from the oracle run on the desk preset
AC3_STEPS = 1000
AC3_MIN_PSNR = 30.0
AC3_MAX_SECONDS = 30 * 60


def _report(name, **vals):
    print(f"\n[{name}] " + " ".join(f"{k}={v}" for k, v in vals.items()))


def _sha_dir(path):
    h = hashlib.sha256()
    for p in sorted(path.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(path).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


# -- AC1 / AC2: renderer --------------------------------------------------------------


@ac(1)
def test_ac1_slab_oracle_and_convergence():
    t0 = time.perf_counter()
    REN.test_homogeneous_slab_matches_transmittance()
    REN.test_stratified_quadrature_converges()
    assert time.perf_counter() - t0 < 5.0


@ac(2)
def test_ac2_render_gradient_check():
    t0 = time.perf_counter()
    REN.test_render_gradient_matches_finite_differences()
    assert time.perf_counter() - t0 < 30.0


# -- AC3 / AC8: desk overfit and generation on its latents -------------------------------


@pytest.fixture(scope="module")
def overfit(tmp_path_factory):
    root = tmp_path_factory.mktemp("overfit")
    cfg = load_config("desk")
    s = cfg.synth
    synthesize_dataset(root / "ds", s.n_objects, s.n_views, s.image_size, s.difficulty, cfg.seed, s.gt_resolution)
    t0 = time.perf_counter()
    trainer = Trainer(load_dataset(root / "ds"), cfg, root / "ad")
    trainer.train(AC3_STEPS, log_every=10**9)
    seconds = time.perf_counter() - t0
    trainer.save()
    return trainer, seconds, root


@ac(3)
def test_ac3_autodecoder_overfit(overfit):
    trainer, seconds, _ = overfit
    ev = trainer.evaluate()
    _report("AC3", steps=trainer.step, holdout_psnr=round(ev["psnr"], 3), iou=round(ev["iou"], 4),
            seconds=round(seconds))
    assert trainer.data.images.shape[1:4] == (8, 64, 64) and trainer.n_objects == 8
    assert trainer.model.cfg.decoder.output_resolution == 32
    assert ev["psnr"] >= AC3_MIN_PSNR
    assert seconds < AC3_MAX_SECONDS


@pytest.fixture(scope="module")
def diffusion(overfit):
    trainer, _, root = overfit
    lat = object_latents(trainer.model)
    dt = DiffusionTrainer(lat, trainer.cfg, out_dir=root / "diff")
    dt.train()
    dt.save(extra={"autodecoder": str((root / "ad").resolve())})
    return dt, trainer, root


@ac(8)
def test_ac8_generation_from_overfit_latents(diffusion):
    dt, trainer, _ = diffusion
    assert dt.model.cfg.decoder.latent_tap_resolution == 8
    assert all(math.isfinite(h["loss"]) for h in dt.history)
    settings = _settings(trainer.cfg)
    cams = sample_cameras(2, 32, CameraDistribution(), 0)
    for steps in (16, 32, 64):
        t0 = time.perf_counter()
        lat = dt.model.sample(2, seed=steps, n_steps=steps)
        per_sample = (time.perf_counter() - t0) / 2
        _report("AC8", steps=steps, seconds_per_sample=round(per_sample, 3))
        with torch.no_grad():
            for i in range(2):
                grid = decode_latent(trainer.model.decoder, lat[i : i + 1])
                assert torch.isfinite(grid.values).all()
                for intr, pose in cams:
                    out = render(grid, generate_rays(intr, pose, dtype=torch.float32), settings)
                    assert torch.isfinite(out.color).all()
                    assert out.occupancy.min() >= 0 and out.occupancy.max() <= 1


# -- AC4: foreground loss on a black object ----------------------------------------------


@ac(4)
def test_ac4_foreground_loss_on_black_object(tmp_path):
    synthesize_dataset(tmp_path, 2, n_views=6, image_size=24, difficulty="easy", seed=2, gt_resolution=16,
                       color=(0.0, 0.0, 0.0))
    ds = load_dataset(tmp_path)
    ious = {}
    for lam in (10.0, 0.0):
        cfg = tiny_config(f"autodecoder.foreground_weight={lam}", "autodecoder.lr=0.005",
                          "autodecoder.steps=150", "autodecoder.views_per_object=3")
        tr = Trainer(ds, cfg)
        tr.train(150, log_every=10**9)
        ious[lam] = tr.evaluate()["iou"]
    _report("AC4", iou_fg=round(ious[10.0], 4), iou_no_fg=round(ious[0.0], 4))
    assert ious[10.0] > ious[0.0]


# -- AC5: robust normalization -------------------------------------------------------------


@ac(5)
def test_ac5_robust_normalization():
    LD.test_outliers_barely_move_robust_stats()
    for per_channel in (True, False):
        LD.test_normalize_round_trip(per_channel)
    for c in (0.5, 2.0, 8.0, 1 / 1024):
        LD.test_scaling_equivariance_exact(c)


# -- AC6: hash embedding -------------------------------------------------------------------


@ac(6)
def test_ac6_hash_oracle_and_determinism():
    EMB.test_tensor_hash_matches_bitwise_oracle("quadratic")
    k = torch.arange(10**6)
    assert torch.equal(hash_index(k, 2, 8), hash_index(k, 2, 8))


@ac(6)
def test_ac6_bucket_uniformity():
    k = torch.arange(2**15)
    pvalues = []
    for book in range(4):
        counts = np.bincount(hash_index(k, book, 8).numpy(), minlength=256)
        pvalues.append(chisquare(counts).pvalue)
    _report("AC6", pvalues=[f"{p:.3g}" for p in pvalues], buckets_used=int((counts > 0).sum()))
    assert min(pvalues) > 0.01


# -- AC7: EDM sampler oracle ----------------------------------------------------------------


@ac(7)
def test_ac7_edm_gaussian_oracle():
    LD.test_gaussian_oracle_moments()
    LD.test_sampler_order()


# -- AC9: diffusion taps -------------------------------------------------------------------


@ac(9)
@pytest.mark.parametrize("tap", [4, 8, 16])
def test_ac9_taps_train_100_steps(tiny_dataset, tap):
    cfg = tiny_config(f"decoder.latent_tap_resolution={tap}")
    ad = Trainer(load_dataset(tiny_dataset), cfg)
    ad.train(2)
    lat = object_latents(ad.model)
    assert lat.shape[-1] == tap
    dt = DiffusionTrainer(lat.repeat(2, 1, 1, 1, 1), cfg)
    hist = dt.train(100)
    assert len(hist) == 100 and all(math.isfinite(h["loss"]) for h in hist)


# -- AC10: geometry metrics -----------------------------------------------------------------


@ac(10)
def test_ac10_metric_oracles():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x, y = rng.normal(size=(rng.integers(1, 65), 3)), rng.normal(size=(rng.integers(1, 65), 3))
        assert GEO.chamfer(x, y) == pytest.approx(GEO._brute_chamfer(x, y), rel=1e-12)
    for seed in range(5):
        GEO.test_coverage_and_mmd_match_brute_force(seed)
    GEO.test_coverage_and_mmd_up_to_ten_clouds()


@ac(10)
def test_ac10_sphere_and_downsampling():
    GEO.test_sphere_vertices_near_radius()
    GEO.test_downsampling_keeps_sphere_geometry()


# -- AC11: articulation -----------------------------------------------------------------------


@ac(11)
def test_ac11_articulation():
    for seed in range(3):
        ART.test_single_part_equals_rigid_with_moved_camera(seed)
    for seed in range(5):
        ART.test_pnp_exact_correspondences(seed)
    ART.test_lbs_forward_examples()
    ART.test_inverse_identity_is_exact()
    ART.test_single_part_round_trip()
    ART.test_hinge_motion_transfer_angle()


# -- AC12: reproducibility --------------------------------------------------------------------


@ac(12)
def test_ac12_synthesis_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        synthesize_dataset(tmp_path / name, 3, n_views=3, image_size=16, difficulty="medium", seed=9,
                           gt_resolution=16)
    assert _sha_dir(tmp_path / "a") == _sha_dir(tmp_path / "b")


@ac(12)
def test_ac12_sampling_and_eval_are_byte_identical(diffusion, capsys):
    _, trainer, root = diffusion
    cfg_path = root / "run.yaml"
    from autodec3d.config import dump_config

    cfg_path.write_text(dump_config(trainer.cfg.model_copy(update={"eval": trainer.cfg.eval.model_copy(
        update={"n_views": 2, "n_points": 512})})))
    c = ["--config", str(cfg_path)]
    for name in ("s1", "s2"):
        assert main(["sample", *c, "--ckpt", str(root / "diff"), "--n", "2", "--steps", "16",
                     "--out", str(root / name)]) == 0
    assert _sha_dir(root / "s1") != "" and sorted((root / "s1").glob("*.vol"))
    vols = lambda d: {p.name: p.read_bytes() for p in (root / d).glob("*.vol")}  # noqa: E731
    assert vols("s1") == vols("s2")
    reports = []
    for i in range(2):
        out = root / f"report{i}.json"
        assert main(["eval", *c, "--generated", str(root / "s1"), "--reference", str(root / "s2"),
                     "--out", str(out)]) == 0
        reports.append(out.read_bytes())
    capsys.readouterr()
    assert reports[0] == reports[1]
