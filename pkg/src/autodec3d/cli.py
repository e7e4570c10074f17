"""Command-line entry point: ``autodec3d <command> [options]``.

Exit codes: 0 success, 2 configuration/input error, 3 runtime failure.
The accelerator is chosen with the ``AUTODEC3D_DEVICE`` environment variable.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch
from pydantic import ValidationError

from . import geomeval
from .checkpoint import CheckpointError
from .camera import ARTICULATED_FOV, Intrinsics, orbit_pose
from .config import RunConfig, dump_config, list_presets, load_config
from .datasynth import CameraDistribution, DatasetError, _to_png, load_dataset, sample_cameras, synthesize_dataset
from .renderer import RenderSettings
from .voxgrid import VoxelGrid, load_volume, save_volume

log = logging.getLogger("autodec3d")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
DEVICE_ENV = "AUTODEC3D_DEVICE"


class ConfigError(Exception):
    pass


def select_device() -> torch.device:
    name = os.environ.get(DEVICE_ENV, "cpu")
    try:
        dev = torch.device(name)
    except RuntimeError as e:
        raise ConfigError(f"{DEVICE_ENV}={name!r}: {e}") from e
    if dev.type != "cpu":
        raise ConfigError(f"{DEVICE_ENV}={name!r}: only the cpu device is supported by this build")
    return dev


def _config(args) -> RunConfig:
    try:
        return load_config(args.config, args.set, args.seed)
    except (ValidationError, ValueError, FileNotFoundError, OSError) as e:
        raise ConfigError(str(e)) from e


def _need(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _settings(cfg: RunConfig) -> RenderSettings:
    r = cfg.render
    return RenderSettings(r.n_samples_eval, r.density_activation, r.density_shift, tuple(r.background_color))


def _save_image(img: torch.Tensor, path: Path):
    _to_png(img.clamp(0, 1).detach().cpu().numpy()).save(path)


def _write_json(obj, path: Path):
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# -- commands -------------------------------------------------------------------


def cmd_synth(args, cfg: RunConfig) -> dict:
    s = cfg.synth
    out = Path(args.out)
    synthesize_dataset(out, s.n_objects, s.n_views, s.image_size, s.difficulty, cfg.seed, s.gt_resolution, s.color)
    (out / "config.yaml").write_text(dump_config(cfg))
    return {"dataset": str(out), "objects": s.n_objects}


def cmd_train_autodec(args, cfg: RunConfig) -> dict:
    from .autodecoder.training import Trainer

    ds = load_dataset(_need(args.data, "dataset"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        trainer = Trainer.resume(_need(args.resume, "checkpoint"), ds, out)
    else:
        trainer = Trainer(ds, cfg, out)
    remaining = (args.steps if args.steps is not None else trainer.tcfg.steps) - trainer.step
    trainer.train(max(remaining, 0))
    trainer.save(out)
    ev = trainer.evaluate()
    report = {"checkpoint": str(out), "step": trainer.step, "holdout_psnr": ev["psnr"], "holdout_iou": ev["iou"]}
    _write_json(report, out / "eval.json")
    return report


def cmd_fit_stats(args, cfg: RunConfig) -> dict:
    from .autodecoder.training import load_autodecoder, object_latents
    from .latentdiff.stats import compute_robust_stats

    model, _ = load_autodecoder(_need(args.ckpt, "checkpoint"))
    lat = object_latents(model)
    n = cfg.normalization
    stats = compute_robust_stats(lat, n.per_channel, n.divide_by)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    torch.save(lat, out / "latents.pt")
    _write_json(stats.to_dict(), out / "stats.json")
    return {"latents": str(out / "latents.pt"), "shape": list(lat.shape), "degenerate": int(stats.degenerate.sum())}


def cmd_train_diffusion(args, cfg: RunConfig) -> dict:
    from .autodecoder.training import load_autodecoder, object_latents
    from .latentdiff.stats import RobustStats
    from .latentdiff.training import DiffusionTrainer

    ckpt = _need(args.ckpt, "autodecoder checkpoint")
    model, manifest = load_autodecoder(ckpt)
    stats = None
    if args.stats:
        sdir = _need(args.stats, "stats directory")
        lat = torch.load(sdir / "latents.pt")
        stats = RobustStats.from_dict(json.loads((sdir / "stats.json").read_text()))
    else:
        lat = object_latents(model)
    labels = None
    if cfg.conditioning.enabled:
        labels_file = Path(manifest["dataset"]) / "labels.json"
        labels_map = json.loads(_need(labels_file, "labels file").read_text())
        labels = [labels_map[k] for k in sorted(labels_map)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trainer = DiffusionTrainer(lat, cfg, labels, out, stats)
    trainer.train(args.steps)
    trainer.save(extra={"autodecoder": str(ckpt.resolve())})
    return {"checkpoint": str(out), "step": trainer.step, "final_loss": trainer.history[-1]["loss"]}


def cmd_sample(args, cfg: RunConfig) -> dict:
    from .autodecoder.decoder import decode_latent
    from .autodecoder.training import load_autodecoder
    from .latentdiff.training import load_diffusion
    from .renderer import render
    from .camera import generate_rays

    diff, manifest = load_diffusion(_need(args.ckpt, "diffusion checkpoint"))
    ad_path = args.autodec or manifest.get("autodecoder")
    ad, _ = load_autodecoder(_need(ad_path, "autodecoder checkpoint"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    settings = _settings(ad.cfg)
    size = ad.cfg.synth.image_size
    cams = sample_cameras(cfg.eval.n_views, size, CameraDistribution(), cfg.seed)
    timing = []
    for i in range(args.n):
        t0 = time.perf_counter()
        lat = diff.sample(1, seed=cfg.seed * 100003 + i, n_steps=args.steps, labels=args.label,
                          guidance=args.guidance)
        t_sample = time.perf_counter() - t0
        with torch.no_grad():
            grid = decode_latent(ad.decoder, lat)
        if not torch.isfinite(grid.values).all():
            raise RuntimeError(f"sample {i}: non-finite decoded volume")
        save_volume(VoxelGrid(lat[0].permute(1, 2, 3, 0).contiguous(), layout="latent"), out / f"latent_{i:03d}.vol")
        save_volume(grid, out / f"sample_{i:03d}.vol")
        for v, (intr, pose) in enumerate(cams):
            with torch.no_grad():
                img = render(grid, generate_rays(intr, pose, dtype=torch.float32), settings)
            _save_image(img.color.reshape(intr.height, intr.width, 3), out / f"sample_{i:03d}_view_{v:02d}.png")
        timing.append({"sample": i, "steps": args.steps or diff.cfg.schedule.n_steps,
                       "sample_seconds": round(t_sample, 4), "total_seconds": round(time.perf_counter() - t0, 4)})
        log.info("sample %d: %.3fs sampling", i, t_sample)
    with open(out / "timing.jsonl", "w") as fh:
        for rec in timing:
            fh.write(json.dumps(rec) + "\n")
    return {"samples": args.n, "out": str(out), "mean_sample_seconds": float(np.mean([t["sample_seconds"] for t in timing]))}


def cmd_animate(args, cfg: RunConfig) -> dict:
    from .articulation import load_pose_sequence, motion_transfer
    from .autodecoder.training import load_autodecoder

    poses = load_pose_sequence(_need(args.poses, "pose sequence"))
    if args.volume:
        grid = load_volume(_need(args.volume, "volume"))
    else:
        model, _ = load_autodecoder(_need(args.ckpt, "checkpoint"))
        with torch.no_grad():
            _, grid = model.decode(args.object)
    if grid.layout != "articulated":
        raise ConfigError("animation needs an articulated volume (density, rgb and skinning weights)")
    size = cfg.synth.image_size
    intr = Intrinsics(size, size, fov=ARTICULATED_FOV)
    cam = orbit_pose(args.azimuth, args.elevation, CameraDistribution.articulated().distance)
    frames = motion_transfer(grid, poses, intr, cam, _settings(cfg), cfg.articulation.bounds_margin)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, fr in enumerate(frames):
        _save_image(fr.color, out / f"frame_{i:04d}.png")
    return {"frames": len(frames), "out": str(out)}


def _iso(cfg: RunConfig, override) -> float:
    if override is not None:
        return override
    return cfg.eval.iso_level if cfg.eval.iso_level is not None else geomeval.default_iso_level()


def _mesh_from_volume(path: Path, cfg: RunConfig, iso=None):
    grid = load_volume(path)
    if grid.layout != "density":
        settings = RenderSettings(density_activation=cfg.render.density_activation,
                                  density_shift=cfg.render.density_shift)
        grid = geomeval.density_grid(grid, settings)
    if cfg.eval.mesh_resolution and cfg.eval.mesh_resolution != grid.resolution:
        grid = geomeval.downsample_grid(grid, cfg.eval.mesh_resolution)
    return geomeval.marching_cubes(grid, _iso(cfg, iso))


def cmd_mesh(args, cfg: RunConfig) -> dict:
    mesh = _mesh_from_volume(_need(args.volume, "volume"), cfg, args.iso)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    geomeval.write_obj(mesh, out)
    return {"mesh": str(out), "vertices": len(mesh.vertices), "faces": len(mesh.faces)}


def _clouds(directory: Path, cfg: RunConfig) -> list[np.ndarray]:
    clouds = []
    for p in sorted(directory.glob("*.vol")):
        grid = load_volume(p)
        if grid.layout == "latent":
            continue
        mesh = _mesh_from_volume(p, cfg)
        if mesh.empty:
            log.warning("%s: empty mesh, skipped", p)
            continue
        clouds.append(geomeval.sample_surface(mesh, cfg.eval.n_points, cfg.seed))
    for p in sorted(directory.glob("*.obj")):
        clouds.append(geomeval.sample_surface(geomeval.read_obj(p), cfg.eval.n_points, cfg.seed))
    return clouds


def cmd_eval(args, cfg: RunConfig) -> dict:
    from PIL import Image

    gen_dir, ref_dir = _need(args.generated, "generated dir"), _need(args.reference, "reference dir")
    metrics = {}
    gen, ref = _clouds(gen_dir, cfg), _clouds(ref_dir, cfg)
    if gen and ref:
        cd = geomeval.chamfer_matrix(gen, ref)
        metrics["cov"] = geomeval.coverage(gen, ref, cd)
        metrics["mmd"] = geomeval.mmd(gen, ref, cd)
    pairs = [(p, ref_dir / p.name) for p in sorted(gen_dir.glob("*.png")) if (ref_dir / p.name).exists()]
    if pairs:
        vals = [geomeval.psnr(np.asarray(Image.open(a), dtype=np.float64) / 255.0,
                              np.asarray(Image.open(b), dtype=np.float64) / 255.0) for a, b in pairs]
        finite = [v for v in vals if math.isfinite(v)]
        metrics["psnr"] = float(np.mean(finite)) if finite else geomeval.PSNR_INF
    if not metrics:
        raise ConfigError("nothing to evaluate: no volumes, meshes or matching images")
    records = geomeval.metric_report(metrics, cfg.eval.model_dump(mode="json"), cfg.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    geomeval.write_report(records, out)
    return {r["metric"]: r["value"] for r in records}


def cmd_config(args, cfg: RunConfig) -> dict:
    if args.list:
        print("\n".join(list_presets()))
    else:
        sys.stdout.write(dump_config(cfg))
    return {}


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON config file or preset name")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output path")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")

    p = argparse.ArgumentParser(prog="autodec3d", description="Volumetric autodecoder + latent diffusion toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="render a procedural multi-view dataset")
    s.set_defaults(fn=cmd_synth, needs_out=True)

    s = sub.add_parser("train-autodec", parents=[common], help="train object codes and the volume decoder")
    s.add_argument("--data", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--resume")
    s.set_defaults(fn=cmd_train_autodec, needs_out=True)

    s = sub.add_parser("fit-stats", parents=[common], help="decode latents and compute robust statistics")
    s.add_argument("--ckpt", required=True)
    s.set_defaults(fn=cmd_fit_stats, needs_out=True)

    s = sub.add_parser("train-diffusion", parents=[common], help="train the latent diffusion model")
    s.add_argument("--ckpt", required=True, help="autodecoder checkpoint")
    s.add_argument("--stats", help="output directory of fit-stats")
    s.add_argument("--steps", type=int)
    s.set_defaults(fn=cmd_train_diffusion, needs_out=True)

    s = sub.add_parser("sample", parents=[common], help="sample volumes and render views")
    s.add_argument("--ckpt", required=True, help="diffusion checkpoint")
    s.add_argument("--autodec", help="autodecoder checkpoint (default: the one recorded at training)")
    s.add_argument("--n", type=int, default=4)
    s.add_argument("--steps", type=int)
    s.add_argument("--label", type=int)
    s.add_argument("--guidance", type=float)
    s.set_defaults(fn=cmd_sample, needs_out=True)

    s = sub.add_parser("animate", parents=[common], help="render an articulated object under a pose sequence")
    s.add_argument("--ckpt")
    s.add_argument("--object", type=int, default=0)
    s.add_argument("--volume")
    s.add_argument("--poses", required=True)
    s.add_argument("--azimuth", type=float, default=0.0)
    s.add_argument("--elevation", type=float, default=0.3)
    s.set_defaults(fn=cmd_animate, needs_out=True)

    s = sub.add_parser("mesh", parents=[common], help="extract an OBJ mesh from a volume file")
    s.add_argument("--volume", required=True)
    s.add_argument("--iso", type=float)
    s.set_defaults(fn=cmd_mesh, needs_out=True)

    s = sub.add_parser("eval", parents=[common], help="COV/MMD/PSNR report for two directories")
    s.add_argument("--generated", required=True)
    s.add_argument("--reference", required=True)
    s.set_defaults(fn=cmd_eval, needs_out=True)

    s = sub.add_parser("config", parents=[common], help="print the effective config or list presets")
    s.add_argument("--list", action="store_true")
    s.set_defaults(fn=cmd_config, needs_out=False)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        select_device()
        cfg = _config(args)
        if args.needs_out and not args.out:
            raise ConfigError("--out is required")
        if args.command == "animate" and not (args.ckpt or args.volume):
            raise ConfigError("animate needs --ckpt or --volume")
        result = args.fn(args, cfg)
    except (ConfigError, DatasetError, CheckpointError) as e:
        print(json.dumps({"error": str(e), "kind": "config"}), file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - every failure maps to a structured exit
        if args.verbose:
            log.exception("command failed")
        print(json.dumps({"error": str(e), "kind": type(e).__name__}), file=sys.stderr)
        return EXIT_RUNTIME
    if result:
        print(json.dumps(result, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
