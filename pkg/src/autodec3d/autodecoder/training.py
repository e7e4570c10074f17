"""Stage-1 training: fit object codes and the decoder to multi-view images."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from ..articulation import PartKeypoints, articulated_rays, render_articulated
from ..camera import Pose, generate_rays
from ..checkpoint import load_checkpoint, save_checkpoint
from ..config import RunConfig
from ..datasynth import Dataset
from ..renderer import RenderSettings, render
from .decoder import VolumeDecoder, to_grid
from .embedding import EmbeddingLibrary
from .losses import loss_foreground, loss_reconstruction, make_extractor

log = logging.getLogger(__name__)

LOG_FILE = "train_log.jsonl"


class TrainingError(RuntimeError):
    pass


class AutoDecoder(nn.Module):
    """Object codes + volume decoder (+ shared keypoints for articulated data)."""

    def __init__(self, n_objects: int, cfg: RunConfig, articulated: bool = False):
        super().__init__()
        gen = torch.Generator().manual_seed(cfg.seed)
        torch.manual_seed(cfg.seed)
        self.cfg = cfg
        self.articulated = articulated
        self.embeddings = EmbeddingLibrary(n_objects, cfg.embedding, gen)
        self.decoder = VolumeDecoder(cfg.decoder)
        self.keypoints = None
        if articulated and not cfg.articulation.use_gt_poses:
            a = cfg.articulation
            self.keypoints = PartKeypoints(a.n_parts, a.n_keypoints, a.predictor_input, a.predictor_channels, gen)

    def decode(self, obj):
        """Object index -> (latent (C, r, r, r), VoxelGrid)."""
        emb = self.embeddings(torch.as_tensor([obj]))
        latent, values = self.decoder(emb)
        return latent[0], to_grid(values[0])


@dataclass
class ViewData:
    """Preloaded pixels and rays for every frame of a dataset."""

    images: torch.Tensor  # (O, V, H, W, 3)
    masks: torch.Tensor  # (O, V, H, W)
    frames: list  # frames[o][v] -> FrameRecord
    height: int
    width: int

    @classmethod
    def from_dataset(cls, ds: Dataset) -> "ViewData":
        n_views = min(len(o.frames) for o in ds.objects)
        images = torch.stack([torch.stack([f.load_image() for f in o.frames[:n_views]]) for o in ds.objects])
        masks = torch.stack([torch.stack([f.load_mask() for f in o.frames[:n_views]]) for o in ds.objects])
        h, w = images.shape[2:4]
        return cls(images, masks, [o.frames[:n_views] for o in ds.objects], h, w)

    @property
    def n_views(self) -> int:
        return self.images.shape[1]


def _lr_lambda(cfg, total):
    if cfg.lr_decay == "none":
        return lambda step: 1.0
    final = cfg.lr_final_fraction
    return lambda step: 1.0 - (1.0 - final) * min(step, total) / max(total, 1)


def render_view(model: AutoDecoder, grid, frame, settings: RenderSettings, image=None, generator=None):
    """Render one frame of an object from its decoded grid."""
    intr = frame.intrinsics
    if not model.articulated:
        rays = generate_rays(intr, frame.pose, dtype=torch.float32)
        return render(grid, rays, settings, generator)
    margin = model.cfg.articulation.bounds_margin
    eps = model.cfg.articulation.uncovered_eps
    if model.keypoints is None:
        poses = frame.part_poses
        rays = articulated_rays(intr, frame.pose, poses[0], margin)
        return render_articulated(grid, poses, rays, settings, eps, generator)
    rot, trans, _ = model.keypoints.estimate_poses(image, intr)
    ref = Pose(rot[0].detach().double(), trans[0].detach().double())
    rays = articulated_rays(intr, Pose.identity(), ref, margin)
    return render_articulated(grid, (rot, trans), rays, settings, eps, generator)


class Trainer:
    """Single-controller training loop with resumable state."""

    def __init__(self, dataset: Dataset, cfg: RunConfig, out_dir=None):
        self.cfg = cfg
        self.tcfg = cfg.autodecoder
        self.data = ViewData.from_dataset(dataset)
        if self.data.n_views < 2:
            raise ValueError("need at least 2 views per object")
        self.n_objects = len(dataset)
        self.articulated = dataset.articulated
        if self.articulated and cfg.decoder.out_channels != 4 + cfg.articulation.n_parts:
            raise ValueError("articulated data needs decoder.out_channels == 4 + articulation.n_parts")
        self.model = AutoDecoder(self.n_objects, cfg, self.articulated)
        self.extractor = make_extractor(self.tcfg.extractor, self.tcfg.extractor_seed)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=self.tcfg.lr, betas=tuple(self.tcfg.betas))
        self.scheduler = torch.optim.lr_scheduler.LambdaLR(self.optimizer, _lr_lambda(self.tcfg, self.tcfg.steps))
        self.rng = np.random.default_rng(cfg.seed)
        self.jitter = torch.Generator().manual_seed(cfg.seed + 1)
        self.step = 0
        self.history: list[dict] = []
        self.out_dir = Path(out_dir) if out_dir else None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        self.n_train_views = self.data.n_views - self.tcfg.holdout_views
        if self.n_train_views < 1:
            raise ValueError("holdout_views leaves no training views")
        r = cfg.render
        self.train_settings = RenderSettings(r.n_samples, r.density_activation, r.density_shift,
                                             tuple(r.background_color), stratified=self.tcfg.stratified)
        self.eval_settings = RenderSettings(r.n_samples_eval, r.density_activation, r.density_shift,
                                            tuple(r.background_color), stratified=False)
        self._t0 = time.time()

    # -- batches --------------------------------------------------------------

    def sample_batch(self) -> list[tuple[int, list[int]]]:
        """(object, views) groups for one step.

        Multi-frame: ``batch_objects`` objects with ``views_per_object``
        views each, decoded once per object.  Otherwise the same number of
        (object, view) pairs, each decoded separately.
        """
        t = self.tcfg
        replace = t.batch_objects > self.n_objects
        v = min(t.views_per_object, self.n_train_views)
        if t.multi_frame:
            objs = self.rng.choice(self.n_objects, t.batch_objects, replace=replace)
            return [(int(o), [int(x) for x in self.rng.choice(self.n_train_views, v, replace=False)])
                    for o in objs]
        pairs = []
        for _ in range(t.batch_objects * v):
            pairs.append((int(self.rng.integers(self.n_objects)), [int(self.rng.integers(self.n_train_views))]))
        return pairs

    def view_loss(self, grid, obj: int, views: list[int], settings, generator=None):
        h, w = self.data.height, self.data.width
        renders, occs = [], []
        for v in views:
            frame = self.data.frames[obj][v]
            out = render_view(self.model, grid, frame, settings, self.data.images[obj, v], generator)
            renders.append(out.color.reshape(h, w, 3))
            occs.append(out.occupancy.reshape(h, w))
        pred = torch.stack(renders)
        target = self.data.images[obj, views]
        rec = loss_reconstruction(pred, target, self.extractor, self.tcfg.pyramid_levels, self.tcfg.rec_reduction)
        fg = loss_foreground(torch.stack(occs), self.data.masks[obj, views])
        return rec / len(views), fg

    def train_step(self) -> dict:
        self.model.train()
        batch = self.sample_batch()
        rec_total, fg_total = 0.0, 0.0
        self.optimizer.zero_grad(set_to_none=True)
        for obj, views in batch:
            _, grid = self.model.decode(obj)
            rec, fg = self.view_loss(grid, obj, views, self.train_settings, self.jitter)
            loss = (rec + self.tcfg.foreground_weight * fg) / len(batch)
            if self.model.keypoints is not None:
                loss = loss + self.model.keypoints.regularizer() / len(batch)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at step {self.step} for objects {[b[0] for b in batch]}: "
                                    f"rec={rec.item()}, fg={fg.item()}")
            loss.backward()
            rec_total += rec.item() / len(batch)
            fg_total += fg.item() / len(batch)
        self.optimizer.step()
        lr = self.scheduler.get_last_lr()[0]
        self.scheduler.step()
        self.step += 1
        rec_w = rec_total + self.tcfg.foreground_weight * fg_total
        rec = {"step": self.step, "loss": rec_w, "rec": rec_total, "fg": fg_total, "lr": lr,
               "wallclock": round(time.time() - self._t0, 3)}
        self.history.append(rec)
        return rec

    def train(self, steps: int | None = None, log_every: int | None = None) -> list[dict]:
        steps = self.tcfg.steps if steps is None else steps
        every = log_every or self.tcfg.log_every
        logf = open(self.out_dir / LOG_FILE, "a") if self.out_dir else None
        try:
            for _ in range(steps):
                rec = self.train_step()
                if logf:
                    logf.write(json.dumps(rec) + "\n")
                if rec["step"] % every == 0:
                    log.info("step %d loss %.5f rec %.5f fg %.5f", rec["step"], rec["loss"], rec["rec"], rec["fg"])
        finally:
            if logf:
                logf.close()
        return self.history

    # -- evaluation -------------------------------------------------------------

    @torch.no_grad()
    def evaluate(self, views: str = "holdout", objects=None) -> dict:
        """PSNR, occupancy IoU and loss on held-out (or training) views."""
        from ..geomeval import psnr

        self.model.eval()
        objects = range(self.n_objects) if objects is None else objects
        vids = range(self.n_train_views, self.data.n_views) if views == "holdout" else range(self.n_train_views)
        psnrs, ious, losses = [], [], []
        for o in objects:
            _, grid = self.model.decode(o)
            for v in vids:
                out = render_view(self.model, grid, self.data.frames[o][v], self.eval_settings, self.data.images[o, v])
                img = out.color.reshape(self.data.height, self.data.width, 3).clamp(0, 1)
                occ = out.occupancy.reshape(self.data.height, self.data.width)
                psnrs.append(psnr(img, self.data.images[o, v]))
                pred_m, gt_m = occ > 0.5, self.data.masks[o, v] > 0.5
                union = (pred_m | gt_m).sum().item()
                ious.append((pred_m & gt_m).sum().item() / union if union else 1.0)
                rec, fg = self.view_loss(grid, o, [v], self.eval_settings)
                losses.append(float(rec + self.tcfg.foreground_weight * fg))
        finite = [p for p in psnrs if math.isfinite(p)]
        return {"psnr": float(np.mean(finite)) if finite else float("inf"), "psnr_all": psnrs,
                "iou": float(np.mean(ious)), "loss": float(np.mean(losses))}

    # -- checkpoints --------------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "scheduler": self.scheduler.state_dict(),
            "rng": self.rng.bit_generator.state,
            "jitter": self.jitter.get_state(),
            "torch_rng": torch.get_rng_state(),
            "step": self.step,
            "n_objects": self.n_objects,
            "articulated": self.articulated,
        }

    def save(self, out_dir=None) -> Path:
        out = Path(out_dir or self.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "loss_history.json", "w") as fh:
            json.dump(self.history, fh)
        return save_checkpoint(out, "autodecoder", self.cfg.model_dump(mode="json"), self.state_dict(),
                               self.step, {"seed": self.cfg.seed},
                               extra={"n_objects": self.n_objects, "articulated": self.articulated,
                                      "dataset": str(self.data.frames[0][0].image_path.parent.parent)},
                               files={"loss_history": "loss_history.json"})

    def load_state(self, state: dict):
        self.model.load_state_dict(state["model"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.scheduler.load_state_dict(state["scheduler"])
        self.rng.bit_generator.state = state["rng"]
        self.jitter.set_state(state["jitter"])
        torch.set_rng_state(state["torch_rng"])
        self.step = state["step"]

    @classmethod
    def resume(cls, ckpt_dir, dataset: Dataset, out_dir=None) -> "Trainer":
        manifest, state = load_checkpoint(ckpt_dir, "autodecoder")
        cfg = RunConfig.model_validate(manifest["config"])
        trainer = cls(dataset, cfg, out_dir or ckpt_dir)
        trainer.load_state(state)
        hist = Path(ckpt_dir) / "loss_history.json"
        if hist.exists():
            trainer.history = json.loads(hist.read_text())
        return trainer


def train_autodecoder(dataset: Dataset, cfg: RunConfig, out_dir=None, steps: int | None = None) -> Trainer:
    """Train from scratch and (if ``out_dir`` is given) write a checkpoint."""
    trainer = Trainer(dataset, cfg, out_dir)
    trainer.train(steps)
    if out_dir:
        trainer.save()
    return trainer


def load_autodecoder(ckpt_dir) -> tuple[AutoDecoder, dict]:
    """Model in eval mode plus its manifest, without optimizer state."""
    manifest, state = load_checkpoint(ckpt_dir, "autodecoder")
    cfg = RunConfig.model_validate(manifest["config"])
    model = AutoDecoder(state["n_objects"], cfg, state["articulated"])
    model.load_state_dict(state["model"])
    model.eval()
    return model, manifest


@torch.no_grad()
def object_latents(model: AutoDecoder) -> torch.Tensor:
    """Latent volumes at the configured tap for every training object, (N, C, r, r, r)."""
    model.eval()
    return torch.stack([model.decode(o)[0] for o in range(model.embeddings.n_objects)])
