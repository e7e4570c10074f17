"""Stage-2 training and sampling in the normalized latent space."""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path

import numpy as np
import torch
from torch import nn

from ..checkpoint import load_checkpoint, save_checkpoint
from ..config import RunConfig
from .conditioning import ConditionEmbedder
from .denoiser import UNet3d
from .edm import EDMDenoiser, edm_loss, edm_sample
from .stats import RobustStats, compute_robust_stats, robust_denormalize, robust_normalize

log = logging.getLogger(__name__)

LOG_FILE = "diffusion_log.jsonl"


class DiffusionError(RuntimeError):
    pass


class LatentDiffusion(nn.Module):
    def __init__(self, channels: int, resolution: int, cfg: RunConfig, stats: RobustStats):
        super().__init__()
        torch.manual_seed(cfg.seed)
        self.cfg = cfg
        self.channels, self.resolution = channels, resolution
        self.stats = stats
        c = cfg.conditioning
        self.unet = UNet3d(channels, resolution, cfg.denoiser, c.enabled)
        self.denoiser = EDMDenoiser(self.unet, cfg.schedule.sigma_data)
        self.embedder = None
        if c.enabled:
            gen = torch.Generator().manual_seed(cfg.seed)
            self.embedder = ConditionEmbedder(c.n_classes, cfg.denoiser.cond_dim, c.seq_len, c.tokens_per_label, gen)

    def forward(self, x, sigma, cond=None):
        return self.denoiser(x, sigma, cond)

    def condition(self, labels):
        if labels is None:
            return None, None
        if self.embedder is None:
            raise ValueError("model was trained without conditioning")
        cond = self.embedder(labels)
        return cond, self.embedder.null_embedding(cond.shape[0])

    @torch.no_grad()
    def sample(self, n: int, seed: int = 0, n_steps: int | None = None, labels=None, guidance: float | None = None,
               solver: str | None = None, normalized: bool = False) -> torch.Tensor:
        """Draw ``n`` latent volumes; denormalized unless ``normalized``."""
        self.eval()
        gen = torch.Generator().manual_seed(seed)
        if labels is not None:
            labels = torch.as_tensor(labels).reshape(-1).expand(n) if torch.as_tensor(labels).numel() == 1 else labels
        cond, uncond = self.condition(labels)
        w = self.cfg.conditioning.guidance_weight if guidance is None else guidance
        shape = (n, self.channels, self.resolution, self.resolution, self.resolution)
        x = edm_sample(self.denoiser, shape, self.cfg.schedule, cond, uncond, w, gen, n_steps, solver)
        return x if normalized else robust_denormalize(x, self.stats).float()


class DiffusionTrainer:
    def __init__(self, latents: torch.Tensor, cfg: RunConfig, labels=None, out_dir=None,
                 stats: RobustStats | None = None):
        if latents.dim() != 5:
            raise ValueError("latents must be (N, C, S, S, S)")
        self.cfg = cfg
        self.tcfg = cfg.diffusion
        n = cfg.normalization
        self.stats = stats or compute_robust_stats(latents, n.per_channel, n.divide_by)
        self.data = robust_normalize(latents.float(), self.stats).detach()
        self.labels = None if labels is None else torch.as_tensor(labels).long()
        if cfg.conditioning.enabled and self.labels is None:
            raise ValueError("conditioning enabled but no labels given")
        self.model = LatentDiffusion(latents.shape[1], latents.shape[-1], cfg, self.stats)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=self.tcfg.lr)
        total = self.tcfg.steps
        lam = (lambda s: 1.0 - min(s, total) / max(total, 1)) if self.tcfg.lr_decay == "linear" else (lambda s: 1.0)
        self.scheduler = torch.optim.lr_scheduler.LambdaLR(self.optimizer, lam)
        self.rng = np.random.default_rng(cfg.seed)
        self.gen = torch.Generator().manual_seed(cfg.seed + 2)
        self.step = 0
        self.history: list[dict] = []
        self.out_dir = Path(out_dir) if out_dir else None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        self._t0 = time.time()

    def batch(self):
        n = len(self.data)
        idx = self.rng.choice(n, self.tcfg.batch_size, replace=self.tcfg.batch_size > n)
        x = self.data[idx]
        cond = None
        if self.model.embedder is not None:
            cond = self.model.embedder(self.labels[idx])
            cond = self.model.embedder.drop(cond, self.cfg.conditioning.p_uncond, self.gen)
        return idx, x, cond

    def train_step(self) -> dict:
        self.model.train()
        idx, x, cond = self.batch()
        loss = edm_loss(self.model, x, self.cfg.schedule, cond, self.gen)
        if not torch.isfinite(loss):
            raise DiffusionError(f"non-finite diffusion loss at step {self.step}; batch indices {idx.tolist()}, "
                                 f"batch abs max {x.abs().max().item():.3g}")
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        lr = self.scheduler.get_last_lr()[0]
        self.scheduler.step()
        self.step += 1
        rec = {"step": self.step, "loss": loss.item(), "lr": lr, "wallclock": round(time.time() - self._t0, 3)}
        self.history.append(rec)
        return rec

    def train(self, steps: int | None = None) -> list[dict]:
        steps = self.tcfg.steps if steps is None else steps
        logf = open(self.out_dir / LOG_FILE, "a") if self.out_dir else None
        try:
            for _ in range(steps):
                rec = self.train_step()
                if logf:
                    logf.write(json.dumps(rec) + "\n")
                if rec["step"] % self.tcfg.log_every == 0:
                    log.info("diffusion step %d loss %.5f", rec["step"], rec["loss"])
        finally:
            if logf:
                logf.close()
        return self.history

    def state_dict(self) -> dict:
        return {
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "scheduler": self.scheduler.state_dict(),
            "rng": self.rng.bit_generator.state,
            "gen": self.gen.get_state(),
            "step": self.step,
            "latent_shape": list(self.data.shape[1:]),
        }

    def save(self, out_dir=None, extra: dict | None = None) -> Path:
        out = Path(out_dir or self.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        info = {"stats": self.stats.to_dict(), "latent_shape": list(self.data.shape[1:])}
        info.update(extra or {})
        return save_checkpoint(out, "diffusion", self.cfg.model_dump(mode="json"), self.state_dict(), self.step,
                               {"seed": self.cfg.seed}, extra=info)


def train_diffusion(latents: torch.Tensor, cfg: RunConfig, labels=None, out_dir=None, steps: int | None = None,
                    extra: dict | None = None) -> DiffusionTrainer:
    trainer = DiffusionTrainer(latents, cfg, labels, out_dir)
    trainer.train(steps)
    if out_dir:
        trainer.save(extra=extra)
    return trainer


def load_diffusion(ckpt_dir) -> tuple[LatentDiffusion, dict]:
    manifest, state = load_checkpoint(ckpt_dir, "diffusion")
    cfg = RunConfig.model_validate(manifest["config"])
    stats = RobustStats.from_dict(manifest["stats"])
    c, _, _, s = manifest["latent_shape"]
    model = LatentDiffusion(c, s, cfg, stats)
    model.load_state_dict(state["model"])
    model.eval()
    return model, manifest
