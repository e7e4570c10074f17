"""Volumetric decoder: embedding -> latent feature volume -> radiance grid.

``G1`` maps a 1D code through a fully-connected layer to a coarse volume and
up-samples it to the latent tap resolution; ``G2`` continues from the tap to
the output grid.  Diffusion is trained on the tap activation and its samples
are decoded with ``G2`` alone.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from ..config import DecoderConfig
from ..voxgrid import VoxelGrid


def _norm(kind: str, channels: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm3d(channels)
    groups = next(g for g in (8, 4, 2, 1) if channels % g == 0)
    return nn.GroupNorm(groups, channels)


class ResBlock3d(nn.Module):
    """Two 3x3x3 convs with normalisation, 1x1x1 residual path, optional x2 upsampling."""

    def __init__(self, cin: int, cout: int, upsample: bool, norm: str = "group", residual_convs: int = 1):
        super().__init__()
        self.upsample = upsample
        self.conv1 = nn.Conv3d(cin, cout, 3, padding=1)
        self.norm1 = _norm(norm, cout)
        self.conv2 = nn.Conv3d(cout, cout, 3, padding=1)
        self.norm2 = _norm(norm, cout)
        skip = [nn.Conv3d(cin, cout, 1)]
        skip += [nn.Conv3d(cout, cout, 1) for _ in range(residual_convs - 1)]
        self.skip = nn.Sequential(*skip)

    def forward(self, x):
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        h = F.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return F.relu(h + self.skip(x))


class SelfAttention3d(nn.Module):
    def __init__(self, channels: int, heads: int = 1, norm: str = "group"):
        super().__init__()
        self.norm = _norm("group" if norm == "batch" else norm, channels)
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True)

    def forward(self, x):
        b, c, d, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)
        out, _ = self.attn(tokens, tokens, tokens, need_weights=False)
        return x + out.transpose(1, 2).reshape(b, c, d, h, w)


class VolumeDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        r0, c0 = cfg.base_resolution, cfg.base_channels
        self.fc = nn.Linear(cfg.embed_dim, c0 * r0**3)
        levels = []
        res, ch = r0, c0
        for _ in range(cfg.n_up_blocks):
            res, cout = res * 2, ch // 2
            blocks = [ResBlock3d(ch, cout, True, cfg.norm, cfg.residual_convs)]
            blocks += [ResBlock3d(cout, cout, False, cfg.norm, cfg.residual_convs)
                       for _ in range(cfg.blocks_per_resolution - 1)]
            if cfg.use_attention and res in cfg.attention_resolutions:
                blocks.append(SelfAttention3d(cout, norm=cfg.norm))
            levels.append(nn.Sequential(*blocks))
            ch = cout
        self.levels = nn.ModuleList(levels)
        self.out_norm = _norm(cfg.norm, ch)
        self.out_conv = nn.Conv3d(ch, cfg.out_channels, 1)
        # number of up-levels that belong to G1
        self.n_g1_levels = (cfg.latent_tap_resolution // r0).bit_length() - 1

    @property
    def latent_shape(self) -> tuple[int, int, int, int]:
        r = self.cfg.latent_tap_resolution
        return (self.cfg.channels_at(r), r, r, r)

    def g1(self, embedding: torch.Tensor) -> torch.Tensor:
        """(B, embed_dim) -> (B, C, r, r, r) latent feature volume."""
        if embedding.shape[-1] != self.cfg.embed_dim:
            raise ValueError(f"embedding has {embedding.shape[-1]} entries, expected {self.cfg.embed_dim}")
        r0 = self.cfg.base_resolution
        x = self.fc(embedding).view(-1, self.cfg.base_channels, r0, r0, r0)
        for level in self.levels[: self.n_g1_levels]:
            x = level(x)
        return x

    def g2(self, latent: torch.Tensor) -> torch.Tensor:
        """(B, C, r, r, r) latent -> (B, out_channels, S, S, S) activated grid values.

        Density stays unbounded; RGB goes through a sigmoid and LBS weights
        (if present) through a softmax over parts.
        """
        if tuple(latent.shape[1:]) != self.latent_shape:
            raise ValueError(f"latent shape {tuple(latent.shape[1:])} != {self.latent_shape}")
        x = latent
        for level in self.levels[self.n_g1_levels:]:
            x = level(x)
        raw = self.out_conv(self.out_norm(x))
        density = raw[:, :1]
        rgb = torch.sigmoid(raw[:, 1:4])
        chans = [density, rgb]
        if raw.shape[1] > 4:
            chans.append(torch.softmax(raw[:, 4:], dim=1))
        return torch.cat(chans, dim=1)

    def forward(self, embedding: torch.Tensor):
        latent = self.g1(embedding)
        return latent, self.g2(latent)


def to_grid(values: torch.Tensor, extent=(-1.0, 1.0)) -> VoxelGrid:
    """(C, S, S, S) decoder output -> channel-last grid."""
    layout = "radiance" if values.shape[0] == 4 else "articulated"
    return VoxelGrid(values.permute(1, 2, 3, 0), tuple(extent), layout)


def decode(decoder: VolumeDecoder, embedding: torch.Tensor):
    """Decode one embedding into ``(latent (C, r, r, r), VoxelGrid)``."""
    latent, values = decoder(embedding.reshape(1, -1))
    return latent[0], to_grid(values[0])


def decode_latent(decoder: VolumeDecoder, latent: torch.Tensor) -> VoxelGrid:
    """G2 only: a (possibly diffused, denormalised) latent to a grid."""
    return to_grid(decoder.g2(latent.reshape(1, *decoder.latent_shape))[0])
