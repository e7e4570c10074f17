"""3D UNet denoiser over latent volumes.

All convolutions use replicate padding so that a spatially constant input
maps to a spatially constant output.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from ..config import DenoiserConfig


def _groups(ch: int) -> int:
    return math.gcd(ch, 32)


def _conv(cin, cout, k=3, stride=1):
    return nn.Conv3d(cin, cout, k, stride=stride, padding=k // 2, padding_mode="replicate" if k > 1 else "zeros")


class NoiseEmbedding(nn.Module):
    """Sinusoidal features of ``c_noise`` followed by a 2-layer MLP."""

    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, out_dim), nn.SiLU(), nn.Linear(out_dim, out_dim))

    def forward(self, c_noise: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
        x = c_noise.float()[:, None] * freqs[None]
        return self.mlp(torch.cat([x.cos(), x.sin()], dim=-1))


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb_dim: int, dropout: float = 0.0):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = _conv(cin, cout)
        self.emb = nn.Linear(emb_dim, 2 * cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.drop = nn.Dropout(dropout)
        self.conv2 = _conv(cout, cout)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)
        self.skip = nn.Conv3d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.emb(emb)[:, :, None, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale) + shift
        h = self.conv2(self.drop(F.silu(h)))
        return self.skip(x) + h


class TransformerBlock3d(nn.Module):
    """Self-attention and/or cross-attention over voxel tokens, then an MLP."""

    def __init__(self, channels: int, heads: int, cond_dim: int | None, self_attn: bool, depth: int = 1):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.proj_in = nn.Linear(channels, channels)
        self.layers = nn.ModuleList()
        for _ in range(depth):
            layer = nn.ModuleDict({
                "ln3": nn.LayerNorm(channels),
                "ff": nn.Sequential(nn.Linear(channels, 4 * channels), nn.GELU(), nn.Linear(4 * channels, channels)),
            })
            if self_attn:
                layer["ln1"] = nn.LayerNorm(channels)
                layer["attn"] = nn.MultiheadAttention(channels, heads, batch_first=True)
            if cond_dim is not None:
                layer["ln2"] = nn.LayerNorm(channels)
                layer["xattn"] = nn.MultiheadAttention(channels, heads, kdim=cond_dim, vdim=cond_dim,
                                                       batch_first=True)
            self.layers.append(layer)
        self.proj_out = nn.Linear(channels, channels)
        nn.init.zeros_(self.proj_out.weight)
        nn.init.zeros_(self.proj_out.bias)

    def forward(self, x, cond=None):
        b, c, d, h, w = x.shape
        t = self.proj_in(self.norm(x).flatten(2).transpose(1, 2))
        for layer in self.layers:
            if "attn" in layer:
                q = layer["ln1"](t)
                t = t + layer["attn"](q, q, q, need_weights=False)[0]
            if "xattn" in layer and cond is not None:
                q = layer["ln2"](t)
                t = t + layer["xattn"](q, cond, cond, need_weights=False)[0]
            t = t + layer["ff"](layer["ln3"](t))
        t = self.proj_out(t).transpose(1, 2).reshape(b, c, d, h, w)
        return x + t


class UNet3d(nn.Module):
    """Noise-conditioned UNet; ``forward(x, c_noise, cond)`` -> F_theta.

    Levels run at resolutions ``r, r/2, ...`` (one per channel multiplier).
    Attention blocks are placed at levels whose resolution appears in the
    configured self- or cross-attention lists.
    """

    def __init__(self, in_channels: int, resolution: int, cfg: DenoiserConfig, conditional: bool = False):
        super().__init__()
        n_levels = len(cfg.channel_mult)
        if resolution % 2 ** (n_levels - 1):
            raise ValueError(f"latent resolution {resolution} cannot be halved {n_levels - 1} times")
        self.in_channels, self.resolution = in_channels, resolution
        emb_dim = 4 * cfg.channels
        cond_dim = cfg.cond_dim if conditional else None
        self.noise_embed = NoiseEmbedding(cfg.noise_embed_dim, emb_dim)
        self.conv_in = _conv(in_channels, cfg.channels)

        def attn(ch, res):
            sa = res in cfg.attention_resolutions
            ca = conditional and res in cfg.cross_attention_resolutions
            if not (sa or ca):
                return None
            return TransformerBlock3d(ch, cfg.heads, cond_dim if ca else None, sa, cfg.transformer_depth)

        self.down = nn.ModuleList()
        skips = [cfg.channels]
        ch, res = cfg.channels, resolution
        for i, mult in enumerate(cfg.channel_mult):
            for _ in range(cfg.depth):
                out = cfg.channels * mult
                self.down.append(nn.ModuleList([ResBlock(ch, out, emb_dim, cfg.dropout), attn(out, res) or nn.Identity()]))
                ch = out
                skips.append(ch)
            if i < n_levels - 1:
                self.down.append(_conv(ch, ch, 3, stride=2))
                skips.append(ch)
                res //= 2
        self.mid = nn.ModuleList([
            ResBlock(ch, ch, emb_dim, cfg.dropout),
            TransformerBlock3d(ch, cfg.heads, cond_dim, True, cfg.transformer_depth),
            ResBlock(ch, ch, emb_dim, cfg.dropout),
        ])
        self.up = nn.ModuleList()
        for i, mult in reversed(list(enumerate(cfg.channel_mult))):
            for _ in range(cfg.depth + 1):
                out = cfg.channels * mult
                self.up.append(nn.ModuleList([ResBlock(ch + skips.pop(), out, emb_dim, cfg.dropout),
                                              attn(out, res) or nn.Identity()]))
                ch = out
            if i > 0:
                self.up.append(nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), _conv(ch, ch)))
                res *= 2
        self.norm_out = nn.GroupNorm(_groups(ch), ch)
        self.conv_out = _conv(ch, in_channels)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    @staticmethod
    def _apply(block, h, emb, cond):
        if isinstance(block, nn.ModuleList):
            h = block[0](h, emb)
            return block[1](h, cond) if isinstance(block[1], TransformerBlock3d) else h
        return block(h)

    def forward(self, x, c_noise, cond=None):
        emb = self.noise_embed(c_noise.reshape(-1).expand(x.shape[0]))
        h = self.conv_in(x)
        hs = [h]
        for block in self.down:
            h = self._apply(block, h, emb, cond)
            hs.append(h)
        h = self.mid[0](h, emb)
        h = self.mid[1](h, cond)
        h = self.mid[2](h, emb)
        for block in self.up:
            if isinstance(block, nn.ModuleList):
                h = torch.cat([h, hs.pop()], dim=1)
            h = self._apply(block, h, emb, cond)
        return self.conv_out(F.silu(self.norm_out(h)))
