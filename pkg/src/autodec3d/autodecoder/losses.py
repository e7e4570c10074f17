"""Reconstruction and foreground losses."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn


class IdentityExtractor(nn.Module):
    """Feature extractor whose only feature map is the image itself."""

    def forward(self, img):
        return [img]


class RandomPyramidExtractor(nn.Module):
    """Frozen, seed-pinned random conv features plus the raw pixels.

    A dependency-free stand-in for pretrained perceptual features: three
    strided conv+ReLU stages with weights drawn once from ``seed``.
    """

    def __init__(self, seed: int = 0, widths=(16, 32, 64)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers, cin = [], 3
        for cout in widths:
            conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
            fan_in = cin * 9
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                conv.bias.zero_()
            conv.requires_grad_(False)
            layers.append(conv)
            cin = cout
        self.layers = nn.ModuleList(layers)

    def forward(self, img):
        feats = [img]
        x = img
        for conv in self.layers:
            x = F.relu(conv(x))
            feats.append(x)
        return feats


def make_extractor(name: str, seed: int = 0) -> nn.Module:
    if name == "identity":
        return IdentityExtractor()
    if name == "random_pyramid":
        return RandomPyramidExtractor(seed)
    raise ValueError(f"unknown extractor {name!r}")


def _nchw(img: torch.Tensor) -> torch.Tensor:
    # accepts (H, W, 3), (B, H, W, 3) or (B, 3, H, W)
    if img.ndim == 3:
        img = img.unsqueeze(0)
    if img.shape[-1] == 3 and img.shape[1] != 3:
        img = img.permute(0, 3, 1, 2)
    return img


def loss_reconstruction(render: torch.Tensor, target: torch.Tensor, extractor: nn.Module | None = None,
                        levels: int = 0, reduction: str = "sum") -> torch.Tensor:
    """Pyramidal feature loss ``sum_l sum_i |phi_i(D_l(a)) - phi_i(D_l(b))|``.

    ``D_l`` average-pools by ``2**l``.  ``reduction="mean"`` averages each
    feature map's absolute difference instead of summing it.
    """
    if render.shape != target.shape:
        raise ValueError(f"image shapes differ: {tuple(render.shape)} vs {tuple(target.shape)}")
    extractor = extractor or IdentityExtractor()
    a, b = _nchw(render), _nchw(target)
    total = a.new_zeros(())
    for level in range(levels + 1):
        if level:
            a = F.avg_pool2d(a, 2)
            b = F.avg_pool2d(b, 2)
        for fa, fb in zip(extractor(a), extractor(b)):
            diff = (fa - fb).abs()
            total = total + (diff.mean() if reduction == "mean" else diff.sum())
    return total


def loss_foreground(occupancy: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between rendered occupancy and the mask."""
    if occupancy.shape != mask.shape:
        raise ValueError(f"shapes differ: {tuple(occupancy.shape)} vs {tuple(mask.shape)}")
    return (mask - occupancy).abs().mean()
