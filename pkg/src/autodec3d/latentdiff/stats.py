"""Median/IQR statistics for long-tailed latent volumes.

Quartiles use the linear-interpolation convention (numpy's default
``method="linear"``): the q-quantile of n sorted values sits at fractional
position ``q * (n - 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

NORMAL_IQR = 0.7413  # IQR -> standard deviation of a normal distribution


@dataclass
class RobustStats:
    median: torch.Tensor  # (C,) or (1,) when global
    iqr: torch.Tensor
    degenerate: torch.Tensor  # bool, same shape
    divide_by: str = "iqr"  # iqr | normalized_iqr

    @property
    def scale(self) -> torch.Tensor:
        """Normal-equivalent standard deviation ``0.7413 * IQR`` (1 where degenerate)."""
        return torch.where(self.degenerate, torch.ones_like(self.iqr), NORMAL_IQR * self.iqr)

    @property
    def divisor(self) -> torch.Tensor:
        d = self.iqr if self.divide_by == "iqr" else NORMAL_IQR * self.iqr
        return torch.where(self.degenerate, torch.ones_like(d), d)

    def to_dict(self) -> dict:
        return {
            "median": self.median.tolist(),
            "iqr": self.iqr.tolist(),
            "degenerate": self.degenerate.tolist(),
            "divide_by": self.divide_by,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RobustStats":
        return cls(
            torch.tensor(d["median"], dtype=torch.float64),
            torch.tensor(d["iqr"], dtype=torch.float64),
            torch.tensor(d["degenerate"], dtype=torch.bool),
            d.get("divide_by", "iqr"),
        )


def compute_robust_stats(latents, per_channel: bool = True, divide_by: str = "iqr") -> RobustStats:
    """Median and IQR over all voxels of a stack of (C, S, S, S) latents."""
    if isinstance(latents, torch.Tensor):
        x = latents.detach()
        if x.dim() == 4:
            raise ValueError("need a batch of at least 2 latent volumes")
    else:
        x = torch.stack([torch.as_tensor(v).detach() for v in latents])
    if x.shape[0] < 2:
        raise ValueError("need at least 2 latent volumes")
    arr = x.double().cpu().numpy()
    c = arr.shape[1]
    flat = arr.transpose(1, 0, *range(2, arr.ndim)).reshape(c, -1) if per_channel else arr.reshape(1, -1)
    q1, med, q3 = np.quantile(flat, [0.25, 0.5, 0.75], axis=1, method="linear")
    iqr = q3 - q1
    degenerate = ~(iqr > 0)
    return RobustStats(torch.from_numpy(med), torch.from_numpy(iqr), torch.from_numpy(degenerate), divide_by)


def _bcast(v: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    # channel axis is -4 for both (C,S,S,S) and (B,C,S,S,S)
    return v.to(x.dtype).view(-1, 1, 1, 1)


def robust_normalize(x: torch.Tensor, stats: RobustStats) -> torch.Tensor:
    return (x - _bcast(stats.median, x)) / _bcast(stats.divisor, x)


def robust_denormalize(x: torch.Tensor, stats: RobustStats) -> torch.Tensor:
    return x * _bcast(stats.divisor, x) + _bcast(stats.median, x)
