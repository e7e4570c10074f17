"""Label -> fixed-length embedding sequences for cross-attention."""

from __future__ import annotations

import torch
from torch import nn


class ConditionEmbedder(nn.Module):
    """Learned per-class token sequences, zero-padded to ``seq_len``.

    Each class owns ``tokens_per_label`` learned vectors; the rest of the
    sequence is zeros.  A separate learned null sequence stands in for the
    condition when it is dropped for classifier-free guidance.
    """

    def __init__(self, n_classes: int, dim: int, seq_len: int = 32, tokens_per_label: int = 4,
                 generator: torch.Generator | None = None):
        super().__init__()
        if tokens_per_label > seq_len:
            raise ValueError("tokens_per_label exceeds seq_len")
        self.n_classes, self.dim, self.seq_len = n_classes, dim, seq_len
        self.table = nn.Parameter(torch.randn(n_classes, tokens_per_label, dim, generator=generator) * 0.02)
        self.null = nn.Parameter(torch.randn(tokens_per_label, dim, generator=generator) * 0.02)

    def _pad(self, seq: torch.Tensor) -> torch.Tensor:
        seq = seq[..., : self.seq_len, :]
        pad = self.seq_len - seq.shape[-2]
        if pad:
            seq = torch.cat([seq, seq.new_zeros(*seq.shape[:-2], pad, self.dim)], dim=-2)
        return seq

    def forward(self, labels) -> torch.Tensor:
        """(B,) int labels or a precomputed (B, L, dim) sequence -> (B, seq_len, dim)."""
        labels = torch.as_tensor(labels)
        if labels.is_floating_point():
            if labels.shape[-1] != self.dim:
                raise ValueError(f"embedding dim {labels.shape[-1]} != {self.dim}")
            return self._pad(labels.to(self.table.dtype))
        labels = labels.long().reshape(-1)
        if ((labels < 0) | (labels >= self.n_classes)).any():
            raise KeyError(f"label outside vocabulary of {self.n_classes} classes: {labels.tolist()}")
        return self._pad(self.table[labels])

    def null_embedding(self, batch: int) -> torch.Tensor:
        return self._pad(self.null).unsqueeze(0).expand(batch, -1, -1)

    def drop(self, cond: torch.Tensor, p: float, generator: torch.Generator | None = None) -> torch.Tensor:
        """Replace each row by the null sequence with probability ``p``."""
        if p <= 0:
            return cond
        keep = torch.rand(cond.shape[0], generator=generator) >= p
        return torch.where(keep[:, None, None], cond, self.null_embedding(cond.shape[0]))
