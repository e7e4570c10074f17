"""Per-object latent codes: a direct table or hashed sub-codebooks."""

from __future__ import annotations

import torch
from torch import nn

from ..config import EmbeddingConfig

GOLDEN = 0x9E3779B9  # 2**32 / phi, odd


def multiplier(book: int, word_bits: int = 32, scheme: str = "quadratic") -> int:
    """Odd hashing multiplier for codebook ``book``.

    ``quadratic`` uses ``2**(w-1) + 2*i**2 + 1``.  ``golden`` perturbs the
    Fibonacci-hashing constant per book and keeps it odd and in
    ``[2**(w-1), 2**w)``.
    """
    if scheme == "quadratic":
        a = 2 ** (word_bits - 1) + 2 * book * book + 1
    elif scheme == "golden":
        base = (GOLDEN >> (32 - word_bits)) if word_bits <= 32 else GOLDEN << (word_bits - 32)
        a = (base + 2 * 0x2545F491 * book) % 2**word_bits | 1
        a |= 1 << (word_bits - 1)
    else:
        raise ValueError(f"unknown multiplier scheme {scheme!r}")
    if not (a % 2 == 1 and 2 ** (word_bits - 1) <= a < 2**word_bits):
        raise ValueError(f"multiplier {a} for book {book} out of range")
    return a


def hash_index(k, book: int, table_bits: int, word_bits: int = 32, scheme: str = "quadratic"):
    """Multiplicative hash ``((a*k) mod 2**w) >> (w - r)``.

    ``k`` may be an int or an integer tensor.  Works in wrapping int64
    arithmetic, which is exact modulo ``2**w`` for ``w <= 32``.
    """
    a = multiplier(book, word_bits, scheme)
    mask = 2**word_bits - 1
    shift = word_bits - table_bits
    if isinstance(k, int):
        if k < 0:
            raise ValueError("object index must be non-negative")
        return ((a * k) & mask) >> shift
    k = torch.as_tensor(k, dtype=torch.int64)
    if (k < 0).any():
        raise ValueError("object index must be non-negative")
    if word_bits > 32:
        raise ValueError("tensor hashing supports word_bits <= 32")
    prod = (k & mask) * a  # wraps mod 2**64; low w bits exact
    return (prod & mask) >> shift


class EmbeddingLibrary(nn.Module):
    """Learnable object codes.

    In ``direct`` mode every object owns a row.  In ``hashed`` mode the code
    of object ``k`` is the concatenation over books ``i`` of entry
    ``hash_index(k, i)`` of book ``i``, so any non-negative index is valid.
    """

    def __init__(self, n_objects: int, cfg: EmbeddingConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        self.n_objects = n_objects
        if cfg.mode == "direct":
            w = torch.randn(n_objects, cfg.dim, generator=generator) * cfg.init_std
            self.table = nn.Parameter(w)
        else:
            sub = cfg.dim // cfg.n_books
            w = torch.randn(cfg.n_books, 2**cfg.table_bits, sub, generator=generator) * cfg.init_std
            self.books = nn.Parameter(w)

    @property
    def dim(self) -> int:
        return self.cfg.dim

    def book_indices(self, idx: torch.Tensor) -> torch.Tensor:
        """(..., n_books) table rows selected for each object index."""
        cfg = self.cfg
        return torch.stack([hash_index(idx, i, cfg.table_bits, cfg.word_bits, cfg.multiplier)
                            for i in range(cfg.n_books)], dim=-1)

    def forward(self, idx) -> torch.Tensor:
        idx = torch.as_tensor(idx, dtype=torch.int64)
        if self.cfg.mode == "direct":
            if (idx < 0).any() or (idx >= self.n_objects).any():
                raise IndexError(f"object index out of range [0, {self.n_objects})")
            return self.table[idx]
        rows = self.book_indices(idx)
        books = torch.arange(self.cfg.n_books)
        parts = self.books[books, rows]  # (..., n_books, sub)
        return parts.reshape(*idx.shape, self.cfg.dim)
