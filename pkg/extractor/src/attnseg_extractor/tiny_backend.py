"""Miniature seeded latent model with real attention, for tests and demos.

Twelve transformer blocks run in a fixed forward order (1-based indices):
blocks 1-3 on a 16x16 grid, 4-8 on 8x8, 9-12 back on 16x16, so the default
extraction layers (cross 4-8, self 11) exist at mixed resolutions. Every
block computes an explicit softmax over scaled dot products and reports the
probabilities before multiplying with the values, exactly what the real
backend captures. Weights are drawn once from a seeded generator; the whole
path is deterministic on CPU.

The tokenizer is word-level: lowercase, punctuation split off, ids from a
CRC32 hash, BOS/EOS plus padding to a fixed context length.
"""

from __future__ import annotations

import re
import zlib

import numpy as np
import torch
from torch import nn

from .capture import CapturedAttention

_WORD_RE = re.compile(r"[a-z0-9<>]+|[^\sa-z0-9<>]")


class WordTokenizer:
    """Deterministic word-level tokenizer with a fixed context length."""

    PAD, BOS, EOS = 0, 1, 2

    def __init__(self, context_length: int = 16, vocab_size: int = 4096):
        self.context_length = context_length
        self.vocab_size = vocab_size

    def _word_id(self, word: str) -> int:
        return 3 + zlib.crc32(word.encode("utf-8")) % (self.vocab_size - 3)

    def tokenize_fragment(self, text: str) -> list[int]:
        return [self._word_id(w) for w in _WORD_RE.findall(text.lower())]

    def tokenize(self, text: str) -> list[int]:
        ids = [self.BOS] + self.tokenize_fragment(text) + [self.EOS]
        if len(ids) > self.context_length:
            raise ValueError(
                f"prompt needs {len(ids)} tokens, context length is {self.context_length}"
            )
        return ids + [self.PAD] * (self.context_length - len(ids))


class _Block(nn.Module):
    """One self-attention + one cross-attention, probabilities exposed."""

    def __init__(self, dim: int, token_dim: int, heads: int, generator: torch.Generator):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads

        def mat(rows, cols):
            w = torch.empty(rows, cols)
            w.normal_(0.0, rows**-0.5, generator=generator)
            return nn.Parameter(w)

        self.q_self = mat(dim, dim)
        self.k_self = mat(dim, dim)
        self.v_self = mat(dim, dim)
        self.q_cross = mat(dim, dim)
        self.k_cross = mat(token_dim, dim)
        self.v_cross = mat(token_dim, dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        n, _ = x.shape
        return x.reshape(n, self.heads, self.head_dim).permute(1, 0, 2)

    def _attend(self, x, context, wq, wk, wv):
        q = self._split(x @ wq)
        k = self._split(context @ wk)
        v = self._split(context @ wv)
        probs = torch.softmax(q @ k.transpose(1, 2) / self.head_dim**0.5, dim=-1)
        out = (probs @ v).permute(1, 0, 2).reshape(x.shape[0], -1)
        return out, probs

    def forward(self, x, text):
        out, probs_self = self._attend(x, x, self.q_self, self.k_self, self.v_self)
        x = x + out
        out, probs_cross = self._attend(x, text, self.q_cross, self.k_cross, self.v_cross)
        return x + out, probs_self, probs_cross


class TinyBackend:
    """Seeded stand-in for a latent diffusion model."""

    GRID = 16
    BLOCK_GRIDS = (16, 16, 16, 8, 8, 8, 8, 8, 16, 16, 16, 16)

    def __init__(self, model_seed: int = 0, context_length: int = 16, dim: int = 32, heads: int = 2):
        self.tokenizer = WordTokenizer(context_length=context_length)
        self.token_count = context_length
        self.dim = dim
        gen = torch.Generator().manual_seed(model_seed)
        self.token_embed = torch.empty(self.tokenizer.vocab_size, dim).normal_(
            0.0, 1.0, generator=gen
        )
        self.patch_proj = torch.empty(3, dim).normal_(0.0, 0.5, generator=gen)
        self.blocks = [
            _Block(dim, dim, heads, gen) for _ in self.BLOCK_GRIDS
        ]
        self.note = (
            "tiny seeded backend; transformer blocks numbered 1-12 in forward "
            "order, softmax probabilities captured before the value product, "
            "head-averaged"
        )

    # --- tokenizer -----------------------------------------------------------

    def tokenize(self, text: str) -> list[int]:
        return self.tokenizer.tokenize(text)

    def tokenize_fragment(self, text: str) -> list[int]:
        return self.tokenizer.tokenize_fragment(text)

    # --- latents ---------------------------------------------------------------

    def encode_image(self, image: np.ndarray) -> torch.Tensor:
        x = torch.from_numpy(np.asarray(image, dtype=np.float32) / 255.0)
        x = x.permute(2, 0, 1).unsqueeze(0)
        x = torch.nn.functional.adaptive_avg_pool2d(x, (self.GRID, self.GRID))[0]
        patches = x.permute(1, 2, 0).reshape(self.GRID * self.GRID, 3)
        return patches @ self.patch_proj  # (256, dim)

    def add_noise(self, latent: torch.Tensor, t: int, seed: int) -> torch.Tensor:
        if not 1 <= t <= 1000:
            raise ValueError(f"timestep {t} outside [1, 1000]")
        alpha_bar = 1.0 - t / 1000.0
        gen = torch.Generator().manual_seed(seed)
        eps = torch.empty_like(latent).normal_(0.0, 1.0, generator=gen)
        return alpha_bar**0.5 * latent + (1.0 - alpha_bar) ** 0.5 * eps

    # --- forward ---------------------------------------------------------------

    def _resize(self, x: torch.Tensor, src: int, dst: int) -> torch.Tensor:
        if src == dst:
            return x
        grid = x.reshape(src, src, -1).permute(2, 0, 1).unsqueeze(0)
        grid = torch.nn.functional.interpolate(
            grid, size=(dst, dst), mode="bilinear", align_corners=True
        )
        return grid[0].permute(1, 2, 0).reshape(dst * dst, -1)

    @torch.no_grad()
    def denoise(self, noisy_latent: torch.Tensor, t: int, token_ids: list[int]) -> list[CapturedAttention]:
        text = self.token_embed[torch.tensor(token_ids, dtype=torch.long)]
        text = text + 0.001 * t  # timestep conditioning, flavor only
        captures: list[CapturedAttention] = []
        x = noisy_latent
        current = self.GRID
        for i, (block, grid) in enumerate(zip(self.blocks, self.BLOCK_GRIDS), start=1):
            x = self._resize(x, current, grid)
            current = grid
            x, probs_self, probs_cross = block(x, text)
            captures.append(CapturedAttention(i, "self", probs_self, grid, grid))
            captures.append(CapturedAttention(i, "cross", probs_cross, grid, grid))
        return captures
