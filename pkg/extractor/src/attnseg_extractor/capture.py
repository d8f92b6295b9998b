"""Backend protocol and the captured-attention record.

A backend wraps one denoising model: it encodes an image to a latent, noises
it to a timestep, runs a single forward pass, and hands back the softmaxed
attention probabilities of its transformer blocks. Blocks are numbered
1-based in forward order; each block contributes one self-attention and one
cross-attention capture. Probabilities are taken after the softmax and before
multiplication with the value matrix, then head-averaged downstream.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import torch


@dataclass
class CapturedAttention:
    layer_index: int  # 1-based transformer-block order in the forward pass
    kind: str  # "self" | "cross"
    probs: torch.Tensor  # (heads, queries, keys), rows softmaxed
    width: int
    height: int

    def head_mean(self) -> torch.Tensor:
        return self.probs.float().mean(dim=0)


class DiffusionBackend(Protocol):
    """What extract() needs from a model wrapper."""

    token_count: int  # context length l of the text encoder
    note: str  # human-readable indexing/extraction description

    def tokenize(self, text: str) -> list[int]:
        """Full-prompt token ids, including special and padding tokens."""
        ...

    def tokenize_fragment(self, text: str) -> list[int]:
        """Token ids of a surface fragment, no special tokens."""
        ...

    def encode_image(self, image) -> torch.Tensor:
        """RGB uint8 array (H, W, 3) -> latent tensor."""
        ...

    def add_noise(self, latent: torch.Tensor, t: int, seed: int) -> torch.Tensor:
        ...

    def denoise(
        self, noisy_latent: torch.Tensor, t: int, token_ids: list[int]
    ) -> list[CapturedAttention]:
        """One forward pass; returns every block's attention captures."""
        ...
