"""Stable Diffusion backend: captures attention from a diffusers UNet.

Requires the optional `sd` extra (diffusers + transformers) and local model
weights; everything imports lazily so the rest of the package works without
them. Transformer blocks are enumerated 1-based in module declaration order
(down blocks, mid block, up blocks), which matches the forward pass; each
block's attn1 is the self capture and attn2 the cross capture. Probabilities
come from the module's own softmax (post-softmax, pre-value product) and are
cast to float32.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from .capture import CapturedAttention

SD_CONTEXT_LENGTH = 77
SD_IMAGE_SIZE = 512


class _CaptureProcessor:
    """Drop-in attention processor that also records the softmax output."""

    def __init__(self, sink: list, layer_index: int, kind: str):
        self.sink = sink
        self.layer_index = layer_index
        self.kind = kind

    def __call__(self, attn, hidden_states, encoder_hidden_states=None,
                 attention_mask=None, **kwargs):
        query = attn.to_q(hidden_states)
        context = hidden_states if encoder_hidden_states is None else encoder_hidden_states
        if attn.norm_cross is not None:
            context = attn.norm_encoder_hidden_states(context)
        key = attn.to_k(context)
        value = attn.to_v(context)
        query = attn.head_to_batch_dim(query)
        key = attn.head_to_batch_dim(key)
        value = attn.head_to_batch_dim(value)
        probs = attn.get_attention_scores(query, key, attention_mask)
        heads = attn.heads
        batch = probs.shape[0] // heads
        stored = probs.reshape(batch, heads, probs.shape[1], probs.shape[2])[0]
        side = int(round(stored.shape[1] ** 0.5))
        self.sink.append(
            CapturedAttention(self.layer_index, self.kind, stored.float().cpu(), side, side)
        )
        hidden = torch.bmm(probs, value)
        hidden = attn.batch_to_head_dim(hidden)
        hidden = attn.to_out[0](hidden)
        return attn.to_out[1](hidden)


class StableDiffusionBackend:
    """Wraps a locally available Stable Diffusion checkpoint directory."""

    def __init__(self, model_path: str | Path, device: str = "cpu", dtype=torch.float32):
        try:
            from diffusers import AutoencoderKL, UNet2DConditionModel
            from transformers import CLIPTextModel, CLIPTokenizer
        except ImportError as e:
            raise ImportError(
                "StableDiffusionBackend needs the 'sd' extra: pip install 'attnseg-extractor[sd]'"
            ) from e
        model_path = Path(model_path)
        self.device = device
        self.dtype = dtype
        self.vae = AutoencoderKL.from_pretrained(model_path / "vae", torch_dtype=dtype).to(device)
        self.unet = UNet2DConditionModel.from_pretrained(model_path / "unet", torch_dtype=dtype).to(device)
        self.text_encoder = CLIPTextModel.from_pretrained(model_path / "text_encoder", torch_dtype=dtype).to(device)
        self.tokenizer = CLIPTokenizer.from_pretrained(model_path / "tokenizer")
        self.vae.eval()
        self.unet.eval()
        self.text_encoder.eval()
        self.token_count = SD_CONTEXT_LENGTH
        self._captures: list[CapturedAttention] = []
        self._install_processors()
        self.note = (
            "stable-diffusion backend; BasicTransformerBlocks numbered 1-based in "
            "module declaration order (down, mid, up); attn1=self, attn2=cross; "
            "softmax probabilities captured before the value product, head-averaged, float32"
        )

    def _install_processors(self) -> None:
        index = 0
        for _, module in self.unet.named_modules():
            if type(module).__name__ != "BasicTransformerBlock":
                continue
            index += 1
            module.attn1.set_processor(_CaptureProcessor(self._captures, index, "self"))
            module.attn2.set_processor(_CaptureProcessor(self._captures, index, "cross"))
        if index == 0:
            raise RuntimeError("no BasicTransformerBlock modules found in the UNet")
        self.block_count = index

    # --- tokenizer -------------------------------------------------------------

    def tokenize(self, text: str) -> list[int]:
        return self.tokenizer(
            text,
            padding="max_length",
            max_length=SD_CONTEXT_LENGTH,
            truncation=True,
        ).input_ids

    def tokenize_fragment(self, text: str) -> list[int]:
        return self.tokenizer(text, add_special_tokens=False).input_ids

    # --- latents -----------------------------------------------------------------

    def encode_image(self, image: np.ndarray) -> torch.Tensor:
        from PIL import Image

        im = Image.fromarray(image).resize((SD_IMAGE_SIZE, SD_IMAGE_SIZE), Image.BILINEAR)
        x = torch.from_numpy(np.asarray(im, dtype=np.float32) / 127.5 - 1.0)
        x = x.permute(2, 0, 1).unsqueeze(0).to(self.device, self.dtype)
        with torch.no_grad():
            latent = self.vae.encode(x).latent_dist.mode()
        return latent * self.vae.config.scaling_factor

    def add_noise(self, latent: torch.Tensor, t: int, seed: int) -> torch.Tensor:
        if not 1 <= t <= 1000:
            raise ValueError(f"timestep {t} outside [1, 1000]")
        # Standard DDPM cosine-free linear beta schedule, as trained.
        betas = torch.linspace(0.00085**0.5, 0.012**0.5, 1000, dtype=torch.float64) ** 2
        alpha_bar = torch.cumprod(1.0 - betas, dim=0)[t - 1].to(self.dtype)
        gen = torch.Generator(device="cpu").manual_seed(seed)
        eps = torch.randn(latent.shape, generator=gen, dtype=torch.float32)
        eps = eps.to(self.device, self.dtype)
        return alpha_bar**0.5 * latent + (1.0 - alpha_bar) ** 0.5 * eps

    # --- forward ---------------------------------------------------------------

    @torch.no_grad()
    def denoise(self, noisy_latent: torch.Tensor, t: int, token_ids: list[int]) -> list[CapturedAttention]:
        self._captures.clear()
        ids = torch.tensor([token_ids], dtype=torch.long, device=self.device)
        text = self.text_encoder(ids)[0].to(self.dtype)
        timestep = torch.tensor([t], device=self.device)
        self.unet(noisy_latent, timestep, encoder_hidden_states=text)
        return list(self._captures)
