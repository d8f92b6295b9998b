"""One-pass attention extraction into tensor-store bundles.

For each noise sample the image latent is re-noised at the requested
timestep, the model runs one denoising forward pass with the planned prompt,
and the selected cross layers plus the one self layer are head-averaged and
written as a bundle directory. The token manifest is validated against the
plan, and the bundle against the store invariants, before a sample counts as
written.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from attnseg.prompt_plan import PromptPlan, validate_manifest
from attnseg.tensor_store import AttentionBundle, CrossLayer, TokenManifest, write_bundle

from .capture import CapturedAttention, DiffusionBackend
from .spans import map_spans

DEFAULT_CROSS_LAYERS = (4, 5, 6, 7, 8)
DEFAULT_SELF_LAYER = 11
DEFAULT_TIMESTEP = 150


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def default_class_ids(plan: PromptPlan) -> dict[str, int]:
    """Sequential ids per category (sorted); identifier words start at 100."""
    ids = {label: i + 1 for i, label in enumerate(sorted(plan.category_labels()))}
    identifiers = sorted(p.label for p in plan.parts if p.kind == "identifier")
    ids.update({label: 100 + i for i, label in enumerate(identifiers)})
    return ids


def _pick(captures: list[CapturedAttention], kind: str, layer_index: int) -> CapturedAttention:
    for cap in captures:
        if cap.kind == kind and cap.layer_index == layer_index:
            return cap
    have = sorted({c.layer_index for c in captures if c.kind == kind})
    raise ValueError(f"no {kind} capture for layer {layer_index}; model has {have}")


def _as_probs(cap: CapturedAttention) -> np.ndarray:
    probs = cap.head_mean().detach().cpu().numpy().astype(np.float32)
    # Head averaging keeps rows softmaxed; clip float dust so the store's
    # [0, 1] bound check cannot trip on -1e-9.
    return np.clip(probs, 0.0, 1.0)


def extract(
    image_path: str | Path,
    plan: PromptPlan,
    out_root: str | Path,
    backend: DiffusionBackend,
    t: int = DEFAULT_TIMESTEP,
    samples: int = 1,
    seed: int = 0,
    cross_layers: tuple[int, ...] = DEFAULT_CROSS_LAYERS,
    self_layer: int = DEFAULT_SELF_LAYER,
    class_ids: dict[str, int] | None = None,
    image_id: str | None = None,
) -> list[Path]:
    """Write one bundle dir per noise sample; returns the directories."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    image = load_image(image_path)
    height, width = image.shape[:2]
    spans = map_spans(plan, backend.tokenize, backend.tokenize_fragment)
    manifest = TokenManifest(
        prompt_text=plan.sentence,
        entries=spans,
        class_ids=class_ids or default_class_ids(plan),
    )
    mismatches = validate_manifest(plan, manifest)
    if mismatches:
        raise ValueError(
            "token manifest does not realize the plan:\n  "
            + "\n  ".join(str(m) for m in mismatches)
        )
    latent = backend.encode_image(image)
    token_ids = backend.tokenize(plan.sentence)
    out_root = Path(out_root)
    image_id = image_id or Path(image_path).stem
    dirs: list[Path] = []
    for sample in range(samples):
        noisy = backend.add_noise(latent, t, seed=seed * 100_003 + sample)
        captures = backend.denoise(noisy, t, token_ids)
        self_cap = _pick(captures, "self", self_layer)
        cross = []
        for idx in cross_layers:
            cap = _pick(captures, "cross", idx)
            cross.append(
                CrossLayer(
                    layer_index=idx,
                    width=cap.width,
                    height=cap.height,
                    tokens=backend.token_count,
                    data=_as_probs(cap),
                )
            )
        bundle = AttentionBundle(
            image_id=image_id,
            image_width=width,
            image_height=height,
            cross_layers=cross,
            self_map=_as_probs(self_cap),
            self_width=self_cap.width,
            self_height=self_cap.height,
            token_manifest=manifest,
            sample_index=sample,
            timestep=t,
            extraction_note=backend.note,
        )
        dest = out_root / f"sample_{sample}"
        write_bundle(bundle, dest)  # the store validator is the gate
        dirs.append(dest)
    return dirs
