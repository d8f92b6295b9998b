"""Attention fusion: aggregate cross layers, propagate through self-attention,
normalize per-class attribution, estimate background, emit label masks.

The pipeline treats the self-attention map as a patch affinity matrix and
updates the aggregated patch-token map by repeated multiplication
(``self_map ** order @ cross``), then averages each label's token columns,
min-max normalizes the resulting grid to [0, 1], and scores background as
``max(thr - max_over_classes, 0) ** power`` per cell. Channel 0 of the stack
is always that background estimate; background *prompt* tokens only shape the
softmax inside the model and never become output channels.

All operations are pure; per-image fusion jobs parallelize with no shared
state. Matrix powers accumulate in float64 and are stored as float32.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
import json

import numpy as np

from .configfile import read_kv
from .prompt_plan import PromptPlan, validate_manifest
from .resample import resize_bilinear
from .tensor_store import AttentionBundle, LabelMask, TokenManifest

GRID = "grid"
IMAGE = "image"

BACKGROUND_CHANNEL = ("background", 0)


@dataclass
class FusionConfig:
    order: int = 2
    cross_layer_ids: tuple[int, ...] = (4, 5, 6, 7, 8)
    bg_threshold: float = 1.0
    bg_power: float = 2.0
    uncertainty_band: float = 0.05

    def validate(self) -> None:
        if self.order < 0:
            raise ValueError(f"order must be >= 0, got {self.order}")
        if not self.cross_layer_ids:
            raise ValueError("cross_layer_ids must be non-empty")
        if not 0.0 < self.bg_threshold <= 1.5:
            raise ValueError(f"bg_threshold must be in (0, 1.5], got {self.bg_threshold}")
        if self.bg_power <= 0.0:
            raise ValueError(f"bg_power must be > 0, got {self.bg_power}")
        if self.uncertainty_band < 0.0:
            raise ValueError(f"uncertainty_band must be >= 0, got {self.uncertainty_band}")

    @classmethod
    def from_mapping(cls, kv: dict[str, str]) -> "FusionConfig":
        cfg = cls()
        if "order" in kv:
            cfg.order = int(kv["order"])
        if "cross_layers" in kv:
            cfg.cross_layer_ids = tuple(
                int(x) for x in kv["cross_layers"].replace(",", " ").split()
            )
        if "bg_thr" in kv:
            cfg.bg_threshold = float(kv["bg_thr"])
        if "bg_power" in kv:
            cfg.bg_power = float(kv["bg_power"])
        if "band" in kv:
            cfg.uncertainty_band = float(kv["band"])
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path: str | Path) -> "FusionConfig":
        return cls.from_mapping(read_kv(path))

    def as_kv(self) -> dict[str, str]:
        return {
            "order": str(self.order),
            "cross_layers": ",".join(str(i) for i in self.cross_layer_ids),
            "bg_thr": repr(self.bg_threshold),
            "bg_power": repr(self.bg_power),
            "band": repr(self.uncertainty_band),
        }


@dataclass
class CorrelationMap:
    """Stacked per-class attribution maps; channel 0 is the background estimate."""

    channels: list[tuple[str, int]]  # (label, class_id), channels[0] == ("background", 0)
    data: np.ndarray  # (C, H, W) float32
    resolution_stage: str  # "grid" | "image"

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    def validate(self) -> None:
        if self.data.ndim != 3 or self.data.shape[0] != len(self.channels):
            raise ValueError("data shape does not match channel list")
        if self.resolution_stage not in (GRID, IMAGE):
            raise ValueError(f"unknown resolution_stage {self.resolution_stage!r}")
        if not self.channels or self.channels[0] != BACKGROUND_CHANNEL:
            raise ValueError("channel 0 must be ('background', 0)")
        ids = [cid for _, cid in self.channels]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate class ids across channels: {ids}")
        if any(cid <= 0 for _, cid in self.channels[1:]):
            raise ValueError("foreground class ids must be positive")


def aggregate_cross(bundle: AttentionBundle, layer_ids: tuple[int, ...] | list[int]) -> np.ndarray:
    """Average the requested cross layers after bilinear resize to the self grid.

    Each layer's (h*w, tokens) map is reshaped per token to its 2-D grid,
    resized to the self-attention grid, and the layers are averaged uniformly.
    Rows are renormalized to sum 1 afterwards, since resampling softmax rows
    need not preserve the sums exactly. Returns (WH, tokens) float32.
    """
    th, tw = bundle.self_height, bundle.self_width
    acc: np.ndarray | None = None
    for layer_id in layer_ids:
        cl = bundle.layer(layer_id)  # KeyError on missing id
        grid = cl.data.reshape(cl.height, cl.width, cl.tokens)
        resized = resize_bilinear(grid, th, tw).reshape(th * tw, cl.tokens)
        acc = resized if acc is None else acc + resized
    assert acc is not None
    mean = acc / len(layer_ids)
    sums = mean.sum(axis=1, keepdims=True)
    if (sums <= 0.0).any():
        raise ValueError("degenerate zero-sum row after cross-layer interpolation")
    return (mean / sums).astype(np.float32)


def propagate(self_map: np.ndarray, cross: np.ndarray, order: int) -> np.ndarray:
    """Random-walk update: multiply ``cross`` by ``self_map`` ``order`` times.

    order=0 returns ``cross`` unchanged. Row-stochastic inputs stay
    row-stochastic. Accumulates in float64, returns float32.
    """
    if order < 0:
        raise ValueError(f"order must be >= 0, got {order}")
    if self_map.ndim != 2 or self_map.shape[0] != self_map.shape[1]:
        raise ValueError(f"self map must be square, got {self_map.shape}")
    if cross.ndim != 2 or cross.shape[0] != self_map.shape[0]:
        raise ValueError(f"shape mismatch: self {self_map.shape} vs cross {cross.shape}")
    out = cross.astype(np.float64)
    s = self_map.astype(np.float64)
    for _ in range(order):
        out = s @ out
    return out.astype(np.float32)


def class_attribution(
    propagated: np.ndarray,
    manifest: TokenManifest,
    label: str,
    width: int,
    height: int,
) -> np.ndarray:
    """Mean over the label's token span, reshaped to (H, W) and min-max normalized.

    A constant map (max == min) carries no localization signal and comes back
    all zeros. Identifier spans are treated exactly like category spans.
    """
    span = manifest.find(label, kinds=("category", "identifier"))
    cols = propagated[:, span.start : span.end + 1].astype(np.float64)
    grid = cols.mean(axis=1).reshape(height, width)
    lo = grid.min()
    hi = grid.max()
    if hi <= lo:
        return np.zeros((height, width), dtype=np.float32)
    return ((grid - lo) / (hi - lo)).astype(np.float32)


def background_map(fg_channels: np.ndarray, thr: float, power: float) -> np.ndarray:
    """Per-cell background score ``max(thr - max_over_classes, 0) ** power``.

    With thr=1 and power=2 this is the squared complement of the strongest
    class response. Clamping at 0 before powering keeps non-integer powers
    defined.
    """
    if fg_channels.ndim != 3 or fg_channels.shape[0] == 0:
        raise ValueError("background_map needs a non-empty (K, H, W) stack")
    peak = fg_channels.astype(np.float64).max(axis=0)
    return (np.maximum(thr - peak, 0.0) ** power).astype(np.float32)


def fuse(
    bundle: AttentionBundle,
    plan: PromptPlan,
    config: FusionConfig | None = None,
    channel_kinds: tuple[str, ...] = ("category",),
) -> CorrelationMap:
    """Full grid-stage fusion for one bundle.

    Aggregates the configured cross layers, propagates through the self map,
    computes one attribution channel per manifest span whose kind is in
    ``channel_kinds`` (manifest order), and prepends the background channel.
    The bundle manifest must validate against the plan first.
    """
    config = config or FusionConfig()
    config.validate()
    manifest = bundle.token_manifest
    mismatches = validate_manifest(plan, manifest)
    if mismatches:
        raise ValueError(
            "manifest does not match plan: " + "; ".join(str(m) for m in mismatches)
        )
    cross = aggregate_cross(bundle, config.cross_layer_ids)
    sc = propagate(bundle.self_map, cross, config.order)
    w, h = bundle.self_width, bundle.self_height
    channels: list[tuple[str, int]] = [BACKGROUND_CHANNEL]
    grids: list[np.ndarray] = []
    for entry in manifest.of_kind(*channel_kinds):
        grids.append(class_attribution(sc, manifest, entry.label, w, h))
        try:
            channels.append((entry.label, manifest.class_ids[entry.label]))
        except KeyError:
            raise ValueError(f"manifest class_ids has no id for channel {entry.label!r}")
    if not grids:
        raise ValueError(f"no manifest spans of kind {channel_kinds} to fuse")
    bg = background_map(np.stack(grids), config.bg_threshold, config.bg_power)
    out = CorrelationMap(
        channels=channels,
        data=np.stack([bg] + grids).astype(np.float32),
        resolution_stage=GRID,
    )
    out.validate()
    return out


def ensemble(
    maps: list[CorrelationMap],
    recompute_background: bool = False,
    bg_threshold: float = 1.0,
    bg_power: float = 2.0,
) -> CorrelationMap:
    """Elementwise mean across noise samples (identical channel layout required).

    By default the background channel is averaged like any other; with
    ``recompute_background`` it is re-derived from the averaged foreground
    channels instead.
    """
    if not maps:
        raise ValueError("ensemble of zero maps")
    first = maps[0]
    for m in maps[1:]:
        if m.channels != first.channels:
            raise ValueError("ensemble channel layouts differ")
        if m.data.shape != first.data.shape or m.resolution_stage != first.resolution_stage:
            raise ValueError("ensemble shapes or stages differ")
    mean = np.mean([m.data.astype(np.float64) for m in maps], axis=0)
    if recompute_background:
        mean[0] = background_map(mean[1:].astype(np.float32), bg_threshold, bg_power)
    return CorrelationMap(
        channels=list(first.channels),
        data=mean.astype(np.float32),
        resolution_stage=first.resolution_stage,
    )


def upsample_to_image(sc: CorrelationMap, image_w: int, image_h: int) -> CorrelationMap:
    """Bilinearly upsample every channel from the grid to image resolution."""
    if sc.resolution_stage != GRID:
        raise ValueError("upsample_to_image expects a grid-stage map")
    data = np.stack(
        [resize_bilinear(sc.data[c], image_h, image_w) for c in range(sc.data.shape[0])]
    )
    return CorrelationMap(
        channels=list(sc.channels), data=data.astype(np.float32), resolution_stage=IMAGE
    )


def label_mask_from_scores(sc: CorrelationMap, band: float) -> LabelMask:
    """Per-pixel argmax over channels with ties toward the lower class id.

    Pixels whose top-two score gap is below ``band`` are flagged uncertain.
    Works at image stage; shared by the fusion and CRF mask paths.
    """
    if sc.resolution_stage != IMAGE:
        raise ValueError("label_mask_from_scores expects an image-stage map")
    ids = np.array([cid for _, cid in sc.channels], dtype=np.int64)
    order = np.argsort(ids, kind="stable")
    data = sc.data[order]  # ascending class id; argmax takes the first maximum
    winner = np.argmax(data, axis=0)
    labels = ids[order][winner].astype(np.uint8)
    if data.shape[0] >= 2:
        top2 = np.sort(data, axis=0)[-2:]
        uncertain = (top2[1] - top2[0]) < band
    else:
        uncertain = np.zeros(data.shape[1:], dtype=bool)
    return LabelMask(labels=labels, uncertain=uncertain)


def to_mask(sc: CorrelationMap, image_w: int, image_h: int, band: float = 0.05) -> LabelMask:
    """Upsample a grid-stage map to image resolution and take the label argmax."""
    return label_mask_from_scores(upsample_to_image(sc, image_w, image_h), band)


def save_map(sc: CorrelationMap, prefix: str | Path) -> None:
    """Write ``<prefix>.f32`` (C,H,W row-major little-endian) + ``<prefix>.json``."""
    p = Path(prefix)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.with_suffix(".f32").write_bytes(
        np.ascontiguousarray(sc.data, dtype="<f4").tobytes()
    )
    meta = {
        "channels": [[label, cid] for label, cid in sc.channels],
        "shape": list(sc.data.shape),
        "resolution_stage": sc.resolution_stage,
    }
    p.with_suffix(".json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_map(prefix: str | Path) -> CorrelationMap:
    p = Path(prefix)
    meta = json.loads(p.with_suffix(".json").read_text(encoding="utf-8"))
    shape = tuple(int(x) for x in meta["shape"])
    raw = p.with_suffix(".f32").read_bytes()
    if len(raw) != int(np.prod(shape)) * 4:
        raise ValueError(f"{p}.f32 byte length does not match shape {shape}")
    sc = CorrelationMap(
        channels=[(str(label), int(cid)) for label, cid in meta["channels"]],
        data=np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32),
        resolution_stage=meta["resolution_stage"],
    )
    sc.validate()
    return sc
