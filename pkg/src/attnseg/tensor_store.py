"""On-disk bundle format for attention tensors, masks, and token manifests.

A bundle directory holds one image's attention dump:

    manifest.json        metadata, shapes, token spans (``format_version`` 1)
    cross_<layer>.f32    (height*width, tokens) little-endian f32, row-major
    self.f32             (WH, WH) little-endian f32, row-major

Raw files carry no header; shapes live in the manifest and byte lengths must
match exactly. Spatial flattening is row-major over (height, width): grid
cell (x, y) maps to matrix row ``y * width + x``. Extractors must follow the
same convention.

Masks are 8-bit single-channel PNGs whose pixel value is the class id
(0 = background, 255 conventionally "ignore"). The per-pixel uncertainty flag
is a sibling PNG named ``<stem>.uncertain.png`` holding 0/255.

Bundles are immutable after load and safe to share across threads; writers
need exclusive directory access.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
SELF_FILE = "self.f32"
ROW_SUM_TOL = 1e-4

SPAN_KINDS = ("category", "identifier", "background", "other")


class BundleError(ValueError):
    """A bundle, manifest, or mask violates the format contract."""


@dataclass(frozen=True)
class TokenSpan:
    """Inclusive token index range [start, end] realizing one label."""

    label: str
    kind: str
    start: int
    end: int

    @property
    def width(self) -> int:
        return self.end - self.start + 1

    @property
    def indices(self) -> range:
        return range(self.start, self.end + 1)


@dataclass
class TokenManifest:
    """Maps prompt labels (categories, identifiers, backgrounds) to token spans."""

    prompt_text: str
    entries: list[TokenSpan]
    class_ids: dict[str, int] = field(default_factory=dict)

    def validate(self, token_count: int) -> None:
        seen_categories: set[str] = set()
        for e in self.entries:
            if e.kind not in SPAN_KINDS:
                raise BundleError(f"unknown span kind {e.kind!r} for {e.label!r}")
            if e.start > e.end:
                raise BundleError(f"empty token span [{e.start}, {e.end}] for {e.label!r}")
            if e.start < 0 or e.end >= token_count:
                raise BundleError(
                    f"token span [{e.start}, {e.end}] of {e.label!r} outside [0, {token_count})"
                )
            if e.kind == "category":
                if e.label in seen_categories:
                    raise BundleError(f"duplicate category label {e.label!r}")
                seen_categories.add(e.label)
        cats = [e for e in self.entries if e.kind == "category"]
        for i, a in enumerate(cats):
            for b in cats[i + 1 :]:
                if a.start <= b.end and b.start <= a.end:
                    raise BundleError(
                        f"category spans of {a.label!r} and {b.label!r} overlap"
                    )

    def find(self, label: str, kinds: tuple[str, ...] = ("category",)) -> TokenSpan:
        for e in self.entries:
            if e.label == label and e.kind in kinds:
                return e
        raise KeyError(f"no span of kind {kinds} for label {label!r}")

    def of_kind(self, *kinds: str) -> list[TokenSpan]:
        return [e for e in self.entries if e.kind in kinds]


@dataclass
class CrossLayer:
    """One U-Net layer's head-averaged patch-token map, rows softmaxed over tokens."""

    layer_index: int
    width: int
    height: int
    tokens: int
    data: np.ndarray  # (height*width, tokens) float32


@dataclass
class AttentionBundle:
    """One image's serialized cross-attention stack plus self-attention map."""

    image_id: str
    image_width: int
    image_height: int
    cross_layers: list[CrossLayer]
    self_map: np.ndarray  # (WH, WH) float32, rows softmaxed over positions
    self_width: int
    self_height: int
    token_manifest: TokenManifest
    sample_index: int = 0
    timestep: int = 150
    extraction_note: str = ""

    def layer(self, layer_index: int) -> CrossLayer:
        for cl in self.cross_layers:
            if cl.layer_index == layer_index:
                return cl
        raise KeyError(f"bundle has no cross layer {layer_index}")

    def validate(self) -> None:
        if self.image_width <= 0 or self.image_height <= 0:
            raise BundleError("image dimensions must be positive")
        if self.sample_index < 0:
            raise BundleError("sample_index must be >= 0")
        if self.timestep < 1:
            raise BundleError("timestep must be >= 1")
        wh = self.self_width * self.self_height
        if self.self_map.shape != (wh, wh):
            raise BundleError(
                f"self map shape {self.self_map.shape} != ({wh}, {wh}) "
                f"from grid {self.self_width}x{self.self_height}"
            )
        _check_stochastic(self.self_map, "self map")
        if not self.cross_layers:
            raise BundleError("bundle has no cross layers")
        token_counts = {cl.tokens for cl in self.cross_layers}
        if len(token_counts) != 1:
            raise BundleError(f"cross layers disagree on token count: {sorted(token_counts)}")
        seen_layers: set[int] = set()
        for cl in self.cross_layers:
            if cl.layer_index in seen_layers:
                raise BundleError(f"duplicate cross layer index {cl.layer_index}")
            seen_layers.add(cl.layer_index)
            expect = (cl.height * cl.width, cl.tokens)
            if cl.data.shape != expect:
                raise BundleError(
                    f"cross layer {cl.layer_index} shape {cl.data.shape} != {expect}"
                )
            _check_stochastic(cl.data, f"cross layer {cl.layer_index}")
        self.token_manifest.validate(token_counts.pop())


def _check_stochastic(mat: np.ndarray, what: str) -> None:
    if not np.isfinite(mat).all():
        raise BundleError(f"{what} contains NaN/Inf")
    if mat.min() < 0.0 or mat.max() > 1.0:
        raise BundleError(f"{what} has entries outside [0, 1]")
    sums = mat.sum(axis=1, dtype=np.float64)
    bad = np.abs(sums - 1.0) > ROW_SUM_TOL
    if bad.any():
        row = int(np.argmax(bad))
        raise BundleError(f"{what} row {row} sums to {sums[row]:.6f}, expected 1 ± {ROW_SUM_TOL}")


def _cross_file(layer_index: int) -> str:
    return f"cross_{layer_index}.f32"


def _write_f32(path: Path, arr: np.ndarray) -> None:
    path.write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_f32(path: Path, shape: tuple[int, ...], what: str) -> np.ndarray:
    if not path.is_file():
        raise BundleError(f"missing tensor file {path.name} for {what}")
    raw = path.read_bytes()
    expect = int(np.prod(shape)) * 4
    if len(raw) != expect:
        raise BundleError(
            f"{path.name}: {len(raw)} bytes on disk, manifest shape {shape} needs {expect}"
        )
    arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
    if not np.isfinite(arr).all():
        raise BundleError(f"{path.name} contains NaN/Inf")
    return arr.astype(np.float32)


def write_bundle(bundle: AttentionBundle, bundle_dir: str | Path) -> None:
    """Write a validated bundle; rejects invariant violations before touching disk."""
    bundle.validate()
    d = Path(bundle_dir)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "image_id": bundle.image_id,
        "image_width": bundle.image_width,
        "image_height": bundle.image_height,
        "self_width": bundle.self_width,
        "self_height": bundle.self_height,
        "self_file": SELF_FILE,
        "self_shape": list(bundle.self_map.shape),
        "cross_layers": [
            {
                "layer_index": cl.layer_index,
                "width": cl.width,
                "height": cl.height,
                "tokens": cl.tokens,
                "file": _cross_file(cl.layer_index),
                "shape": list(cl.data.shape),
            }
            for cl in bundle.cross_layers
        ],
        "token_manifest": {
            "prompt_text": bundle.token_manifest.prompt_text,
            "entries": [
                {"label": e.label, "kind": e.kind, "token_span": [e.start, e.end]}
                for e in bundle.token_manifest.entries
            ],
            "class_ids": bundle.token_manifest.class_ids,
        },
        "sample_index": bundle.sample_index,
        "timestep": bundle.timestep,
        "extraction_note": bundle.extraction_note,
    }
    (d / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    _write_f32(d / SELF_FILE, bundle.self_map)
    for cl in bundle.cross_layers:
        _write_f32(d / _cross_file(cl.layer_index), cl.data)


def read_bundle(bundle_dir: str | Path) -> AttentionBundle:
    """Load and validate a bundle directory; validation failures raise BundleError."""
    d = Path(bundle_dir)
    mpath = d / MANIFEST_NAME
    if not mpath.is_file():
        raise BundleError(f"no {MANIFEST_NAME} in {d}")
    try:
        m = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise BundleError(f"unparseable manifest in {d}: {e}") from e
    version = m.get("format_version")
    if version != FORMAT_VERSION:
        raise BundleError(f"unsupported format_version {version!r}")
    try:
        tm = m["token_manifest"]
        token_manifest = TokenManifest(
            prompt_text=tm["prompt_text"],
            entries=[
                TokenSpan(e["label"], e["kind"], int(e["token_span"][0]), int(e["token_span"][1]))
                for e in tm["entries"]
            ],
            class_ids={k: int(v) for k, v in tm.get("class_ids", {}).items()},
        )
        self_shape = tuple(int(x) for x in m["self_shape"])
        cross_layers = []
        for lm in m["cross_layers"]:
            shape = tuple(int(x) for x in lm["shape"])
            cross_layers.append(
                CrossLayer(
                    layer_index=int(lm["layer_index"]),
                    width=int(lm["width"]),
                    height=int(lm["height"]),
                    tokens=int(lm["tokens"]),
                    data=_read_f32(d / lm["file"], shape, f"cross layer {lm['layer_index']}"),
                )
            )
        bundle = AttentionBundle(
            image_id=m["image_id"],
            image_width=int(m["image_width"]),
            image_height=int(m["image_height"]),
            cross_layers=cross_layers,
            self_map=_read_f32(d / m.get("self_file", SELF_FILE), self_shape, "self map"),
            self_width=int(m["self_width"]),
            self_height=int(m["self_height"]),
            token_manifest=token_manifest,
            sample_index=int(m["sample_index"]),
            timestep=int(m["timestep"]),
            extraction_note=m.get("extraction_note", ""),
        )
    except (KeyError, IndexError, TypeError, ValueError) as e:
        if isinstance(e, BundleError):
            raise
        raise BundleError(f"malformed manifest in {d}: {e}") from e
    bundle.validate()
    return bundle


@dataclass
class LabelMask:
    """Per-pixel class ids (0 = background) with an uncertainty flag channel."""

    labels: np.ndarray  # (H, W) uint8
    uncertain: np.ndarray  # (H, W) bool

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    def validate(self, class_ids: set[int] | None = None) -> None:
        if self.labels.shape != self.uncertain.shape:
            raise BundleError("labels and uncertainty shapes differ")
        if class_ids is not None:
            present = set(np.unique(self.labels).tolist())
            stray = present - set(class_ids) - {0}
            if stray:
                raise BundleError(f"mask contains undeclared class ids {sorted(stray)}")


def _uncertain_path(path: Path) -> Path:
    return path.with_name(path.stem + ".uncertain.png")


def write_mask(mask: LabelMask, path: str | Path) -> None:
    """Write labels as 8-bit PNG plus the 0/255 uncertainty sibling."""
    p = Path(path)
    labels = np.asarray(mask.labels)
    if labels.min() < 0 or labels.max() > 255:
        raise BundleError(f"class ids out of uint8 range: [{labels.min()}, {labels.max()}]")
    p.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(labels.astype(np.uint8), mode="L").save(p, format="PNG")
    flags = (np.asarray(mask.uncertain, dtype=np.uint8) * 255).astype(np.uint8)
    Image.fromarray(flags, mode="L").save(_uncertain_path(p), format="PNG")


def read_mask(path: str | Path) -> LabelMask:
    """Read an 8-bit mask PNG; the uncertainty sibling is optional (GT masks lack it)."""
    p = Path(path)
    with Image.open(p) as im:
        # Palette PNGs (VOC ground truth) carry the class id as the palette index.
        if im.mode not in ("L", "P"):
            raise BundleError(f"{p.name}: mode {im.mode!r} is not an 8-bit single-channel PNG")
        labels = np.asarray(im, dtype=np.uint8)
    up = _uncertain_path(p)
    if up.is_file():
        with Image.open(up) as im:
            if im.mode != "L":
                raise BundleError(f"{up.name}: uncertainty sibling must be 8-bit grayscale")
            uncertain = np.asarray(im) > 127
        if uncertain.shape != labels.shape:
            raise BundleError(f"{up.name}: uncertainty dims differ from mask")
    else:
        uncertain = np.zeros(labels.shape, dtype=bool)
    return LabelMask(labels=labels, uncertain=uncertain)
