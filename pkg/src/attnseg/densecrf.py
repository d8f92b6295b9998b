"""Fully-connected CRF mean-field refinement of a correlation map against the
RGB image.

The unary energy is -log of the per-pixel channel distribution derived from
the map; pairwise terms use a Gaussian smoothness kernel and a bilateral
appearance kernel with Potts compatibility (mu(a, b) = 1 when a != b). Message
passing is exact, every pixel talking to every other pixel, chunked to bound
memory. Images above the pixel cap are refined at reduced resolution and the
distributions upsampled back (the exact path is the reference below the cap).

Mean field does not guarantee energy descent, so no monotonicity is promised;
per-pixel distributions stay normalized after every iteration and the update
deltas are reported for convergence checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .configfile import read_kv
from .fusion import IMAGE, CorrelationMap, label_mask_from_scores
from .resample import resize_bilinear
from .tensor_store import LabelMask

_CHUNK_ENTRIES = 4_000_000  # pairwise rows per block, keeps peak memory ~100 MB


@dataclass
class CrfParams:
    iterations: int = 10
    w_appearance: float = 4.0
    sxy_appearance: float = 67.0
    srgb: float = 3.0
    w_smoothness: float = 3.0
    sxy_smoothness: float = 1.0
    unary_epsilon: float = 1e-8
    pixel_cap: int = 160 * 160

    def validate(self) -> None:
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.sxy_appearance <= 0 or self.srgb <= 0 or self.sxy_smoothness <= 0:
            raise ValueError("kernel sigmas must be > 0")
        if self.w_appearance < 0 or self.w_smoothness < 0:
            raise ValueError("kernel weights must be >= 0")
        if not 0.0 < self.unary_epsilon < 1.0:
            raise ValueError("unary_epsilon must be in (0, 1)")
        if self.pixel_cap < 1:
            raise ValueError("pixel_cap must be >= 1")

    @classmethod
    def from_mapping(cls, kv: dict[str, str]) -> "CrfParams":
        params = cls()
        for name in (
            "iterations",
            "w_appearance",
            "sxy_appearance",
            "srgb",
            "w_smoothness",
            "sxy_smoothness",
            "unary_epsilon",
            "pixel_cap",
        ):
            key = f"crf.{name}"
            if key in kv:
                cast = int if name in ("iterations", "pixel_cap") else float
                setattr(params, name, cast(kv[key]))
        params.validate()
        return params

    @classmethod
    def from_file(cls, path: str | Path) -> "CrfParams":
        return cls.from_mapping(read_kv(path))

    def as_kv(self) -> dict[str, str]:
        return {
            "crf.iterations": str(self.iterations),
            "crf.w_appearance": repr(self.w_appearance),
            "crf.sxy_appearance": repr(self.sxy_appearance),
            "crf.srgb": repr(self.srgb),
            "crf.w_smoothness": repr(self.w_smoothness),
            "crf.sxy_smoothness": repr(self.sxy_smoothness),
            "crf.unary_epsilon": repr(self.unary_epsilon),
            "crf.pixel_cap": str(self.pixel_cap),
        }


def initial_distribution(data: np.ndarray, unary_epsilon: float) -> np.ndarray:
    """Per-pixel channel distribution Q0 from nonnegative scores (C, N)."""
    q = data.astype(np.float64)
    sums = q.sum(axis=0)
    if (sums <= 0.0).any():
        raise ValueError("all-zero channel sums at some pixel")
    q = q / sums
    q = np.clip(q, unary_epsilon, None)
    return q / q.sum(axis=0)


def _kernel_messages(
    q: np.ndarray, pos: np.ndarray, rgb: np.ndarray, params: CrfParams
) -> np.ndarray:
    """Potts-weighted pairwise messages, self-interaction excluded; (C, N)."""
    n = pos.shape[0]
    qt = np.ascontiguousarray(q.T)  # (N, C)
    combined = np.empty_like(qt)
    inv_s = 1.0 / (2.0 * params.sxy_smoothness**2)
    inv_a = 1.0 / (2.0 * params.sxy_appearance**2)
    inv_c = 1.0 / (2.0 * params.srgb**2)
    chunk = max(1, _CHUNK_ENTRIES // n)
    for start in range(0, n, chunk):
        rows = slice(start, min(start + chunk, n))
        d2 = ((pos[rows, None, :] - pos[None, :, :]) ** 2).sum(axis=2)
        c2 = ((rgb[rows, None, :] - rgb[None, :, :]) ** 2).sum(axis=2)
        k = params.w_smoothness * np.exp(-d2 * inv_s)
        k += params.w_appearance * np.exp(-d2 * inv_a - c2 * inv_c)
        combined[rows] = k @ qt
    # k(i, i) = 1 for both kernels: remove the self term.
    combined -= (params.w_smoothness + params.w_appearance) * qt
    return combined.T


def mean_field(
    q0: np.ndarray,
    pos: np.ndarray,
    rgb: np.ndarray,
    params: CrfParams,
    on_iteration=None,
) -> tuple[np.ndarray, list[float]]:
    """Run mean-field updates from Q0 (C, N); returns (Q, max-delta per iteration).

    ``on_iteration(q)`` is called with the distribution after every update,
    which is how the per-iteration normalization checks hook in.
    """
    unary = -np.log(q0)
    q = q0.copy()
    deltas: list[float] = []
    for _ in range(params.iterations):
        messages = _kernel_messages(q, pos, rgb, params)
        # Potts compatibility: label l is penalized by every other label's mass.
        penalty = messages.sum(axis=0, keepdims=True) - messages
        logits = -unary - penalty
        logits -= logits.max(axis=0, keepdims=True)
        qn = np.exp(logits)
        qn /= qn.sum(axis=0)
        deltas.append(float(np.abs(qn - q).max()))
        q = qn
        if on_iteration is not None:
            on_iteration(q)
    return q, deltas


def _features(height: int, width: int, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:height, 0:width]
    pos = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    rgb = image.reshape(height * width, 3).astype(np.float64)
    return pos, rgb


def refine(image: np.ndarray, sc: CorrelationMap, params: CrfParams | None = None) -> CorrelationMap:
    """Refine an image-stage correlation map; returns the refined distributions.

    With both pairwise weights zero this is the identity on Q0. Images larger
    than ``params.pixel_cap`` pixels are refined at reduced resolution and the
    result upsampled back.
    """
    params = params or CrfParams()
    params.validate()
    if sc.resolution_stage != IMAGE:
        raise ValueError("refine expects an image-stage correlation map")
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an RGB (H, W, 3) image, got {image.shape}")
    h, w = image.shape[:2]
    if (sc.height, sc.width) != (h, w):
        raise ValueError(f"map {sc.height}x{sc.width} does not match image {h}x{w}")
    if (sc.data < 0).any():
        raise ValueError("correlation map has negative entries")

    if h * w > params.pixel_cap:
        scale = (params.pixel_cap / (h * w)) ** 0.5
        rh = max(1, int(h * scale))
        rw = max(1, int(w * scale))
        small_img = resize_bilinear(image.astype(np.float64), rh, rw)
        small_data = np.stack([resize_bilinear(c, rh, rw) for c in sc.data])
        small = CorrelationMap(list(sc.channels), small_data.astype(np.float32), IMAGE)
        refined = refine(small_img, small, params)  # rh*rw <= pixel_cap, no recursion
        up = np.stack([resize_bilinear(c, h, w) for c in refined.data])
        up = np.clip(up, 0.0, None)
        up /= up.sum(axis=0, keepdims=True)
        return CorrelationMap(list(sc.channels), up.astype(np.float32), IMAGE)

    q0 = initial_distribution(sc.data.reshape(sc.data.shape[0], -1), params.unary_epsilon)
    pos, rgb = _features(h, w, image)
    q, _ = mean_field(q0, pos, rgb, params)
    return CorrelationMap(
        channels=list(sc.channels),
        data=q.reshape(sc.data.shape).astype(np.float32),
        resolution_stage=IMAGE,
    )


def argmax_mask(refined: CorrelationMap, band: float = 0.05) -> LabelMask:
    """Label argmax of a refined map, same tie and uncertainty rules as fusion."""
    return label_mask_from_scores(refined, band)
