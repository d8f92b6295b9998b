"""Personalized instance assignment: cluster the self-affinity map into
segments, pool per-instance attention over segments, assign instances to
segments greedily or with an optimal one-to-one matching.

Clustering is plain normalized spectral clustering: symmetrize the affinity,
take the k smallest eigenvectors of I - D^{-1/2} A D^{-1/2}, row-normalize
the embedding, k-means. Everything is seeded and reproducible bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import linear_sum_assignment


@dataclass
class SegmentPartition:
    """Segment index per grid cell plus the foreground restriction."""

    segment_ids: np.ndarray  # (H, W) int32 in [0, n_segments)
    n_segments: int
    foreground_mask: np.ndarray  # (H, W) bool

    def validate(self) -> None:
        if self.segment_ids.shape != self.foreground_mask.shape:
            raise ValueError("segment grid and foreground mask shapes differ")
        if self.segment_ids.min() < 0 or self.segment_ids.max() >= self.n_segments:
            raise ValueError("segment ids outside [0, n_segments)")

    def with_foreground(self, foreground: np.ndarray) -> "SegmentPartition":
        if foreground.shape != self.segment_ids.shape:
            raise ValueError("foreground mask shape differs from segment grid")
        return replace(self, foreground_mask=foreground.astype(bool))


@dataclass(frozen=True)
class InstanceChoice:
    label: str
    segments: tuple[int, ...]
    score: float


@dataclass
class AssignmentResult:
    entries: list[InstanceChoice]
    mode: str  # greedy | hungarian

    def validate(self) -> None:
        if self.mode == "hungarian":
            chosen = [s for e in self.entries for s in e.segments]
            if len(chosen) != len(set(chosen)):
                raise ValueError("hungarian assignment reused a segment")


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]), dtype=np.float64)
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centers[i] = x[rng.integers(n)]
        else:
            centers[i] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((x - centers[i]) ** 2).sum(axis=1))
    return centers


def _kmeans(
    x: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 100, restarts: int = 8
) -> np.ndarray:
    """Seeded k-means++ with Lloyd iterations; best inertia over restarts wins."""
    best_labels: np.ndarray | None = None
    best_inertia = np.inf
    for _ in range(restarts):
        centers = _kmeans_pp_init(x, k, rng)
        labels = np.zeros(x.shape[0], dtype=np.int64)
        for _ in range(max_iter):
            d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            new_labels = d2.argmin(axis=1)
            for c in range(k):
                members = new_labels == c
                if members.any():
                    centers[c] = x[members].mean(axis=0)
                else:
                    # Re-seed an empty cluster on the farthest point.
                    centers[c] = x[d2.min(axis=1).argmax()]
            if (new_labels == labels).all():
                labels = new_labels
                break
            labels = new_labels
        inertia = float(((x - centers[labels]) ** 2).sum())
        if inertia < best_inertia:
            best_inertia = inertia
            best_labels = labels
    assert best_labels is not None
    return best_labels


def spectral_cluster(
    self_map: np.ndarray, width: int, height: int, k: int, seed: int
) -> SegmentPartition:
    """Partition the WH x WH affinity into k segments over the (H, W) grid.

    Zero-degree cells become singleton segments appended after the k spectral
    ones and are excluded from the eigensolve.
    """
    n = width * height
    if self_map.shape != (n, n):
        raise ValueError(f"self map shape {self_map.shape} != ({n}, {n})")
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    a = (self_map.astype(np.float64) + self_map.astype(np.float64).T) / 2.0
    deg = a.sum(axis=1)
    isolated = deg <= 0.0
    active = ~isolated
    n_active = int(active.sum())
    if k > n_active:
        raise ValueError(f"k={k} exceeds {n_active} connected cells")
    labels = np.full(n, -1, dtype=np.int64)
    sub = a[np.ix_(active, active)]
    dinv = 1.0 / np.sqrt(sub.sum(axis=1))
    lap = np.eye(n_active) - dinv[:, None] * sub * dinv[None, :]
    lap = (lap + lap.T) / 2.0
    _, vecs = np.linalg.eigh(lap)
    embedding = vecs[:, :k]
    norms = np.linalg.norm(embedding, axis=1, keepdims=True)
    embedding = embedding / np.where(norms == 0.0, 1.0, norms)
    rng = np.random.default_rng(seed)
    labels[active] = _kmeans(embedding, k, rng)
    next_id = k
    for idx in np.flatnonzero(isolated):
        labels[idx] = next_id
        next_id += 1
    part = SegmentPartition(
        segment_ids=labels.reshape(height, width).astype(np.int32),
        n_segments=next_id,
        foreground_mask=np.ones((height, width), dtype=bool),
    )
    part.validate()
    return part


def eigengap_k(self_map: np.ndarray, max_k: int = 10) -> int:
    """Segment count from the largest gap among the first eigenvalues of the
    normalized Laplacian (k >= 2)."""
    a = (self_map.astype(np.float64) + self_map.astype(np.float64).T) / 2.0
    deg = a.sum(axis=1)
    if (deg <= 0.0).any():
        a = a[np.ix_(deg > 0, deg > 0)]
        deg = a.sum(axis=1)
    dinv = 1.0 / np.sqrt(deg)
    lap = np.eye(a.shape[0]) - dinv[:, None] * a * dinv[None, :]
    vals = np.linalg.eigvalsh((lap + lap.T) / 2.0)
    upto = min(max_k, len(vals) - 1)
    gaps = np.diff(vals[: upto + 1])
    return max(2, int(np.argmax(gaps)) + 1)


def foreground_region(sc_class: np.ndarray, sc_bg: np.ndarray) -> np.ndarray:
    """Cells where the category attribution beats the background estimate."""
    if sc_class.shape != sc_bg.shape:
        raise ValueError("class and background grids differ in shape")
    return sc_class > sc_bg


def segment_scores(partition: SegmentPartition, instance_maps: list[np.ndarray]) -> np.ndarray:
    """Cost matrix entry (i, s): mean of instance i's map over the foreground
    cells of segment s; segments with no foreground cells score 0."""
    if partition.n_segments < 1:
        raise ValueError("empty partition")
    if not instance_maps:
        raise ValueError("no instance maps")
    ids = partition.segment_ids
    fg = partition.foreground_mask
    scores = np.zeros((len(instance_maps), partition.n_segments), dtype=np.float64)
    for s in range(partition.n_segments):
        cells = (ids == s) & fg
        if not cells.any():
            continue
        for i, m in enumerate(instance_maps):
            if m.shape != ids.shape:
                raise ValueError(f"instance map {i} shape {m.shape} != grid {ids.shape}")
            scores[i, s] = float(m[cells].mean())
    return scores


def _labels_or_default(scores: np.ndarray, labels: list[str] | None) -> list[str]:
    if labels is None:
        return [f"instance_{i}" for i in range(scores.shape[0])]
    if len(labels) != scores.shape[0]:
        raise ValueError("label count differs from score rows")
    return list(labels)


def assign_greedy(scores: np.ndarray, labels: list[str] | None = None) -> AssignmentResult:
    """Each instance independently takes its best segment (collisions allowed);
    ties go to the lower segment id."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.size == 0:
        raise ValueError("scores must be a non-empty 2-D matrix")
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    names = _labels_or_default(scores, labels)
    entries = []
    for i, name in enumerate(names):
        s = int(np.argmax(scores[i]))
        entries.append(InstanceChoice(label=name, segments=(s,), score=float(scores[i, s])))
    return AssignmentResult(entries=entries, mode="greedy")


def assign_hungarian(scores: np.ndarray, labels: list[str] | None = None) -> AssignmentResult:
    """Maximum-total-score one-to-one assignment.

    Solved on cost = (max score - score); a rectangular matrix (fewer
    instances than segments) is padded square with cost = max real cost + 1,
    which never changes the optimum restricted to real instances.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.size == 0:
        raise ValueError("scores must be a non-empty 2-D matrix")
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    n_inst, n_seg = scores.shape
    if n_inst > n_seg:
        raise ValueError(f"{n_inst} instances cannot map one-to-one onto {n_seg} segments")
    cost = scores.max() - scores
    if n_inst < n_seg:
        pad = np.full((n_seg - n_inst, n_seg), cost.max() + 1.0)
        cost = np.vstack([cost, pad])
    rows, cols = linear_sum_assignment(cost)
    names = _labels_or_default(scores, labels)
    entries = []
    for r, c in zip(rows, cols):
        if r >= n_inst:
            continue
        entries.append(
            InstanceChoice(label=names[r], segments=(int(c),), score=float(scores[r, c]))
        )
    result = AssignmentResult(entries=entries, mode="hungarian")
    result.validate()
    return result


def dominant_segment(partition: SegmentPartition, region_mask: np.ndarray) -> int:
    """Most frequent segment id inside a region (foreground-restricted when
    possible); ties break toward the lower id. Used to derive ground-truth
    instance -> segment mappings from region masks."""
    if region_mask.shape != partition.segment_ids.shape:
        raise ValueError("region mask shape differs from segment grid")
    cells = region_mask & partition.foreground_mask
    if not cells.any():
        cells = region_mask.astype(bool)
    if not cells.any():
        raise ValueError("empty region mask")
    counts = np.bincount(partition.segment_ids[cells].ravel(), minlength=partition.n_segments)
    return int(np.argmax(counts))
