"""Deterministic synthetic attention bundles with known ground truth.

Fixtures stand in for a real diffusion model at desk scale: cross layers put
a mass budget ``alpha`` on a class's token span inside its rectangle and
uniform noise elsewhere, and the self map is a row-normalized affinity that
is ``beta`` within an affinity group (each rectangle, plus the background as
one group) and ``1 - beta`` across groups, with optional symmetric jitter.
All rows renormalize to 1, so every generated bundle satisfies the bundle
format invariants by construction. Generation is a pure function of
(spec, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .configfile import read_kv
from .prompt_plan import PromptPlan, compose_query
from .tensor_store import AttentionBundle, CrossLayer, LabelMask, TokenManifest, TokenSpan

DEFAULT_LAYER_IDS = (4, 5, 6, 7, 8)


@dataclass(frozen=True)
class RegionSpec:
    """Axis-aligned rectangle [x0, x1) x [y0, y1) in self-grid cells."""

    label: str
    class_id: int
    x0: int
    y0: int
    x1: int
    y1: int
    alpha: float = 1.0  # token mass concentrated on this region's span


@dataclass
class SceneSpec:
    name: str = "scene"
    grid_width: int = 16
    grid_height: int = 16
    image_width: int | None = None  # defaults to the grid dims
    image_height: int | None = None
    regions: list[RegionSpec] = field(default_factory=list)
    layer_grids: list[tuple[int, int, int]] | None = None  # (layer_index, width, height)
    span_width: int = 1
    prefix_tokens: int = 3
    background_prompt_tokens: int = 0
    beta: float = 1.0  # within-group affinity; 1.0 means block-diagonal
    jitter: float = 0.0  # uniform noise amplitude on cross rows and the self map
    timestep: int = 150

    def resolved_image_dims(self) -> tuple[int, int]:
        return (
            self.image_width or self.grid_width,
            self.image_height or self.grid_height,
        )

    def resolved_layers(self) -> list[tuple[int, int, int]]:
        if self.layer_grids:
            return list(self.layer_grids)
        return [(i, self.grid_width, self.grid_height) for i in DEFAULT_LAYER_IDS]

    def validate(self) -> None:
        if self.grid_width < 1 or self.grid_height < 1:
            raise ValueError("grid dims must be positive")
        if not self.regions:
            raise ValueError("scene needs at least one region")
        if not 0.0 < self.beta <= 1.0:
            raise ValueError(f"beta must be in (0, 1], got {self.beta}")
        if self.jitter < 0.0:
            raise ValueError("jitter must be >= 0")
        if self.span_width < 1 or self.prefix_tokens < 1:
            raise ValueError("span_width and prefix_tokens must be >= 1")
        labels = [r.label for r in self.regions]
        if len(set(labels)) != len(labels):
            raise ValueError("region labels must be unique")
        for r in self.regions:
            if not (0 <= r.x0 < r.x1 <= self.grid_width and 0 <= r.y0 < r.y1 <= self.grid_height):
                raise ValueError(f"region {r.label!r} rectangle outside grid or empty")
            if not 0.0 < r.alpha <= 1.0:
                raise ValueError(f"region {r.label!r} alpha must be in (0, 1]")
            if r.class_id < 1:
                raise ValueError(f"region {r.label!r} class id must be >= 1")
        self._group_map()  # raises on overlap

    def _group_map(self) -> np.ndarray:
        """Region index per grid cell, -1 for background; rejects overlaps."""
        groups = np.full((self.grid_height, self.grid_width), -1, dtype=np.int32)
        for idx, r in enumerate(self.regions):
            patch = groups[r.y0 : r.y1, r.x0 : r.x1]
            if (patch != -1).any():
                raise ValueError(f"region {r.label!r} overlaps another region")
            patch[:] = idx
        return groups


@dataclass
class Fixture:
    bundle: AttentionBundle
    gt_mask: LabelMask
    plan: PromptPlan


def _scale_rect(r: RegionSpec, gw: int, gh: int, w: int, h: int) -> tuple[int, int, int, int]:
    return (r.x0 * w // gw, r.y0 * h // gh, max(r.x1 * w // gw, r.x0 * w // gw + 1),
            max(r.y1 * h // gh, r.y0 * h // gh + 1))


def _group_map_at(spec: SceneSpec, w: int, h: int) -> np.ndarray:
    groups = np.full((h, w), -1, dtype=np.int32)
    for idx, r in enumerate(spec.regions):
        x0, y0, x1, y1 = _scale_rect(r, spec.grid_width, spec.grid_height, w, h)
        groups[y0:y1, x0:x1] = idx
    return groups


def _normalize_rows(mat: np.ndarray) -> np.ndarray:
    sums = mat.sum(axis=1, keepdims=True)
    if (sums <= 0.0).any():
        raise ValueError("zero-sum row while normalizing fixture matrix")
    return mat / sums


def _cross_matrix(
    rng: np.random.Generator,
    groups: np.ndarray,
    token_count: int,
    span_cols: dict[int, np.ndarray],
    other_cols: np.ndarray,
    alphas: dict[int, float],
    jitter: float,
    extra_mass: dict[int, dict[int, float]] | None = None,
) -> np.ndarray:
    """Rows over tokens per cell: span mass inside each region, rest uniform.

    ``extra_mass`` optionally adds mass to arbitrary columns per region index,
    used for identifier bundles. Rows come back normalized, float32.
    """
    h, w = groups.shape
    n = h * w
    flat = groups.reshape(n)
    mat = np.zeros((n, token_count), dtype=np.float64)
    for gi in np.unique(flat):
        cells = flat == gi
        budget = 1.0
        if gi >= 0:
            cols = span_cols[int(gi)]
            mat[np.ix_(cells, cols)] = alphas[int(gi)] / len(cols)
            budget -= alphas[int(gi)]
        if extra_mass:
            for col, mass in extra_mass.get(int(gi), {}).items():
                mat[cells, col] += mass
                budget -= mass
        if budget < -1e-9:
            raise ValueError("token mass budget exceeds 1")
        mat[np.ix_(cells, other_cols)] += max(budget, 0.0) / len(other_cols)
    if jitter > 0.0:
        mat += rng.uniform(0.0, jitter, size=mat.shape)
    return _normalize_rows(mat).astype(np.float32)


def _self_map(rng: np.random.Generator, groups: np.ndarray, beta: float, jitter: float) -> np.ndarray:
    flat = groups.reshape(-1)
    same = flat[:, None] == flat[None, :]
    base = np.where(same, beta, 1.0 - beta)
    if jitter > 0.0:
        j = rng.uniform(0.0, jitter, size=base.shape)
        base = base + (j + j.T) / 2.0
    return _normalize_rows(base).astype(np.float32)


def _gt_mask(spec: SceneSpec) -> LabelMask:
    iw, ih = spec.resolved_image_dims()
    labels = np.zeros((ih, iw), dtype=np.uint8)
    for r in spec.regions:
        x0, y0, x1, y1 = _scale_rect(r, spec.grid_width, spec.grid_height, iw, ih)
        labels[y0:y1, x0:x1] = r.class_id
    return LabelMask(labels=labels, uncertain=np.zeros((ih, iw), dtype=bool))


def _token_layout(
    labels: list[str],
    span_width: int,
    prefix_tokens: int,
    background_tokens: int,
    identifier: str | None = None,
) -> tuple[list[TokenSpan], dict[str, np.ndarray], np.ndarray, int, int | None]:
    """Manifest entries plus span columns; returns (entries, span columns by
    label, 'other' columns, token count, identifier column)."""
    entries: list[TokenSpan] = [TokenSpan("context", "other", 0, prefix_tokens - 1)]
    cursor = prefix_tokens
    ident_col: int | None = None
    if identifier is not None:
        entries.append(TokenSpan(identifier, "identifier", cursor, cursor))
        ident_col = cursor
        cursor += 1
    span_cols: dict[str, np.ndarray] = {}
    for label in labels:
        entries.append(TokenSpan(label, "category", cursor, cursor + span_width - 1))
        span_cols[label] = np.arange(cursor, cursor + span_width)
        cursor += span_width
    for i in range(background_tokens):
        entries.append(TokenSpan(f"bg{i}", "background", cursor, cursor))
        cursor += 1
    entries.append(TokenSpan("period", "other", cursor, cursor))
    token_count = cursor + 1
    other_cols = np.array(
        sorted(
            set(range(token_count))
            - {c for cols in span_cols.values() for c in cols.tolist()}
            - ({ident_col} if ident_col is not None else set())
        )
    )
    return entries, span_cols, other_cols, token_count, ident_col


def make_fixture(spec: SceneSpec, seed: int, sample_index: int = 0) -> Fixture:
    """Generate one bundle + ground-truth mask + matching prompt plan.

    ``sample_index`` > 0 draws an independent noise stream for multi-sample
    ensembles; siblings share everything but the jitter.
    """
    spec.validate()
    rng = np.random.default_rng(seed if sample_index == 0 else [seed, sample_index])
    entries, span_cols, other_cols, token_count, _ = _token_layout(
        sorted(r.label for r in spec.regions),
        spec.span_width,
        spec.prefix_tokens,
        spec.background_prompt_tokens,
    )
    bg_labels = [e.label for e in entries if e.kind == "background"]
    plan = compose_query([r.label for r in spec.regions], backgrounds=bg_labels)
    manifest = TokenManifest(
        prompt_text=plan.sentence,
        entries=entries,
        class_ids={r.label: r.class_id for r in spec.regions},
    )
    by_index_cols = {i: span_cols[r.label] for i, r in enumerate(spec.regions)}
    alphas = {i: r.alpha for i, r in enumerate(spec.regions)}
    self_groups = spec._group_map()
    self_map = _self_map(rng, self_groups, spec.beta, spec.jitter)
    layers = []
    for layer_index, w, h in spec.resolved_layers():
        groups = _group_map_at(spec, w, h)
        data = _cross_matrix(rng, groups, token_count, by_index_cols, other_cols, alphas, spec.jitter)
        layers.append(CrossLayer(layer_index=layer_index, width=w, height=h,
                                 tokens=token_count, data=data))
    iw, ih = spec.resolved_image_dims()
    bundle = AttentionBundle(
        image_id=f"{spec.name}-s{seed}",
        image_width=iw,
        image_height=ih,
        cross_layers=layers,
        self_map=self_map,
        self_width=spec.grid_width,
        self_height=spec.grid_height,
        token_manifest=manifest,
        sample_index=sample_index,
        timestep=spec.timestep,
        extraction_note="synthetic fixture",
    )
    bundle.validate()
    return Fixture(bundle=bundle, gt_mask=_gt_mask(spec), plan=plan)


@dataclass(frozen=True)
class InstanceSpec:
    """One personalized instance: identifier word + its mass share per region.

    ``gt_region`` is where the instance actually sits; collision fixtures give
    an instance more attention mass on another instance's region than on its
    own, so the truth cannot be inferred from the weights. Defaults to the
    highest-weight region.
    """

    label: str
    weights: dict[str, float]  # region label -> fraction of the identifier budget
    gt_region: str | None = None


@dataclass
class InstanceFixture:
    scene: Fixture
    instances: list[Fixture]
    instance_labels: list[str]
    gt_regions: dict[str, str]  # instance label -> intended region label
    region_masks: dict[str, np.ndarray]  # region label -> bool grid (H, W)


def make_instance_fixture(
    scene_spec: SceneSpec,
    category: str,
    instances: list[InstanceSpec],
    seed: int,
    identifier_alpha: float = 0.6,
    category_alpha: float = 0.3,
) -> InstanceFixture:
    """Scene bundle (one category over all instance rectangles) plus one
    identifier bundle per instance whose token mass follows its region weights."""
    scene_spec.validate()
    if not instances:
        raise ValueError("need at least one instance")
    region_labels = {r.label for r in scene_spec.regions}
    for inst in instances:
        stray = set(inst.weights) - region_labels
        if stray:
            raise ValueError(f"instance {inst.label!r} references unknown regions {sorted(stray)}")
        if not inst.weights or min(inst.weights.values()) < 0 or sum(inst.weights.values()) > 1 + 1e-9:
            raise ValueError(f"instance {inst.label!r} weights must be >= 0 and sum to <= 1")
        if inst.gt_region is not None and inst.gt_region not in region_labels:
            raise ValueError(f"instance {inst.label!r} gt_region {inst.gt_region!r} unknown")

    rng = np.random.default_rng(seed)
    self_groups = scene_spec._group_map()
    self_map = _self_map(rng, self_groups, scene_spec.beta, scene_spec.jitter)
    # Ground truth marks every rectangle as the one queried category.
    gt_spec = SceneSpec(
        grid_width=scene_spec.grid_width,
        grid_height=scene_spec.grid_height,
        image_width=scene_spec.image_width,
        image_height=scene_spec.image_height,
        regions=[RegionSpec(f"r{i}", 1, r.x0, r.y0, r.x1, r.y1) for i, r in enumerate(scene_spec.regions)],
    )

    def category_bundle(identifier: InstanceSpec | None, inst_index: int, tag: str) -> Fixture:
        entries, span_cols, other_cols, token_count, ident_col = _token_layout(
            [category],
            scene_spec.span_width,
            scene_spec.prefix_tokens,
            0,
            identifier.label if identifier else None,
        )
        # Every rectangle maps onto the single category span.
        cols = span_cols[category]
        by_index = {i: cols for i in range(len(scene_spec.regions))}
        alphas = {
            i: (category_alpha if identifier else r.alpha)
            for i, r in enumerate(scene_spec.regions)
        }
        extra: dict[int, dict[int, float]] | None = None
        identifiers = None
        class_ids = {category: 1}
        if identifier is not None:
            assert ident_col is not None
            extra = {}
            for ridx, r in enumerate(scene_spec.regions):
                share = identifier.weights.get(r.label, 0.0)
                if share > 0.0:
                    extra[ridx] = {ident_col: identifier_alpha * share}
            identifiers = {category: identifier.label}
            class_ids[identifier.label] = 100 + inst_index
        plan = compose_query([category], identifiers=identifiers)
        manifest = TokenManifest(prompt_text=plan.sentence, entries=entries, class_ids=class_ids)
        layers = []
        for layer_index, w, h in scene_spec.resolved_layers():
            groups = _group_map_at(scene_spec, w, h)
            data = _cross_matrix(rng, groups, token_count, by_index, other_cols,
                                 alphas, scene_spec.jitter, extra_mass=extra)
            layers.append(CrossLayer(layer_index=layer_index, width=w, height=h,
                                     tokens=token_count, data=data))
        iw, ih = scene_spec.resolved_image_dims()
        bundle = AttentionBundle(
            image_id=f"{scene_spec.name}-{tag}-s{seed}",
            image_width=iw,
            image_height=ih,
            cross_layers=layers,
            self_map=self_map,
            self_width=scene_spec.grid_width,
            self_height=scene_spec.grid_height,
            token_manifest=manifest,
            sample_index=0,
            timestep=scene_spec.timestep,
            extraction_note="synthetic instance fixture",
        )
        bundle.validate()
        return Fixture(bundle=bundle, gt_mask=_gt_mask(gt_spec), plan=plan)

    scene = category_bundle(None, -1, "scene")
    inst_fixtures = [
        category_bundle(inst, idx, f"inst{idx}") for idx, inst in enumerate(instances)
    ]
    gt_regions = {
        inst.label: inst.gt_region or max(sorted(inst.weights), key=lambda k: inst.weights[k])
        for inst in instances
    }
    region_masks = {
        r.label: (self_groups == i) for i, r in enumerate(scene_spec.regions)
    }
    return InstanceFixture(
        scene=scene,
        instances=inst_fixtures,
        instance_labels=[inst.label for inst in instances],
        gt_regions=gt_regions,
        region_masks=region_masks,
    )


def _parse_dims(value: str) -> tuple[int, int]:
    w, _, h = value.lower().partition("x")
    return int(w), int(h)


def parse_scene_spec(kv: dict[str, str]) -> SceneSpec:
    """Build a SceneSpec from `key = value` config entries.

    Regions use ``region.<label> = class_id : x0,y0,x1,y1 [: alpha]``.
    """
    spec = SceneSpec()
    if "name" in kv:
        spec.name = kv["name"]
    if "grid" in kv:
        spec.grid_width, spec.grid_height = _parse_dims(kv["grid"])
    if "image" in kv:
        spec.image_width, spec.image_height = _parse_dims(kv["image"])
    if "layers" in kv:
        grids = []
        for item in kv["layers"].replace(",", " ").split():
            idx, _, dims = item.partition(":")
            w, h = _parse_dims(dims)
            grids.append((int(idx), w, h))
        spec.layer_grids = grids
    for key, attr in (
        ("span_width", "span_width"),
        ("prefix_tokens", "prefix_tokens"),
        ("bg_prompt_tokens", "background_prompt_tokens"),
        ("timestep", "timestep"),
    ):
        if key in kv:
            setattr(spec, attr, int(kv[key]))
    for key, attr in (("beta", "beta"), ("jitter", "jitter")):
        if key in kv:
            setattr(spec, attr, float(kv[key]))
    default_alpha = float(kv.get("alpha", 1.0))
    for key, value in kv.items():
        if not key.startswith("region."):
            continue
        label = key[len("region.") :]
        fields = [f.strip() for f in value.split(":")]
        if len(fields) not in (2, 3):
            raise ValueError(f"region {label!r}: expected 'class_id : x0,y0,x1,y1 [: alpha]'")
        class_id = int(fields[0])
        x0, y0, x1, y1 = (int(v) for v in fields[1].replace(",", " ").split())
        alpha = float(fields[2]) if len(fields) == 3 else default_alpha
        spec.regions.append(RegionSpec(label, class_id, x0, y0, x1, y1, alpha=alpha))
    spec.regions.sort(key=lambda r: r.label)
    spec.validate()
    return spec


def parse_instance_section(kv: dict[str, str]) -> tuple[str, list[InstanceSpec]] | None:
    """Instance keys: ``category = mug`` + ``instance.<word> = region[:share], ...``
    with an optional ``gt.<word> = region`` override for collision fixtures."""
    if "category" not in kv:
        return None
    instances = []
    for key, value in sorted(kv.items()):
        if not key.startswith("instance."):
            continue
        label = key[len("instance.") :]
        weights: dict[str, float] = {}
        for item in value.split(","):
            region, _, share = item.strip().partition(":")
            weights[region.strip()] = float(share) if share else 1.0
        total = sum(weights.values())
        if total > 1.0:
            weights = {k: v / total for k, v in weights.items()}
        instances.append(
            InstanceSpec(label=label, weights=weights, gt_region=kv.get(f"gt.{label}"))
        )
    if not instances:
        raise ValueError("category given but no instance.* entries")
    return kv["category"], instances


def load_scene_spec(path: str) -> tuple[SceneSpec, tuple[str, list[InstanceSpec]] | None]:
    kv = read_kv(path)
    return parse_scene_spec(kv), parse_instance_section(kv)
