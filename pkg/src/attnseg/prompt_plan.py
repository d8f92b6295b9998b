"""Query-sentence planning and manifest validation.

Builds the composed prompt from image-level labels (with optional synonym
surface texts, personalized identifier words, and trailing background
prompts) and states the label -> token-span layout an extractor manifest must
realize. Categories are joined "A", "A and B", "A, B, and C"; background
prompts are comma-appended before the final period.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .tensor_store import TokenManifest

DEFAULT_TEMPLATE = "a photo including {body}."


@dataclass(frozen=True)
class PromptPart:
    label: str
    kind: str  # category | identifier | background
    surface: str


@dataclass
class PromptPlan:
    """Ordered sentence layout: categories (each optionally preceded by an
    identifier word) followed by background prompts."""

    sentence_template: str = DEFAULT_TEMPLATE
    parts: list[PromptPart] = field(default_factory=list)
    synonym_table: dict[str, str] = field(default_factory=dict)
    background_prompts: list[str] = field(default_factory=list)

    @property
    def sentence(self) -> str:
        items: list[str] = []
        pending_identifier: str | None = None
        for part in self.parts:
            if part.kind == "identifier":
                pending_identifier = part.surface
            elif part.kind == "category":
                text = part.surface
                if pending_identifier is not None:
                    text = f"{pending_identifier} {text}"
                    pending_identifier = None
                items.append(text)
        if len(items) == 1:
            body = items[0]
        elif len(items) == 2:
            body = f"{items[0]} and {items[1]}"
        else:
            body = ", ".join(items[:-1]) + f", and {items[-1]}"
        backgrounds = [p.surface for p in self.parts if p.kind == "background"]
        if backgrounds:
            body += ", " + ", ".join(backgrounds)
        return self.sentence_template.format(body=body)

    def category_labels(self) -> list[str]:
        return [p.label for p in self.parts if p.kind == "category"]


def compose_query(
    classes: set[str] | list[str],
    synonyms: dict[str, str] | None = None,
    backgrounds: list[str] | None = None,
    identifiers: dict[str, str] | None = None,
) -> PromptPlan:
    """Compose the query sentence plan for a set of category labels.

    Ordering is the sorted label order, so equal inputs give identical plans.
    An unknown class simply keeps its raw name as surface text. ``identifiers``
    maps a class label to its personalized identifier word (e.g. "<new1>"),
    inserted directly before that class in the sentence.
    """
    labels = sorted(set(classes))
    if not labels:
        raise ValueError("compose_query needs at least one class label")
    synonyms = synonyms or {}
    identifiers = identifiers or {}
    parts: list[PromptPart] = []
    for label in labels:
        ident = identifiers.get(label)
        if ident:
            parts.append(PromptPart(label=ident, kind="identifier", surface=ident))
        parts.append(PromptPart(label=label, kind="category", surface=synonyms.get(label, label)))
    for bg in backgrounds or []:
        parts.append(PromptPart(label=bg, kind="background", surface=bg))
    return PromptPlan(
        sentence_template=DEFAULT_TEMPLATE,
        parts=parts,
        synonym_table=dict(synonyms),
        background_prompts=list(backgrounds or []),
    )


@dataclass(frozen=True)
class Mismatch:
    kind: str  # missing | extra | span_kind | prompt_text | overlap
    label: str
    detail: str

    def __str__(self) -> str:
        return f"{self.kind}: {self.label} ({self.detail})"


def validate_manifest(plan: PromptPlan, manifest: TokenManifest) -> list[Mismatch]:
    """Check an extractor manifest against the plan; empty list means it matches.

    Every plan category/identifier/background part must appear as a manifest
    span of the same kind; manifest spans of those kinds without a plan part
    are extras. Kind "other" spans (filler words) are ignored.
    """
    mismatches: list[Mismatch] = []
    want = {(p.label, p.kind) for p in plan.parts}
    have: set[tuple[str, str]] = set()
    for e in manifest.entries:
        if e.kind == "other":
            continue
        have.add((e.label, e.kind))
    for label, kind in sorted(want - have):
        mismatches.append(Mismatch("missing", label, f"no manifest span of kind {kind}"))
    for label, kind in sorted(have - want):
        mismatches.append(Mismatch("extra", label, f"manifest span of kind {kind} not planned"))
    if manifest.prompt_text != plan.sentence:
        mismatches.append(
            Mismatch("prompt_text", "<sentence>", f"{manifest.prompt_text!r} != {plan.sentence!r}")
        )
    cats = manifest.of_kind("category")
    for i, a in enumerate(cats):
        for b in cats[i + 1 :]:
            if a.start <= b.end and b.start <= a.end:
                mismatches.append(
                    Mismatch("overlap", a.label, f"category span overlaps {b.label!r}")
                )
    return mismatches


def plan_from_manifest(manifest: TokenManifest, synonyms: dict[str, str] | None = None) -> PromptPlan:
    """Reconstruct the plan a bundle's manifest should satisfy.

    Category/background labels come from the manifest spans (background labels
    double as their surface words). An identifier span requires exactly one
    category to attach to, matching the personalized single-class queries.
    """
    cats = [e.label for e in manifest.of_kind("category")]
    if not cats:
        raise ValueError("manifest has no category spans")
    idents = manifest.of_kind("identifier")
    identifiers = None
    if idents:
        if len(idents) != 1 or len(cats) != 1:
            raise ValueError(
                "cannot derive a plan for multiple identifiers or identifier with "
                "multiple categories; compose the plan explicitly"
            )
        identifiers = {cats[0]: idents[0].label}
    backgrounds = [e.label for e in manifest.of_kind("background")]
    return compose_query(cats, synonyms=synonyms, backgrounds=backgrounds, identifiers=identifiers)


def _data_lines(name: str, path: str | Path | None) -> list[str]:
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
    else:
        text = resources.files("attnseg").joinpath("data", name).read_text(encoding="utf-8")
    lines = []
    for raw in text.splitlines():
        line = raw.strip()
        if line and not line.startswith("#"):
            lines.append(line)
    return lines


def load_synonyms(path: str | Path | None = None) -> dict[str, str]:
    """Load a `class = surface text` table; defaults to the packaged file."""
    table: dict[str, str] = {}
    for line in _data_lines("synonyms.txt", path):
        if "=" not in line:
            raise ValueError(f"synonym line without '=': {line!r}")
        key, _, value = line.partition("=")
        table[key.strip()] = value.strip()
    return table


def load_backgrounds(path: str | Path | None = None) -> list[str]:
    """Load background prompts, one per line; defaults to the packaged file."""
    return _data_lines("backgrounds.txt", path)
