"""Map prompt-plan parts onto tokenizer index spans.

The plan's parts appear in the composed sentence in order, so each part's
fragment tokenization must occur as a contiguous subsequence of the full
prompt tokenization, at or after the end of the previous part. Any miss is a
hard failure carrying a token-level diff; silently shifted spans would poison
every downstream attribution.
"""

from __future__ import annotations

from attnseg.prompt_plan import PromptPlan
from attnseg.tensor_store import TokenSpan


class SpanMappingError(ValueError):
    """Tokenizer output does not realize the planned label layout."""


def _find(haystack: list[int], needle: list[int], start: int) -> int | None:
    if not needle:
        return None
    for i in range(start, len(haystack) - len(needle) + 1):
        if haystack[i : i + len(needle)] == needle:
            return i
    return None


def map_spans(plan: PromptPlan, tokenize_full, tokenize_fragment) -> list[TokenSpan]:
    """Token span per plan part, walking the prompt left to right."""
    sentence = plan.sentence
    prompt_ids = list(tokenize_full(sentence))
    cursor = 0
    spans: list[TokenSpan] = []
    for part in plan.parts:
        fragment_ids = list(tokenize_fragment(part.surface))
        pos = _find(prompt_ids, fragment_ids, cursor)
        if pos is None:
            raise SpanMappingError(
                f"cannot place {part.kind} {part.label!r}:\n"
                f"  surface   : {part.surface!r}\n"
                f"  fragment  : {fragment_ids}\n"
                f"  prompt    : {prompt_ids}\n"
                f"  searched from token {cursor} in {sentence!r}"
            )
        spans.append(TokenSpan(part.label, part.kind, pos, pos + len(fragment_ids) - 1))
        cursor = pos + len(fragment_ids)
    return spans
