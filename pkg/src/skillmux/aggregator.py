"""Aggregation of expert texts into one multiple-choice answer.

Also hosts the direct baseline, where a single backend sees the raw
assets with no router and no experts.
"""

from __future__ import annotations

import enum
import logging
import re
from collections.abc import Sequence
from dataclasses import dataclass

from .errors import GatewayError, StageError, UnsupportedModality
from .experts import ExpertBundle
from .gateway import BackendSpec, ChatRequest, Gateway
from .registry import (
    TaxonomyRegistry,
    default_registry,
    format_options,
    letter_index,
    option_letter,
    render_template,
)
from .router import Query

logger = logging.getLogger(__name__)


class ExtractionMethod(str, enum.Enum):
    LETTER = "letter-pattern"
    OPTION_TEXT = "option-text-match"
    FALLBACK = "fallback-first"


@dataclass(frozen=True)
class AggregationInput:
    bundle: ExpertBundle
    task_description: str
    question: str
    options: tuple[str, ...]
    task_context: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "options", tuple(self.options))
        if len(self.options) < 2:
            raise ValueError("multiple-choice aggregation needs at least two options")


@dataclass(frozen=True)
class FinalAnswer:
    choice_index: int
    choice_letter: str
    rationale: str
    raw_response: str
    extraction_method: ExtractionMethod
    truncated: bool = False
    latency_ms: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0

    @property
    def flagged(self) -> bool:
        return self.extraction_method is ExtractionMethod.FALLBACK

    def to_dict(self) -> dict:
        return {
            "choice_index": self.choice_index,
            "choice_letter": self.choice_letter,
            "extraction_method": self.extraction_method.value,
            "flagged": self.flagged,
            "truncated": self.truncated,
            "rationale": self.rationale,
            "raw_response": self.raw_response,
        }


# --- answer extraction -------------------------------------------------------

_L = r"([A-Za-z]{1,2})"
_LETTER_PATTERNS = [
    # (B), (b)
    re.compile(r"(?<![A-Za-z0-9])\(\s*" + _L + r"\s*\)"),
    # Answer: B / answer:b
    re.compile(r"(?i:\banswer)\s*[*_]*\s*:\s*[*_]*\s*\(?\s*" + _L + r"(?![A-Za-z0-9])"),
    # the answer is B (uppercase letter only; "answer is a" is prose)
    re.compile(r"(?i:\banswer\s+is)\s*[*_]*\s*\(?\s*([A-Z]{1,2})(?![A-Za-z0-9])"),
    # B. / B) (uppercase only; lowercase "a." is too often an article)
    re.compile(r"(?<![A-Za-z0-9(])([A-Z]{1,2})[.)](?![A-Za-z0-9])"),
]
_BARE_RE = re.compile(r"^\s*[*_]*\(?\s*" + _L + r"\s*\)?[.)]?[*_]*\s*$")


def _letter_match(raw: str, n_options: int) -> tuple[int, int] | None:
    """(start offset, option index) of the last valid letter form, if any."""
    bare = _BARE_RE.match(raw)
    if bare:
        idx = letter_index(bare.group(1))
        if idx < n_options:
            return bare.start(1), idx
    best: tuple[int, int] | None = None
    for pattern in _LETTER_PATTERNS:
        for m in pattern.finditer(raw):
            idx = letter_index(m.group(1))
            if idx >= n_options:
                continue
            if best is None or m.start(1) > best[0]:
                best = (m.start(1), idx)
    return best


def _option_text_match(raw: str, options: Sequence[str]) -> int | None:
    lowered = raw.lower()
    best: int | None = None
    for i, opt in enumerate(options):
        text = opt.strip().lower()
        if text and text in lowered and (best is None or len(text) > len(options[best].strip())):
            best = i
    return best


def _extract(raw: str, options: Sequence[str]) -> tuple[int, ExtractionMethod, str]:
    if len(options) < 2:
        raise ValueError("extract_choice needs at least two options")
    hit = _letter_match(raw, len(options))
    if hit is not None:
        start, idx = hit
        rationale = raw[:start].rstrip(" \t\n(*_:")
        return idx, ExtractionMethod.LETTER, rationale.strip()
    idx = _option_text_match(raw, options)
    if idx is not None:
        return idx, ExtractionMethod.OPTION_TEXT, raw.strip()
    return 0, ExtractionMethod.FALLBACK, raw.strip()


def extract_choice(raw: str, options: Sequence[str]) -> tuple[int, ExtractionMethod]:
    """Map a free-text reply onto an option index.

    Rules, first that fires wins: the last standalone option letter in one
    of the forms ``(B)``, ``B.``, ``B)``, ``Answer: B`` or a bare ``B``;
    else the longest option whose text occurs in the reply
    (case-insensitive); else index 0, flagged as a fallback.
    """
    idx, method, _ = _extract(raw, options)
    return idx, method


def answer_from_text(raw: str, options: Sequence[str], **extra) -> FinalAnswer:
    idx, method, rationale = _extract(raw, options)
    if method is ExtractionMethod.FALLBACK:
        logger.warning("no answer could be extracted; defaulting to option A")
    return FinalAnswer(idx, option_letter(idx), rationale, raw, method, **extra)


# --- prompt rendering -------------------------------------------------------


def _task_description(inp: AggregationInput) -> str:
    if inp.task_context:
        return f"{inp.task_description}\nTask context: {inp.task_context}"
    return inp.task_description


def _render(template: str, inp: AggregationInput, texts: Sequence[str]) -> str:
    blocks = "\n\n".join(f"- Expert {i}: {text}" for i, text in enumerate(texts, start=1))
    return render_template(
        template,
        {
            "task_description": _task_description(inp),
            "experts": blocks,
            "question": inp.question,
            "options": format_options(inp.options),
        },
    )


def build_aggregator_prompt(
    inp: AggregationInput, template: str | None = None, context_budget_chars: int | None = None
) -> tuple[str, bool]:
    """Render the prompt, shortening expert texts to fit the budget.

    Over budget, each expert text loses a share of the overflow proportional
    to its length, cut from its tail; question and options are never
    touched. Returns ``(prompt, truncated)``.
    """
    if not inp.bundle.outputs:
        raise ValueError("empty bundle")
    template = template or default_registry().aggregation_template
    texts = [o.text for o in inp.bundle.outputs]
    prompt = _render(template, inp, texts)
    if context_budget_chars is None or len(prompt) <= context_budget_chars:
        return prompt, False
    overflow = len(prompt) - context_budget_chars
    total = sum(len(t) for t in texts)
    keep_total = max(0, total - overflow)
    if total:
        texts = [t[: (len(t) * keep_total) // total] for t in texts]
    prompt = _render(template, inp, texts)
    if len(prompt) > context_budget_chars:
        logger.warning("aggregator prompt exceeds budget even with expert texts removed")
    return prompt, True


def render_aggregator_prompt(inp: AggregationInput, template: str | None = None) -> str:
    return build_aggregator_prompt(inp, template)[0]


def aggregate(
    gateway: Gateway,
    aggregator_backend: BackendSpec | str,
    inp: AggregationInput,
    registry: TaxonomyRegistry | None = None,
) -> FinalAnswer:
    registry = registry or default_registry()
    settings = registry.aggregator
    prompt, truncated = build_aggregator_prompt(
        inp, registry.aggregation_template, settings.context_budget_chars
    )
    request = ChatRequest.user(prompt, max_tokens=settings.max_tokens)
    try:
        response = gateway.complete(aggregator_backend, request)
    except GatewayError as exc:
        raise StageError("aggregator", exc) from exc
    return answer_from_text(
        response.text,
        inp.options,
        truncated=truncated,
        latency_ms=response.latency_ms,
        prompt_tokens=response.prompt_tokens,
        completion_tokens=response.completion_tokens,
    )


def render_direct_prompt(query: Query, registry: TaxonomyRegistry, task_description: str | None = None) -> str:
    template = registry.direct_template or default_registry().direct_template
    description = task_description or registry.aggregator.task_description
    if query.task_context:
        description = f"{description}\nTask context: {query.task_context}"
    return render_template(
        template,
        {
            "task_description": description,
            "question": query.question,
            "options": format_options(query.options),
        },
    )


def direct_answer(
    gateway: Gateway,
    backend: BackendSpec | str,
    query: Query,
    registry: TaxonomyRegistry | None = None,
) -> FinalAnswer:
    registry = registry or default_registry()
    spec = gateway.backend(backend) if isinstance(backend, str) else backend
    unsupported = sorted(m.value for m in query.modalities - set(spec.modalities))
    if unsupported:
        raise StageError(
            "direct",
            UnsupportedModality(f"backend {spec.id} does not accept {', '.join(unsupported)}", spec.id),
        )
    request = ChatRequest.user(
        render_direct_prompt(query, registry), query.assets, max_tokens=registry.aggregator.max_tokens
    )
    try:
        response = gateway.complete(spec, request)
    except GatewayError as exc:
        raise StageError("direct", exc) from exc
    return answer_from_text(
        response.text,
        query.options,
        latency_ms=response.latency_ms,
        prompt_tokens=response.prompt_tokens,
        completion_tokens=response.completion_tokens,
    )
