"""Expert selection: prompt a routing backend and turn its reply into a skill set."""

from __future__ import annotations

import hashlib
import json
import re
from collections.abc import Iterable
from dataclasses import dataclass

from .errors import GatewayError, RoutingError, StageError
from .gateway import BackendSpec, ChatRequest, Gateway
from .media import MediaRef, Modality
from .registry import (
    SkillId,
    TaxonomyRegistry,
    render_selection_prompt,
    skills_for_modalities,
)

# Used when the configured registry declares no fallback table.
DEFAULT_FALLBACK: dict[Modality, tuple[str, ...]] = {
    Modality.IMAGE: ("A1",),
    Modality.VIDEO: ("B1",),
    Modality.AUDIO: ("B2",),
    Modality.POINT_CLOUD_3D: ("C1", "C2"),
    Modality.MEDICAL_VOLUME: ("D1",),
    Modality.DOCUMENT: ("E1",),
}

_LABEL_RE = re.compile(r"^[\s*_#>`]*selected\s+ids\s*[*_]*\s*:", re.IGNORECASE)
_SPLIT_RE = re.compile(r"[\s,;]+")
_BULLET_RE = re.compile(r"^(?:[-*+•‣◦⁃]+|\d+[.)])$")
_STRIP_CHARS = "\"'`*_()[]{}<>.,;:!?"


@dataclass(frozen=True)
class Query:
    task_context: str
    question: str
    options: tuple[str, ...] = ()
    assets: tuple[MediaRef, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "options", tuple(self.options))
        object.__setattr__(self, "assets", tuple(self.assets))
        if not self.question.strip():
            raise ValueError("empty question")
        if len(self.options) == 1:
            raise ValueError("a multiple-choice query needs at least two options")
        digests = [a.content_digest for a in self.assets]
        if len(set(digests)) != len(digests):
            raise ValueError("two assets share a content digest")

    @property
    def modalities(self) -> set[Modality]:
        return {a.modality for a in self.assets}

    def digest(self) -> str:
        payload = [
            self.task_context,
            self.question,
            list(self.options),
            [[a.modality.value, a.content_digest] for a in self.assets],
        ]
        blob = json.dumps(payload, ensure_ascii=False, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class RoutingDecision:
    selected: tuple[SkillId, ...]
    raw_response: str
    dropped_tokens: tuple[str, ...] = ()
    fallback_used: bool = False
    # Parsed IDs that were valid skills but not servable by the query's assets.
    rejected: tuple[SkillId, ...] = ()
    latency_ms: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def to_dict(self) -> dict:
        return {
            "selected": [str(s) for s in self.selected],
            "raw_response": self.raw_response,
            "dropped_tokens": list(self.dropped_tokens),
            "rejected": [str(s) for s in self.rejected],
            "fallback_used": self.fallback_used,
        }


def parse_skill_ids(text: str, valid: Iterable[SkillId]) -> tuple[tuple[SkillId, ...], list[str]]:
    """Split a router reply into (kept valid IDs, dropped tokens).

    Kept IDs are deduplicated and sorted by canonical form; dropped tokens
    keep their original spelling, minus surrounding punctuation.
    """
    valid_set = set(valid)
    body = _LABEL_RE.sub("", text.lstrip(), count=1)
    kept: list[SkillId] = []
    dropped: list[str] = []
    seen: set[str] = set()
    for raw in _SPLIT_RE.split(body):
        if not raw or _BULLET_RE.match(raw):
            continue
        token = raw.strip(_STRIP_CHARS)
        if not token or _BULLET_RE.match(token):
            continue
        canon = token.upper()
        if canon in seen:
            continue
        seen.add(canon)
        sid = SkillId.try_parse(token)
        if sid is not None and sid in valid_set:
            kept.append(sid)
        else:
            dropped.append(token)
    return tuple(sorted(kept)), dropped


def render_skill_ids(ids: Iterable[SkillId]) -> str:
    return ", ".join(str(s) for s in sorted(ids))


def fallback_skills(registry: TaxonomyRegistry, available: Iterable[Modality]) -> tuple[SkillId, ...]:
    """Union of per-modality default skills for the available modalities.

    A modality with no usable configured default falls back to the first
    registered skill that accepts it, so any servable query gets a
    non-empty set.
    """
    table = registry.router.fallback or {
        m: tuple(SkillId.parse(s) for s in ids) for m, ids in DEFAULT_FALLBACK.items()
    }
    chosen: set[SkillId] = set()
    for modality in available:
        defaults = [s for s in table.get(modality, ()) if s in registry.skills and registry.skills[s].accepts(modality)]
        if not defaults:
            defaults = [sid for sid, spec in registry.skills.items() if spec.required_modality is modality][:1]
        if not defaults:
            defaults = [sid for sid, spec in registry.skills.items() if spec.accepts(modality)][:1]
        chosen.update(defaults)
    return tuple(sorted(chosen))


def build_router_request(registry: TaxonomyRegistry, query: Query) -> ChatRequest:
    prompt = render_selection_prompt(
        registry, query.task_context, query.question, query.options, query.modalities
    )
    attachments = query.assets if registry.router.attach_assets else ()
    return ChatRequest.user(prompt, attachments, max_tokens=registry.router.max_tokens)


def route(
    registry: TaxonomyRegistry,
    gateway: Gateway,
    router_backend: BackendSpec | str,
    query: Query,
) -> RoutingDecision:
    available = skills_for_modalities(registry, query.modalities)
    if not available:
        raise StageError(
            "router",
            RoutingError(f"no registered skill accepts modalities {sorted(m.value for m in query.modalities)}"),
        )
    request = build_router_request(registry, query)
    try:
        response = gateway.complete(router_backend, request)
    except GatewayError as exc:
        raise StageError("router", exc) from exc

    parsed, dropped = parse_skill_ids(response.text, registry.skills)
    selected = tuple(s for s in parsed if s in available)
    rejected = tuple(s for s in parsed if s not in available)
    fallback_used = not selected
    if fallback_used:
        selected = fallback_skills(registry, query.modalities)
    return RoutingDecision(
        selected=selected,
        raw_response=response.text,
        dropped_tokens=tuple(dropped),
        fallback_used=fallback_used,
        rejected=rejected,
        latency_ms=response.latency_ms,
        prompt_tokens=response.prompt_tokens,
        completion_tokens=response.completion_tokens,
    )
