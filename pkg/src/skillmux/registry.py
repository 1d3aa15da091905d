"""Skill taxonomy, expert bindings and prompt templates.

The registry is loaded from a single YAML (or JSON) document with top-level
keys ``skills``, ``experts``, ``templates``, ``router``, ``aggregator``,
``backends`` and ``run``. Unknown keys anywhere are rejected so typos fail
loudly. See ``data/default_registry.yaml`` for the shipped taxonomy.
"""

from __future__ import annotations

import functools
import hashlib
import json
import re
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from types import MappingProxyType
from typing import Any

import yaml

from .errors import ConfigError, TemplateError, UnknownSkillError
from .gateway import BackendKind, BackendSpec, Contains, DigestIs, ScriptEntry
from .media import Modality

INPUT_CONTEXT = "input-context"
SELECTION_CUE = "Selected IDs:"

_SKILL_RE = re.compile(r"^([A-Za-z])(\d+)$")
_PLACEHOLDER_RE = re.compile(r"\{([A-Za-z_][A-Za-z0-9_\-]*)\}")


@functools.total_ordering
@dataclass(frozen=True)
class SkillId:
    """Taxonomy identifier such as ``C2``; ordering is by canonical string."""

    category: str
    index: int

    def __post_init__(self) -> None:
        if len(self.category) != 1 or not self.category.isalpha() or not self.category.isupper():
            raise ValueError(f"invalid skill category {self.category!r}")
        if self.index < 1:
            raise ValueError("skill index must be positive")

    @classmethod
    def parse(cls, text: str | SkillId) -> SkillId:
        if isinstance(text, SkillId):
            return text
        m = _SKILL_RE.match(str(text).strip())
        if not m or int(m.group(2)) < 1:
            raise ValueError(f"invalid skill id {text!r}")
        return cls(m.group(1).upper(), int(m.group(2)))

    @classmethod
    def try_parse(cls, text: str) -> SkillId | None:
        try:
            return cls.parse(text)
        except ValueError:
            return None

    def __str__(self) -> str:
        return f"{self.category}{self.index}"

    def __lt__(self, other: SkillId) -> bool:
        if not isinstance(other, SkillId):
            return NotImplemented
        return str(self) < str(other)


@dataclass(frozen=True)
class SkillSpec:
    id: SkillId
    display_name: str
    category_name: str
    required_modality: Modality
    prompt_template_id: str
    # Further modalities that also satisfy the skill, in preference order
    # after required_modality.
    alternate_modalities: tuple[Modality, ...] = ()

    @property
    def accepted_modalities(self) -> tuple[Modality, ...]:
        return (self.required_modality, *self.alternate_modalities)

    def accepts(self, modality: Modality) -> bool:
        return modality in self.accepted_modalities


@dataclass(frozen=True)
class ExpertSpec:
    skill_id: SkillId
    backend_id: str
    prompt_template: str
    template_version: int
    max_tokens: int = 1024
    modalities: tuple[Modality, ...] = ()

    def render_prompt(self, modality_phrase: str) -> str:
        return render_template(self.prompt_template, {INPUT_CONTEXT: modality_phrase})


@dataclass(frozen=True)
class Template:
    text: str
    version: int


@dataclass(frozen=True)
class RouterSettings:
    backend: str | None = None
    template: str = "router.selection"
    max_tokens: int = 64
    attach_assets: bool = False
    fallback: Mapping[Modality, tuple[SkillId, ...]] = field(default_factory=dict)


@dataclass(frozen=True)
class AggregatorSettings:
    backend: str | None = None
    template: str = "aggregator.default"
    direct_template: str | None = "direct.default"
    task_description: str = (
        "You are an answerer for a video question answering, audio question answering, "
        "3D situated question answering, or medical visual question answering."
    )
    include_task_context: bool = False
    max_tokens: int = 2048
    context_budget_chars: int | None = None


@dataclass(frozen=True)
class TaxonomyRegistry:
    skills: Mapping[SkillId, SkillSpec]
    experts: Mapping[SkillId, ExpertSpec]
    templates: Mapping[str, Template]
    selection_template: str
    aggregation_template: str
    direct_template: str | None
    router: RouterSettings
    aggregator: AggregatorSettings
    backends: Mapping[str, BackendSpec]
    run_defaults: Mapping[str, Any]
    digest: str

    @property
    def categories(self) -> list[str]:
        """Category headings in declaration order."""
        return list(dict.fromkeys(s.category_name for s in self.skills.values()))

    def skill(self, skill_id: SkillId | str) -> SkillSpec:
        sid = _coerce_skill(skill_id)
        try:
            return self.skills[sid]
        except KeyError:
            raise UnknownSkillError(skill_id) from None


def _coerce_skill(skill_id: SkillId | str) -> SkillId | str:
    if isinstance(skill_id, SkillId):
        return skill_id
    return SkillId.try_parse(skill_id) or skill_id


# --- templates -------------------------------------------------------------


def placeholders(text: str) -> list[str]:
    return _PLACEHOLDER_RE.findall(text)


def render_template(text: str, values: Mapping[str, str]) -> str:
    """Substitute ``{name}`` placeholders; the placeholder set must equal ``values``."""
    found = placeholders(text)
    missing = set(values) - set(found)
    unknown = set(found) - set(values)
    if missing or unknown:
        raise TemplateError(
            f"template placeholder mismatch: missing {sorted(missing)}, unexpected {sorted(unknown)}"
        )
    return _PLACEHOLDER_RE.sub(lambda m: values[m.group(1)], text)


def option_letter(index: int) -> str:
    """0 -> A, 25 -> Z, 26 -> AA, 27 -> AB, ... (bijective base 26)."""
    if index < 0:
        raise ValueError("option index must be non-negative")
    n = index + 1
    out = ""
    while n:
        n, rem = divmod(n - 1, 26)
        out = chr(ord("A") + rem) + out
    return out


def letter_index(letter: str) -> int:
    n = 0
    for ch in letter.upper():
        if not "A" <= ch <= "Z":
            raise ValueError(f"invalid option letter {letter!r}")
        n = n * 26 + (ord(ch) - ord("A") + 1)
    if n == 0:
        raise ValueError("empty option letter")
    return n - 1


def format_options(options: Sequence[str], sep: str = "\n") -> str:
    return sep.join(f"{option_letter(i)}. {opt}" for i, opt in enumerate(options))


# --- operations -------------------------------------------------------------


def skills_for_modalities(registry: TaxonomyRegistry, available: Iterable[Modality]) -> set[SkillId]:
    avail = set(available)
    return {sid for sid, spec in registry.skills.items() if avail.intersection(spec.accepted_modalities)}


def expert_for_skill(registry: TaxonomyRegistry, skill_id: SkillId | str) -> ExpertSpec:
    sid = _coerce_skill(skill_id)
    try:
        return registry.experts[sid]
    except KeyError:
        raise UnknownSkillError(skill_id) from None


def render_skill_listing(registry: TaxonomyRegistry, selectable: set[SkillId]) -> str:
    blocks = []
    for category in registry.categories:
        lines = [
            f"- {sid}. {spec.display_name}"
            for sid, spec in registry.skills.items()
            if spec.category_name == category and sid in selectable
        ]
        if lines:
            blocks.append("\n".join([category, *lines]))
    return "\n\n".join(blocks)


def render_selection_prompt(
    registry: TaxonomyRegistry,
    task_context: str,
    question: str,
    options: Sequence[str],
    available: Iterable[Modality],
) -> str:
    if not question.strip():
        raise ValueError("empty question")
    selectable = skills_for_modalities(registry, available)
    text = render_template(
        registry.selection_template,
        {
            "task_type": task_context,
            "question": question,
            "options": format_options(options, sep="; ") if options else "(none)",
            "skills": render_skill_listing(registry, selectable) or "(no skills available)",
        },
    )
    if not text.rstrip().endswith(SELECTION_CUE):
        raise TemplateError(f"selection template must end with {SELECTION_CUE!r}")
    return text.rstrip() + "\n"


# --- loading ----------------------------------------------------------------

_TOP_KEYS = {"skills", "experts", "templates", "router", "aggregator", "backends", "run"}
_SKILL_KEYS = {"id", "name", "category", "modality", "also", "template"}
_EXPERT_KEYS = {"skill", "backend", "max_tokens"}
_TEMPLATE_KEYS = {"text", "version"}
_ROUTER_KEYS = {"backend", "template", "max_tokens", "attach_assets", "fallback"}
_AGG_KEYS = {
    "backend", "template", "direct_template", "task_description",
    "include_task_context", "max_tokens", "context_budget_chars",
}
_BACKEND_KEYS = {
    "id", "kind", "base_uri", "model_name", "auth_env_var", "timeout", "max_retries",
    "temperature", "max_in_flight", "modalities", "accept_uris", "script", "latency_ms",
}
_SCRIPT_KEYS = {"contains", "digest", "response", "latency_ms"}
_RUN_KEYS = {"mode", "strict", "max_concurrency", "fan_out", "cache_dir", "verbosity", "out"}

SELECTION_FIELDS = {"task_type", "question", "options", "skills"}
AGGREGATION_FIELDS = {"task_description", "experts", "question", "options"}
DIRECT_FIELDS = {"task_description", "question", "options"}


def _mapping(value: Any, path: str, allowed: set[str], required: Iterable[str] = ()) -> Mapping:
    if not isinstance(value, Mapping):
        raise ConfigError("expected a mapping", path)
    unknown = sorted(set(map(str, value)) - allowed)
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r}", path)
    for key in required:
        if key not in value or value[key] is None:
            raise ConfigError("missing required field", f"{path}.{key}" if path else key)
    return value


def _list(value: Any, path: str) -> list:
    if not isinstance(value, list):
        raise ConfigError("expected a list", path)
    return value


def _str(value: Any, path: str, allow_empty: bool = False) -> str:
    if not isinstance(value, str) or (not allow_empty and not value.strip()):
        raise ConfigError("expected a non-empty string", path)
    return value


def _int(value: Any, path: str, minimum: int = 0) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise ConfigError(f"expected an integer >= {minimum}", path)
    return value


def _number(value: Any, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError("expected a number", path)
    return float(value)


def _bool(value: Any, path: str) -> bool:
    if not isinstance(value, bool):
        raise ConfigError("expected true or false", path)
    return value


def _modality(value: Any, path: str) -> Modality:
    try:
        return Modality.parse(_str(value, path))
    except ValueError as exc:
        raise ConfigError(str(exc), path) from None


def _skill_id(value: Any, path: str) -> SkillId:
    try:
        return SkillId.parse(_str(str(value) if isinstance(value, int) else value, path))
    except ValueError as exc:
        raise ConfigError(str(exc), path) from None


def _check_template(text: str, fields: set[str], path: str) -> None:
    found = placeholders(text)
    if set(found) != fields:
        raise ConfigError(
            f"template placeholder mismatch: expected {sorted(fields)}, found {sorted(set(found))}",
            path,
        )


def _parse_backend(raw: Any, path: str) -> BackendSpec:
    raw = _mapping(raw, path, _BACKEND_KEYS, required=("id",))
    kind_raw = raw.get("kind", "remote-chat")
    try:
        kind = BackendKind(kind_raw)
    except ValueError:
        raise ConfigError(f"unknown backend kind {kind_raw!r}", f"{path}.kind") from None
    kwargs: dict[str, Any] = {"id": _str(raw["id"], f"{path}.id"), "kind": kind}
    for key in ("base_uri", "model_name", "auth_env_var"):
        if key in raw:
            kwargs[key] = _str(raw[key], f"{path}.{key}")
    if "timeout" in raw:
        kwargs["timeout"] = _number(raw["timeout"], f"{path}.timeout")
    if "temperature" in raw:
        kwargs["temperature"] = _number(raw["temperature"], f"{path}.temperature")
    for key, minimum in (("max_retries", 0), ("max_in_flight", 1), ("latency_ms", 0)):
        if key in raw:
            kwargs[key] = _int(raw[key], f"{path}.{key}", minimum)
    if "accept_uris" in raw:
        kwargs["accept_uris"] = _bool(raw["accept_uris"], f"{path}.accept_uris")
    if "modalities" in raw:
        mods = _list(raw["modalities"], f"{path}.modalities")
        kwargs["modalities"] = frozenset(
            _modality(m, f"{path}.modalities[{i}]") for i, m in enumerate(mods)
        )
    if "script" in raw:
        entries = []
        for i, entry in enumerate(_list(raw["script"], f"{path}.script")):
            epath = f"{path}.script[{i}]"
            entry = _mapping(entry, epath, _SCRIPT_KEYS, required=("response",))
            if ("contains" in entry) == ("digest" in entry):
                raise ConfigError("exactly one of 'contains' or 'digest' is required", epath)
            if "contains" in entry:
                needles = entry["contains"]
                needles = [needles] if isinstance(needles, str) else _list(needles, f"{epath}.contains")
                matcher = Contains(*(_str(n, f"{epath}.contains") for n in needles))
            else:
                matcher = DigestIs(_str(entry["digest"], f"{epath}.digest"))
            entries.append(
                ScriptEntry(
                    matcher,
                    _str(entry["response"], f"{epath}.response", allow_empty=True),
                    _int(entry.get("latency_ms", 0), f"{epath}.latency_ms"),
                )
            )
        kwargs["script"] = tuple(entries)
    try:
        return BackendSpec(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc), path) from None


def load_registry(config_document: str | bytes | Mapping[str, Any]) -> TaxonomyRegistry:
    """Parse and validate a registry document (YAML/JSON text or a mapping)."""
    if isinstance(config_document, (str, bytes)):
        try:
            doc = yaml.safe_load(config_document)
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed document: {exc}") from None
    else:
        doc = config_document
    doc = _mapping(doc, "", _TOP_KEYS, required=("skills", "experts", "templates"))
    digest = hashlib.sha256(
        json.dumps(doc, sort_keys=True, ensure_ascii=False, default=str).encode("utf-8")
    ).hexdigest()

    # templates
    templates: dict[str, Template] = {}
    raw_templates = _mapping(doc["templates"], "templates", set(map(str, doc["templates"] or {})))
    for tid, raw in raw_templates.items():
        tpath = f"templates.{tid}"
        raw = _mapping(raw, tpath, _TEMPLATE_KEYS, required=("text", "version"))
        templates[str(tid)] = Template(_str(raw["text"], f"{tpath}.text"), _int(raw["version"], f"{tpath}.version", 1))

    # skills
    raw_skills = _list(doc["skills"], "skills")
    if not raw_skills:
        raise ConfigError("no skills declared", "skills")
    skills: dict[SkillId, SkillSpec] = {}
    for i, raw in enumerate(raw_skills):
        path = f"skills[{i}]"
        raw = _mapping(raw, path, _SKILL_KEYS, required=("id", "name", "category", "modality", "template"))
        sid = _skill_id(raw["id"], f"{path}.id")
        if sid in skills:
            raise ConfigError(f"duplicate skill {sid}", f"{path}.id")
        template_id = _str(raw["template"], f"{path}.template")
        if template_id not in templates:
            raise ConfigError(f"unresolved template reference {template_id!r}", f"{path}.template")
        required = _modality(raw["modality"], f"{path}.modality")
        also = tuple(
            _modality(m, f"{path}.also[{j}]") for j, m in enumerate(_list(raw.get("also", []), f"{path}.also"))
        )
        skills[sid] = SkillSpec(
            id=sid,
            display_name=_str(raw["name"], f"{path}.name"),
            category_name=_str(raw["category"], f"{path}.category").strip(),
            required_modality=required,
            prompt_template_id=template_id,
            alternate_modalities=tuple(m for m in dict.fromkeys(also) if m is not required),
        )

    backends: dict[str, BackendSpec] = {}
    if "backends" in doc:
        for i, raw in enumerate(_list(doc["backends"], "backends")):
            spec = _parse_backend(raw, f"backends[{i}]")
            if spec.id in backends:
                raise ConfigError(f"duplicate backend {spec.id}", f"backends[{i}].id")
            backends[spec.id] = spec

    def check_backend_ref(backend_id: str, path: str) -> None:
        if "backends" in doc and backend_id not in backends:
            raise ConfigError(f"unknown backend {backend_id!r}", path)

    # experts
    experts: dict[SkillId, ExpertSpec] = {}
    for i, raw in enumerate(_list(doc["experts"], "experts")):
        path = f"experts[{i}]"
        raw = _mapping(raw, path, _EXPERT_KEYS, required=("skill", "backend"))
        sid = _skill_id(raw["skill"], f"{path}.skill")
        if sid not in skills:
            raise ConfigError(f"expert for undeclared skill {sid}", f"{path}.skill")
        if sid in experts:
            raise ConfigError(f"duplicate expert for skill {sid}", f"{path}.skill")
        backend_id = _str(raw["backend"], f"{path}.backend")
        check_backend_ref(backend_id, f"{path}.backend")
        skill = skills[sid]
        template = templates[skill.prompt_template_id]
        tpath = f"templates.{skill.prompt_template_id}.text"
        found = placeholders(template.text)
        if found != [INPUT_CONTEXT]:
            raise ConfigError(
                f"expert template must contain exactly one {{{INPUT_CONTEXT}}} placeholder, found {found}",
                tpath,
            )
        experts[sid] = ExpertSpec(
            skill_id=sid,
            backend_id=backend_id,
            prompt_template=template.text,
            template_version=template.version,
            max_tokens=_int(raw.get("max_tokens", 1024), f"{path}.max_tokens", 1),
            modalities=skill.accepted_modalities,
        )
    for sid in skills:
        if sid not in experts:
            raise ConfigError(f"no expert declared for skill {sid}", "experts")

    # router
    raw_router = _mapping(doc.get("router") or {}, "router", _ROUTER_KEYS)
    fallback: dict[Modality, tuple[SkillId, ...]] = {}
    raw_fb = _mapping(raw_router.get("fallback") or {}, "router.fallback", set(map(str, raw_router.get("fallback") or {})))
    for mod_raw, ids in raw_fb.items():
        fpath = f"router.fallback.{mod_raw}"
        mod = _modality(mod_raw, fpath)
        parsed = []
        for j, raw_id in enumerate(_list(ids, fpath)):
            sid = _skill_id(raw_id, f"{fpath}[{j}]")
            if sid not in skills:
                raise ConfigError(f"unknown skill {sid}", f"{fpath}[{j}]")
            if not skills[sid].accepts(mod):
                raise ConfigError(f"skill {sid} does not accept {mod.value}", f"{fpath}[{j}]")
            parsed.append(sid)
        fallback[mod] = tuple(parsed)
    router = RouterSettings(
        backend=_str(raw_router["backend"], "router.backend") if "backend" in raw_router else None,
        template=_str(raw_router.get("template", "router.selection"), "router.template"),
        max_tokens=_int(raw_router.get("max_tokens", 64), "router.max_tokens", 1),
        attach_assets=_bool(raw_router.get("attach_assets", False), "router.attach_assets"),
        fallback=MappingProxyType(fallback),
    )
    if router.backend:
        check_backend_ref(router.backend, "router.backend")

    # aggregator
    raw_agg = _mapping(doc.get("aggregator") or {}, "aggregator", _AGG_KEYS)
    defaults = AggregatorSettings()
    budget = raw_agg.get("context_budget_chars")
    if "direct_template" in raw_agg:
        direct_id = None if raw_agg["direct_template"] is None else _str(raw_agg["direct_template"], "aggregator.direct_template")
    else:
        direct_id = defaults.direct_template if defaults.direct_template in templates else None
    aggregator = AggregatorSettings(
        backend=_str(raw_agg["backend"], "aggregator.backend") if "backend" in raw_agg else None,
        template=_str(raw_agg.get("template", defaults.template), "aggregator.template"),
        direct_template=direct_id,
        task_description=" ".join(
            _str(raw_agg.get("task_description", defaults.task_description), "aggregator.task_description").split()
        ),
        include_task_context=_bool(raw_agg.get("include_task_context", False), "aggregator.include_task_context"),
        max_tokens=_int(raw_agg.get("max_tokens", defaults.max_tokens), "aggregator.max_tokens", 1),
        context_budget_chars=None if budget is None else _int(budget, "aggregator.context_budget_chars", 1),
    )
    if aggregator.backend:
        check_backend_ref(aggregator.backend, "aggregator.backend")

    def resolve(tid: str, path: str, fields: set[str]) -> str:
        if tid not in templates:
            raise ConfigError(f"unresolved template reference {tid!r}", path)
        _check_template(templates[tid].text, fields, f"templates.{tid}.text")
        return templates[tid].text

    selection = resolve(router.template, "router.template", SELECTION_FIELDS)
    if not selection.rstrip().endswith(SELECTION_CUE):
        raise ConfigError(f"selection template must end with {SELECTION_CUE!r}", f"templates.{router.template}.text")
    aggregation = resolve(aggregator.template, "aggregator.template", AGGREGATION_FIELDS)
    direct = None
    if aggregator.direct_template is not None:
        direct = resolve(aggregator.direct_template, "aggregator.direct_template", DIRECT_FIELDS)

    run = dict(_mapping(doc.get("run") or {}, "run", _RUN_KEYS))

    return TaxonomyRegistry(
        skills=MappingProxyType(skills),
        experts=MappingProxyType(experts),
        templates=MappingProxyType(templates),
        selection_template=selection,
        aggregation_template=aggregation,
        direct_template=direct,
        router=router,
        aggregator=aggregator,
        backends=MappingProxyType(backends),
        run_defaults=MappingProxyType(run),
        digest=digest,
    )


def load_registry_file(path: str | Path) -> TaxonomyRegistry:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from None
    return load_registry(text)


def default_config_text() -> str:
    return resources.files("skillmux").joinpath("data/default_registry.yaml").read_text(encoding="utf-8")


@functools.lru_cache(maxsize=1)
def default_registry() -> TaxonomyRegistry:
    return load_registry(default_config_text())
