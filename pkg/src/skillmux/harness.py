"""Benchmark execution and reporting.

Datasets are JSON-lines manifests, one item per line::

    {"id": "q1", "task_context": "...", "question": "...", "options": ["..", ".."],
     "gold_index": 0, "assets": [{"modality": "Image", "uri": "img/1.png"}],
     "categories": {"track": "Perception", "discipline": "Med"}}

Relative asset URIs resolve against the manifest's directory. Accuracy is
kept as exact fractions; percentages are only formatted at the edge (one
decimal place). ``Overall`` is the micro average over items.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from collections import Counter, defaultdict
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from pathlib import Path
from typing import Any

from .aggregator import AggregationInput, FinalAnswer, aggregate, direct_answer
from .errors import DatasetError, SkillmuxError, StageError
from .experts import ExpertBundle, ExpertCache, run_selected
from .gateway import Gateway
from .media import MediaRef, Modality, is_remote_uri
from .registry import SkillId, TaxonomyRegistry
from .router import Query, RoutingDecision, route

logger = logging.getLogger(__name__)

PIPELINE = "pipeline"
DIRECT = "direct-baseline"
MODES = (PIPELINE, DIRECT)

_ITEM_KEYS = {"id", "task_context", "question", "options", "gold_index", "assets", "categories"}
_ASSET_KEYS = {"modality", "uri"}


@dataclass(frozen=True)
class BenchmarkItem:
    id: str
    task_context: str
    question: str
    options: tuple[str, ...]
    gold_index: int
    assets: tuple[MediaRef, ...] = ()
    categories: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "options", tuple(self.options))
        object.__setattr__(self, "assets", tuple(self.assets))
        if not 0 <= self.gold_index < len(self.options):
            raise ValueError(f"gold_index {self.gold_index} out of range for {len(self.options)} options")

    def to_query(self) -> Query:
        return Query(self.task_context, self.question, self.options, self.assets)


def parse_item(obj: Any, base_dir: Path | None = None) -> BenchmarkItem:
    if not isinstance(obj, dict):
        raise ValueError("expected a JSON object")
    unknown = sorted(set(obj) - _ITEM_KEYS)
    if unknown:
        raise ValueError(f"unknown field {unknown[0]!r}")
    for key in ("id", "question", "options", "gold_index"):
        if key not in obj:
            raise ValueError(f"missing required field {key!r}")
    if not isinstance(obj["id"], str) or not obj["id"]:
        raise ValueError("id must be a non-empty string")
    if not isinstance(obj["question"], str) or not obj["question"].strip():
        raise ValueError("question must be a non-empty string")
    options = obj["options"]
    if not isinstance(options, list) or len(options) < 2 or not all(isinstance(o, str) for o in options):
        raise ValueError("options must be a list of at least two strings")
    gold = obj["gold_index"]
    if isinstance(gold, bool) or not isinstance(gold, int):
        raise ValueError("gold_index must be an integer")
    if not 0 <= gold < len(options):
        raise ValueError(f"gold_index {gold} out of range for {len(options)} options")
    task_context = obj.get("task_context", "")
    if not isinstance(task_context, str):
        raise ValueError("task_context must be a string")
    categories = obj.get("categories", {})
    if not isinstance(categories, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in categories.items()
    ):
        raise ValueError("categories must map strings to strings")
    assets = []
    for i, raw in enumerate(obj.get("assets", [])):
        if not isinstance(raw, dict) or set(raw) - _ASSET_KEYS or not _ASSET_KEYS <= set(raw):
            raise ValueError(f"assets[{i}] must have exactly 'modality' and 'uri'")
        try:
            modality = Modality.parse(raw["modality"])
        except ValueError as exc:
            raise ValueError(f"assets[{i}]: {exc}") from None
        uri = str(raw["uri"])
        if base_dir is not None and not is_remote_uri(uri) and not uri.startswith("file:"):
            path = Path(uri)
            if not path.is_absolute():
                uri = str(base_dir / path)
        assets.append(MediaRef(modality, uri))
    return BenchmarkItem(obj["id"], task_context, obj["question"], tuple(options), gold, tuple(assets), dict(categories))


def load_dataset(path: str | Path) -> list[BenchmarkItem]:
    path = Path(path)
    items: list[BenchmarkItem] = []
    seen: set[str] = set()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                item = parse_item(json.loads(line), path.parent)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"malformed JSON: {exc.msg}", lineno) from None
            except ValueError as exc:
                raise DatasetError(str(exc), lineno) from None
            if item.id in seen:
                raise DatasetError(f"duplicate id {item.id!r}", lineno)
            seen.add(item.id)
            items.append(item)
    return items


def filter_items(items: Iterable[BenchmarkItem], filters: Mapping[str, str]) -> list[BenchmarkItem]:
    return [i for i in items if all(i.categories.get(k) == v for k, v in filters.items())]


# --- configuration ---------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    registry: TaxonomyRegistry
    gateway: Gateway
    router_backend: str | None = None
    aggregator_backend: str | None = None
    # Backend for direct-baseline mode; defaults to the router backend.
    direct_backend: str | None = None
    mode: str = PIPELINE
    strict: bool = True
    cache: ExpertCache | None = None
    max_concurrency: int = 8
    fan_out: int = 4
    expert_backends: Mapping[SkillId, str] = field(default_factory=dict)
    include_task_context: bool | None = None
    name: str = "dataset"

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.max_concurrency < 1 or self.fan_out < 1:
            raise ValueError("concurrency limits must be positive")
        object.__setattr__(self, "router_backend", self.router_backend or self.registry.router.backend)
        object.__setattr__(self, "aggregator_backend", self.aggregator_backend or self.registry.aggregator.backend)
        if self.mode == PIPELINE and not (self.router_backend and self.aggregator_backend):
            raise ValueError("pipeline mode needs router and aggregator backends")
        if self.mode == DIRECT and not (self.direct_backend or self.router_backend):
            raise ValueError("direct-baseline mode needs a backend")

    @property
    def uses_task_context(self) -> bool:
        if self.include_task_context is None:
            return self.registry.aggregator.include_task_context
        return self.include_task_context

    def fingerprint(self) -> str:
        payload = {
            "registry": self.registry.digest,
            "mode": self.mode,
            "router": self.router_backend,
            "aggregator": self.aggregator_backend,
            "direct": self.direct_backend or self.router_backend,
            "strict": self.strict,
            "expert_backends": {str(k): v for k, v in sorted(self.expert_backends.items())},
            "include_task_context": self.uses_task_context,
        }
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


# --- records and reports ---------------------------------------------------


@dataclass
class ItemRecord:
    item_id: str
    mode: str
    gold_index: int
    categories: dict[str, str]
    decision: dict | None = None
    bundle: list[dict] = field(default_factory=list)
    answer: dict | None = None
    correct: bool = False
    failed: bool = False
    error_stage: str | None = None
    error: str | None = None
    latency_ms: dict[str, int] = field(default_factory=dict)
    tokens: dict[str, dict[str, int]] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    @property
    def selected(self) -> list[str]:
        return list(self.decision["selected"]) if self.decision else []

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ItemRecord:
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})


def format_percent(value: Fraction) -> str:
    pct = Decimal(value.numerator * 100) / Decimal(value.denominator)
    return str(pct.quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


def _ratio(correct: int, total: int) -> dict:
    frac = Fraction(correct, total) if total else Fraction(0)
    return {
        "correct": correct,
        "total": total,
        "fraction": f"{frac.numerator}/{frac.denominator}",
        "value": float(frac),
        "percent": format_percent(frac),
    }


def selection_histogram(records: Iterable[ItemRecord | Mapping[str, Any]]) -> dict[str, int]:
    counts: Counter[str] = Counter()
    for rec in records:
        decision = rec.decision if isinstance(rec, ItemRecord) else rec.get("decision")
        if decision:
            counts.update(decision["selected"])
    return {k: counts[k] for k in sorted(counts, key=lambda s: (SkillId.try_parse(s) is None, s))}


def category_counts(records: Iterable[ItemRecord]) -> dict[str, dict[str, tuple[int, int]]]:
    """tag -> value -> (correct, total)."""
    acc: dict[str, dict[str, list[int]]] = defaultdict(lambda: defaultdict(lambda: [0, 0]))
    for rec in records:
        for tag, value in rec.categories.items():
            cell = acc[tag][value]
            cell[0] += int(rec.correct)
            cell[1] += 1
    return {
        tag: {value: (c, n) for value, (c, n) in sorted(values.items())}
        for tag, values in sorted(acc.items())
    }


@dataclass
class RunReport:
    name: str
    mode: str
    config_fingerprint: str
    records: list[ItemRecord]
    created_at: str = ""

    @property
    def n_items(self) -> int:
        return len(self.records)

    @property
    def n_correct(self) -> int:
        return sum(r.correct for r in self.records)

    @property
    def n_failed(self) -> int:
        return sum(r.failed for r in self.records)

    @property
    def accuracy(self) -> Fraction:
        return Fraction(self.n_correct, self.n_items) if self.records else Fraction(0)

    @property
    def overall_accuracy(self) -> float:
        return float(self.accuracy)

    @property
    def per_category(self) -> dict[str, dict[str, Fraction]]:
        return {
            tag: {value: Fraction(c, n) for value, (c, n) in values.items()}
            for tag, values in category_counts(self.records).items()
        }

    @property
    def selection_histogram(self) -> dict[str, int]:
        return selection_histogram(self.records)

    @property
    def fallback_rate(self) -> Fraction:
        routed = [r for r in self.records if r.decision]
        if not routed:
            return Fraction(0)
        return Fraction(sum(bool(r.decision["fallback_used"]) for r in routed), len(routed))

    def stage_latency_ms(self, stage: str) -> int:
        return sum(r.latency_ms.get(stage, 0) for r in self.records)

    def to_dict(self, include_timestamp: bool = True) -> dict:
        data: dict[str, Any] = {
            "name": self.name,
            "mode": self.mode,
            "config_fingerprint": self.config_fingerprint,
            "n_items": self.n_items,
            "failed": self.n_failed,
            "overall_accuracy": self.overall_accuracy,
            "overall": _ratio(self.n_correct, self.n_items),
            "per_category": {
                tag: {value: _ratio(c, n) for value, (c, n) in values.items()}
                for tag, values in category_counts(self.records).items()
            },
            "selection_histogram": self.selection_histogram,
            "fallback_rate": float(self.fallback_rate),
            "records": [r.to_dict() for r in self.records],
        }
        if include_timestamp:
            data["created_at"] = self.created_at
        return data

    def to_json(self, include_timestamp: bool = True) -> str:
        return json.dumps(self.to_dict(include_timestamp), sort_keys=True, ensure_ascii=False, indent=2)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> RunReport:
        try:
            records = [ItemRecord.from_dict(r) for r in data["records"]]
            return cls(
                name=data.get("name", ""),
                mode=data.get("mode", PIPELINE),
                config_fingerprint=data.get("config_fingerprint", ""),
                records=records,
                created_at=data.get("created_at", ""),
            )
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed report: {exc!r}") from None

    @classmethod
    def read(cls, path: str | Path) -> RunReport:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValueError(f"malformed report: {exc.msg}") from None
        if not isinstance(data, dict):
            raise ValueError("malformed report: expected a JSON object")
        return cls.from_dict(data)

    def summary_table(self) -> str:
        lines = [
            f"{self.name} [{self.mode}]  items={self.n_items}  failed={self.n_failed}",
            f"{'Overall':<28}{format_percent(self.accuracy):>7}%  ({self.n_correct}/{self.n_items})",
        ]
        for tag, values in category_counts(self.records).items():
            for value, (c, n) in values.items():
                label = f"{tag}={value}"
                lines.append(f"{label:<28}{format_percent(Fraction(c, n)):>7}%  ({c}/{n})")
        lines.append(f"{'fallback rate':<28}{format_percent(self.fallback_rate):>7}%")
        lines.append(
            "latency ms  router={}  experts={}  aggregator={}".format(
                self.stage_latency_ms("router"),
                self.stage_latency_ms("experts"),
                self.stage_latency_ms("aggregator") + self.stage_latency_ms("direct"),
            )
        )
        return "\n".join(lines)


# --- execution -------------------------------------------------------------


@dataclass(frozen=True)
class Trace:
    """Every intermediate product of answering one query."""

    mode: str
    decision: RoutingDecision | None
    bundle: ExpertBundle | None
    answer: FinalAnswer


def solve(config: PipelineConfig, query: Query) -> Trace:
    if config.mode == DIRECT:
        backend = config.direct_backend or config.router_backend
        return Trace(DIRECT, None, None, direct_answer(config.gateway, backend, query, config.registry))
    decision = route(config.registry, config.gateway, config.router_backend, query)
    bundle = run_selected(
        decision,
        query,
        config.registry,
        config.gateway,
        config.cache,
        fan_out=config.fan_out,
        strict=config.strict,
        backend_overrides=config.expert_backends,
    )
    inp = AggregationInput(
        bundle,
        config.registry.aggregator.task_description,
        query.question,
        query.options,
        task_context=query.task_context if config.uses_task_context else None,
    )
    return Trace(PIPELINE, decision, bundle, aggregate(config.gateway, config.aggregator_backend, inp, config.registry))


def _tokens(prompt: int, completion: int) -> dict[str, int]:
    return {"prompt": prompt, "completion": completion}


def run_item(config: PipelineConfig, item: BenchmarkItem) -> ItemRecord:
    record = ItemRecord(item.id, config.mode, item.gold_index, dict(item.categories))
    try:
        trace = solve(config, item.to_query())
    except StageError as exc:
        record.failed, record.error_stage, record.error = True, exc.stage, str(exc.cause)
    except (SkillmuxError, OSError, ValueError) as exc:
        record.failed, record.error_stage, record.error = True, "input", str(exc)
    if record.failed:
        logger.warning("item %s failed at %s: %s", item.id, record.error_stage, record.error)
        return record

    decision, bundle, answer = trace.decision, trace.bundle, trace.answer
    if decision is not None:
        record.decision = decision.to_dict()
        record.latency_ms["router"] = decision.latency_ms
        record.tokens["router"] = _tokens(decision.prompt_tokens, decision.completion_tokens)
        if decision.fallback_used:
            record.warnings.append("router fallback used")
    if bundle is not None:
        record.bundle = [
            {"skill": str(o.skill_id), "backend": o.backend_id, "text_sha256": o.text_digest, "from_cache": o.from_cache}
            for o in bundle.outputs
        ]
        record.warnings.extend(bundle.warnings)
        record.latency_ms["experts"] = sum(o.latency_ms for o in bundle.outputs)
        record.tokens["experts"] = _tokens(
            sum(o.prompt_tokens for o in bundle.outputs), sum(o.completion_tokens for o in bundle.outputs)
        )
    stage = "direct" if trace.mode == DIRECT else "aggregator"
    record.latency_ms[stage] = answer.latency_ms
    record.tokens[stage] = _tokens(answer.prompt_tokens, answer.completion_tokens)
    if answer.truncated:
        record.warnings.append("expert texts truncated to fit the aggregator budget")
    if answer.flagged:
        record.warnings.append("answer extraction fell back to the first option")
    record.answer = answer.to_dict()
    record.correct = answer.choice_index == item.gold_index
    return record


def evaluate(config: PipelineConfig, items: Sequence[BenchmarkItem]) -> RunReport:
    if not items:
        raise ValueError("empty dataset")
    ids = [i.id for i in items]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate item ids")
    with ThreadPoolExecutor(max_workers=min(config.max_concurrency, len(items))) as pool:
        records = list(pool.map(lambda it: run_item(config, it), items))
    records.sort(key=lambda r: r.item_id)
    return RunReport(
        name=config.name,
        mode=config.mode,
        config_fingerprint=config.fingerprint(),
        records=records,
        created_at=time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    )


@dataclass
class AblationGrid:
    routers: list[str]
    aggregators: list[str]
    cells: dict[tuple[str, str], RunReport]

    def __getitem__(self, key: tuple[str, str]) -> RunReport:
        return self.cells[key]

    def __len__(self) -> int:
        return len(self.cells)


def run_ablation(
    config: PipelineConfig,
    router_backends: Sequence[str],
    aggregator_backends: Sequence[str],
    items: Sequence[BenchmarkItem],
) -> AblationGrid:
    """Evaluate every (router, aggregator) pair over the same items.

    All cells share one expert cache, so an expert call made by one cell is
    reused by every other cell that selects the same skill for the same asset.
    """
    if not router_backends or not aggregator_backends:
        raise ValueError("router and aggregator lists must be non-empty")
    cache = config.cache if config.cache is not None else ExpertCache()
    cells = {}
    for router_id in router_backends:
        for agg_id in aggregator_backends:
            cell = dataclasses.replace(
                config, router_backend=router_id, aggregator_backend=agg_id, cache=cache, mode=PIPELINE
            )
            cells[(router_id, agg_id)] = evaluate(cell, items)
    return AblationGrid(list(router_backends), list(aggregator_backends), cells)


def format_ablation_table(grids: Mapping[str, AblationGrid]) -> str:
    """Rows are (router, aggregator) pairs, one accuracy column per dataset."""
    names = list(grids)
    first = grids[names[0]]
    header = ["Router", "Aggregator", *names]
    rows = [
        [r, a, *(format_percent(grids[n][(r, a)].accuracy) for n in names)]
        for r in first.routers
        for a in first.aggregators
    ]
    widths = [max(len(str(row[i])) for row in [header, *rows]) for i in range(len(header))]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    return "\n".join([fmt.format(*header), fmt.format(*("-" * w for w in widths))] + [fmt.format(*r) for r in rows])
