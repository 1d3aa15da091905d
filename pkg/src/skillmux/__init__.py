"""Training-free multimodal expert orchestration.

A router picks skill-specialized experts for a question, each expert turns
its modality input into text, and an aggregator answers from the combined
texts. A benchmark harness measures accuracy, per-category breakdowns,
expert selection histograms and router x aggregator ablations.
"""

from .aggregator import (
    AggregationInput,
    ExtractionMethod,
    FinalAnswer,
    aggregate,
    direct_answer,
    extract_choice,
    render_aggregator_prompt,
)
from .experts import (
    CacheKey,
    ExpertBundle,
    ExpertCache,
    ExpertOutput,
    invoke_expert,
    run_selected,
    select_asset,
)
from .gateway import (
    BackendKind,
    BackendSpec,
    ChatRequest,
    ChatResponse,
    Contains,
    DigestIs,
    Gateway,
    Message,
    ScriptEntry,
    scripted_backend,
)
from .harness import (
    BenchmarkItem,
    ItemRecord,
    PipelineConfig,
    RunReport,
    evaluate,
    load_dataset,
    run_ablation,
    selection_histogram,
    solve,
)
from .media import MediaRef, Modality
from .registry import (
    ExpertSpec,
    SkillId,
    SkillSpec,
    TaxonomyRegistry,
    default_registry,
    expert_for_skill,
    load_registry,
    load_registry_file,
    render_selection_prompt,
    skills_for_modalities,
)
from .router import Query, RoutingDecision, parse_skill_ids, route

__all__ = [
    "AggregationInput",
    "BackendKind",
    "BackendSpec",
    "BenchmarkItem",
    "CacheKey",
    "ChatRequest",
    "ChatResponse",
    "Contains",
    "DigestIs",
    "ExpertBundle",
    "ExpertCache",
    "ExpertOutput",
    "ExpertSpec",
    "ExtractionMethod",
    "FinalAnswer",
    "Gateway",
    "ItemRecord",
    "MediaRef",
    "Message",
    "Modality",
    "PipelineConfig",
    "Query",
    "RoutingDecision",
    "RunReport",
    "ScriptEntry",
    "SkillId",
    "SkillSpec",
    "TaxonomyRegistry",
    "aggregate",
    "default_registry",
    "direct_answer",
    "evaluate",
    "expert_for_skill",
    "extract_choice",
    "invoke_expert",
    "load_dataset",
    "load_registry",
    "load_registry_file",
    "parse_skill_ids",
    "render_aggregator_prompt",
    "render_selection_prompt",
    "route",
    "run_ablation",
    "run_selected",
    "scripted_backend",
    "select_asset",
    "selection_histogram",
    "skills_for_modalities",
    "solve",
]

__version__ = "0.1.0"
