"""Command-line entry points: ask, bench, ablate, stats, cache.

Settings resolve as flag > environment variable > ``run`` section of the
config file > built-in default. Environment variables:

    SKILLMUX_CONFIG, SKILLMUX_MODE, SKILLMUX_STRICT, SKILLMUX_CACHE_DIR,
    SKILLMUX_MAX_CONCURRENCY, SKILLMUX_FAN_OUT, SKILLMUX_VERBOSITY, SKILLMUX_OUT

Exit codes: 0 success, 1 model/accuracy-affecting failure, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, TextIO

from .errors import ConfigError, DatasetError, SkillmuxError, StageError
from .experts import ExpertCache
from .gateway import Gateway
from .harness import (
    MODES,
    PIPELINE,
    PipelineConfig,
    RunReport,
    Trace,
    evaluate,
    filter_items,
    format_ablation_table,
    load_dataset,
    run_ablation,
    selection_histogram,
    solve,
)
from .media import MediaRef, Modality
from .registry import SkillId, TaxonomyRegistry, default_registry, load_registry_file
from .router import Query

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

ENV_PREFIX = "SKILLMUX_"

_EXTENSIONS = {
    Modality.IMAGE: (".png", ".jpg", ".jpeg", ".gif", ".bmp", ".webp"),
    Modality.VIDEO: (".mp4", ".mov", ".avi", ".mkv", ".webm"),
    Modality.AUDIO: (".wav", ".mp3", ".flac", ".ogg", ".m4a"),
    Modality.POINT_CLOUD_3D: (".ply", ".pcd", ".pth", ".npy", ".npz"),
    Modality.MEDICAL_VOLUME: (".nii", ".nii.gz", ".dcm", ".nrrd"),
    Modality.DOCUMENT: (".pdf",),
    Modality.TEXT: (".txt", ".md"),
}


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    registry_path: str | None
    registry: TaxonomyRegistry
    router_backend: str | None
    aggregator_backend: str | None
    direct_backend: str | None = None
    expert_backends: dict[SkillId, str] = field(default_factory=dict)
    mode: str = PIPELINE
    strict: bool = True
    max_concurrency: int = 8
    fan_out: int = 4
    cache_dir: str | None = None
    out: str | None = None
    verbosity: int = 2

    def pipeline(self, gateway: Gateway, cache: ExpertCache | None = None, name: str = "dataset", **overrides) -> PipelineConfig:
        return PipelineConfig(
            registry=self.registry,
            gateway=gateway,
            router_backend=overrides.get("router_backend", self.router_backend),
            aggregator_backend=overrides.get("aggregator_backend", self.aggregator_backend),
            direct_backend=self.direct_backend,
            mode=overrides.get("mode", self.mode),
            strict=self.strict,
            cache=cache if cache is not None else ExpertCache(self.cache_dir),
            max_concurrency=self.max_concurrency,
            fan_out=self.fan_out,
            expert_backends=self.expert_backends,
            name=name,
        )

    def gateway(self) -> Gateway:
        return Gateway(self.registry.backends.values())


def _parse_bool(text: str) -> bool:
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on", "strict"):
        return True
    if lowered in ("0", "false", "no", "off", "lenient"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def _positive_int(text: Any) -> int:
    try:
        value = int(text)
    except (TypeError, ValueError):
        raise UsageError(f"not an integer: {text!r}") from None
    if value < 1:
        raise UsageError(f"must be positive: {text!r}")
    return value


def _setting(name: str, flag: Any, environ: Mapping[str, str], run: Mapping[str, Any], default: Any, parse=lambda v: v):
    if flag is not None:
        return parse(flag)
    env = environ.get(ENV_PREFIX + name.upper())
    if env not in (None, ""):
        return parse(env)
    if name in run and run[name] is not None:
        return parse(run[name])
    return default


def build_run_config(args: argparse.Namespace, environ: Mapping[str, str] | None = None) -> RunConfig:
    environ = os.environ if environ is None else environ
    config_path = args.config or environ.get(ENV_PREFIX + "CONFIG") or None
    registry = load_registry_file(config_path) if config_path else default_registry()
    run = registry.run_defaults

    mode = _setting("mode", args.mode, environ, run, PIPELINE)
    if mode not in MODES:
        raise UsageError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
    cfg = RunConfig(
        registry_path=config_path,
        registry=registry,
        router_backend=args.router_backend or registry.router.backend,
        aggregator_backend=args.aggregator_backend or registry.aggregator.backend,
        direct_backend=args.direct_backend,
        mode=mode,
        strict=_setting("strict", args.strict, environ, run, True, _parse_bool),
        max_concurrency=_setting("max_concurrency", args.max_concurrency, environ, run, 8, _positive_int),
        fan_out=_setting("fan_out", args.fan_out, environ, run, 4, _positive_int),
        cache_dir=_setting("cache_dir", args.cache_dir, environ, run, None, str),
        out=_setting("out", args.out, environ, run, None, str),
        verbosity=_setting("verbosity", args.verbosity, environ, run, 2, int),
    )
    for raw in args.expert_backend or []:
        skill, sep, backend = raw.partition("=")
        if not sep or not backend:
            raise UsageError(f"--expert-backend expects SKILL=BACKEND, got {raw!r}")
        targets = list(registry.skills) if skill == "*" else [SkillId.try_parse(skill)]
        if targets[0] is None or targets[0] not in registry.skills:
            raise UsageError(f"unknown skill {skill}")
        for sid in targets:
            cfg.expert_backends[sid] = backend

    referenced = {
        "router": cfg.router_backend,
        "aggregator": cfg.aggregator_backend,
        "direct": cfg.direct_backend,
        **{f"expert {sid}": b for sid, b in cfg.expert_backends.items()},
    }
    if cfg.mode == PIPELINE:
        referenced.update({f"expert {sid}": spec.backend_id for sid, spec in registry.experts.items() if sid not in cfg.expert_backends})
    for role, backend_id in referenced.items():
        if backend_id and backend_id not in registry.backends:
            raise ConfigError(f"{role} backend {backend_id!r} is not declared in backends[]")
    return cfg


# --- rendering ---------------------------------------------------------------


def render_trace(trace: Trace, options: Sequence[str], verbosity: int = 2) -> str:
    lines = [f"[mode] {trace.mode}"]
    if trace.decision is not None and verbosity >= 1:
        d = trace.decision
        lines.append(f"[router] selected: {', '.join(str(s) for s in d.selected)}")
        lines.append(f"[router] raw response: {d.raw_response.strip()}")
        if d.fallback_used:
            lines.append("[router] fallback used")
    if trace.bundle is not None and verbosity >= 2:
        for out in trace.bundle.outputs:
            cached = " (cached)" if out.from_cache else ""
            lines.append(f"[expert {out.skill_id}]{cached} {out.text}")
    a = trace.answer
    lines.append(f"[answer] {a.choice_letter}. {options[a.choice_index]} ({a.extraction_method.value})")
    if a.rationale and verbosity >= 1:
        lines.append(f"[rationale] {a.rationale}")
    return "\n".join(lines) + "\n"


def render_histogram(counts: Mapping[str, int]) -> str:
    total = sum(counts.values())
    if not total:
        return "no selections recorded\n"
    lines = [f"{'skill':<8}{'count':>8}{'percent':>10}"]
    for skill, n in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])):
        lines.append(f"{skill:<8}{n:>8}{100 * n / total:>9.1f}%")
    lines.append(f"{'total':<8}{total:>8}")
    return "\n".join(lines) + "\n"


def guess_modality(path: str) -> Modality:
    lowered = path.lower()
    for modality, exts in _EXTENSIONS.items():
        if lowered.endswith(exts):
            return modality
    raise UsageError(f"cannot infer modality of {path}; use MODALITY=PATH")


def parse_asset(spec: str) -> MediaRef:
    head, sep, tail = spec.partition("=")
    if sep:
        try:
            modality = Modality.parse(head)
            path = tail
        except ValueError:
            modality, path = guess_modality(spec), spec
    else:
        modality, path = guess_modality(spec), spec
    if not Path(path).is_file():
        raise UsageError(f"asset file not found: {path}")
    return MediaRef(modality, path)


def parse_filters(raw: Sequence[str] | None) -> dict[str, str]:
    filters = {}
    for item in raw or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--filter expects key=value, got {item!r}")
        filters[key] = value
    return filters


# --- commands ------------------------------------------------------------------


def cmd_ask(cfg: RunConfig, question: str, options: Sequence[str], assets: Sequence[str],
            task_context: str = "", stdout: TextIO = sys.stdout, gateway: Gateway | None = None) -> int:
    refs = [parse_asset(a) for a in assets]
    try:
        query = Query(task_context, question, tuple(options), tuple(refs))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if len(query.options) < 2:
        raise UsageError("at least two --option values are required")
    gateway = gateway or cfg.gateway()
    trace = solve(cfg.pipeline(gateway), query)
    stdout.write(render_trace(trace, query.options, cfg.verbosity))
    return EXIT_OK


def cmd_bench(cfg: RunConfig, dataset: str, filters: Mapping[str, str] | None = None,
              stdout: TextIO = sys.stdout, gateway: Gateway | None = None) -> int:
    items = filter_items(load_dataset(dataset), filters or {})
    if not items:
        raise UsageError("empty dataset (after filtering)")
    gateway = gateway or cfg.gateway()
    report = evaluate(cfg.pipeline(gateway, name=Path(dataset).stem), items)
    out = cfg.out or f"{Path(dataset).stem}.report.json"
    report.write(out)
    stdout.write(report.summary_table() + "\n")
    stdout.write(f"report written to {out}\n")
    return EXIT_FAILURE if report.n_failed else EXIT_OK


def cmd_ablate(cfg: RunConfig, datasets: Sequence[str], routers: Sequence[str], aggregators: Sequence[str],
               filters: Mapping[str, str] | None = None, stdout: TextIO = sys.stdout,
               gateway: Gateway | None = None) -> int:
    if not routers or not aggregators:
        raise UsageError("at least one --router and one --aggregator are required")
    for backend_id in [*routers, *aggregators]:
        if cfg.registry.backends and backend_id not in cfg.registry.backends:
            raise UsageError(f"unknown backend {backend_id!r}")
    gateway = gateway or cfg.gateway()
    cache = ExpertCache(cfg.cache_dir)
    grids = {}
    for path in datasets:
        items = filter_items(load_dataset(path), filters or {})
        if not items:
            raise UsageError(f"empty dataset (after filtering): {path}")
        base = cfg.pipeline(gateway, cache, name=Path(path).stem, router_backend=routers[0],
                            aggregator_backend=aggregators[0], mode=PIPELINE)
        grids[Path(path).stem] = run_ablation(base, routers, aggregators, items)
    stdout.write(format_ablation_table(grids) + "\n")
    if cfg.out:
        payload = {
            name: [
                {"router": r, "aggregator": a, "report": grid[(r, a)].to_dict()}
                for r in grid.routers for a in grid.aggregators
            ]
            for name, grid in grids.items()
        }
        Path(cfg.out).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    failed = any(rep.n_failed for grid in grids.values() for rep in grid.cells.values())
    return EXIT_FAILURE if failed else EXIT_OK


def cmd_stats(report_path: str, as_json: bool = False, stdout: TextIO = sys.stdout) -> int:
    try:
        report = RunReport.read(report_path)
    except OSError as exc:
        raise UsageError(f"cannot read report {report_path}: {exc.strerror}") from None
    except ValueError as exc:
        raise UsageError(f"{report_path}: {exc}") from None
    counts = selection_histogram(report.records)
    if as_json:
        total = sum(counts.values())
        payload = {
            "items": report.n_items,
            "total_selections": total,
            "counts": counts,
            "percent": {k: round(100 * v / total, 1) for k, v in counts.items()} if total else {},
        }
        stdout.write(json.dumps(payload, indent=2) + "\n")
    else:
        stdout.write(render_histogram(counts))
    return EXIT_OK


def cmd_cache(cache_dir: str | None, stdout: TextIO = sys.stdout) -> int:
    if not cache_dir:
        raise UsageError("--cache-dir is required")
    root = Path(cache_dir)
    entries = sorted(root.glob("*/*/*.json")) if root.is_dir() else []
    per_skill: dict[str, int] = {}
    for path in entries:
        try:
            skill = json.loads(path.read_text(encoding="utf-8")).get("skill", "?")
        except (OSError, ValueError):
            skill = "?"
        per_skill[skill] = per_skill.get(skill, 0) + 1
    stdout.write(f"{len(entries)} cached expert outputs in {root}\n")
    for skill in sorted(per_skill):
        stdout.write(f"  {skill:<6}{per_skill[skill]:>6}\n")
    return EXIT_OK


# --- argument parsing ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="registry/config YAML (default: shipped taxonomy)")
    common.add_argument("--mode", choices=MODES)
    strict = common.add_mutually_exclusive_group()
    strict.add_argument("--strict", dest="strict", action="store_const", const=True, default=None)
    strict.add_argument("--lenient", dest="strict", action="store_const", const=False)
    common.add_argument("--filter", action="append", metavar="KEY=VALUE")
    common.add_argument("--out")
    common.add_argument("--cache-dir")
    common.add_argument("--max-concurrency", type=int)
    common.add_argument("--fan-out", type=int)
    common.add_argument("--verbosity", type=int, choices=(0, 1, 2))
    common.add_argument("--router-backend")
    common.add_argument("--aggregator-backend")
    common.add_argument("--direct-backend")
    common.add_argument("--expert-backend", action="append", metavar="SKILL=BACKEND",
                        help="override an expert's backend; SKILL may be '*'")

    parser = argparse.ArgumentParser(prog="skillmux", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    ask = sub.add_parser("ask", parents=[common], help="answer one question")
    ask.add_argument("question")
    ask.add_argument("--option", "-o", action="append", default=[], required=True)
    ask.add_argument("--asset", "-a", action="append", default=[], metavar="[MODALITY=]PATH")
    ask.add_argument("--task-context", default="")

    bench = sub.add_parser("bench", parents=[common], help="evaluate a dataset manifest")
    bench.add_argument("dataset")

    ablate = sub.add_parser("ablate", parents=[common], help="router x aggregator grid")
    ablate.add_argument("datasets", nargs="+")
    ablate.add_argument("--router", action="append", default=[])
    ablate.add_argument("--aggregator", action="append", default=[])

    stats = sub.add_parser("stats", help="expert selection histogram of a report")
    stats.add_argument("report")
    stats.add_argument("--json", action="store_true")

    cache = sub.add_parser("cache", help="inspect an expert cache directory")
    cache.add_argument("--cache-dir")
    return parser


def main(argv: Sequence[str] | None = None, stdout: TextIO | None = None, stderr: TextIO | None = None,
         environ: Mapping[str, str] | None = None, gateway: Gateway | None = None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    environ = os.environ if environ is None else environ
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        if args.command == "stats":
            return cmd_stats(args.report, args.json, stdout)
        if args.command == "cache":
            return cmd_cache(args.cache_dir or environ.get(ENV_PREFIX + "CACHE_DIR"), stdout)
        cfg = build_run_config(args, environ)
        filters = parse_filters(args.filter)
        if args.command == "ask":
            return cmd_ask(cfg, args.question, args.option, args.asset, args.task_context, stdout, gateway)
        if args.command == "bench":
            return cmd_bench(cfg, args.dataset, filters, stdout, gateway)
        if args.command == "ablate":
            return cmd_ablate(cfg, args.datasets, args.router, args.aggregator, filters, stdout, gateway)
    except (UsageError, ConfigError, DatasetError) as exc:
        stderr.write(f"error: {exc}\n")
        return EXIT_USAGE
    except FileNotFoundError as exc:
        stderr.write(f"error: file not found: {exc.filename}\n")
        return EXIT_USAGE
    except StageError as exc:
        stderr.write(f"error: {exc}\n")
        return EXIT_FAILURE
    except SkillmuxError as exc:
        stderr.write(f"error: {exc}\n")
        return EXIT_FAILURE
    parser.error(f"unknown command {args.command}")
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
