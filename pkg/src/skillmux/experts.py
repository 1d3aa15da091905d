"""Expert invocation: per-skill captions of one asset, cached by content."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from collections.abc import Callable, Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .errors import GatewayError, InvariantBreach, SkillmuxError, StageError
from .gateway import ChatRequest, ChatResponse, Gateway
from .media import ASSET_PHRASES, MediaRef
from .registry import ExpertSpec, SkillId, TaxonomyRegistry, expert_for_skill
from .router import Query, RoutingDecision

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CacheKey:
    skill_id: SkillId
    template_version: int
    asset_digest: str
    backend_id: str

    def hexdigest(self) -> str:
        blob = json.dumps(
            [str(self.skill_id), self.template_version, self.asset_digest, self.backend_id],
            separators=(",", ":"),
        )
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ExpertOutput:
    skill_id: SkillId
    text: str
    backend_id: str
    from_cache: bool
    latency_ms: int
    prompt_tokens: int = 0
    completion_tokens: int = 0
    warnings: tuple[str, ...] = ()

    @property
    def text_digest(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ExpertBundle:
    outputs: tuple[ExpertOutput, ...]
    query_digest: str
    warnings: tuple[str, ...] = ()

    @property
    def skill_ids(self) -> tuple[SkillId, ...]:
        return tuple(o.skill_id for o in self.outputs)


class ExpertCache:
    """Content-addressed store for expert captions.

    Entries live in memory and, when ``directory`` is given, on disk as
    ``<dir>/<h[:2]>/<h[2:4]>/<h>.json`` where ``h`` is the key hash. Misses
    for the same key are serialized behind a per-key lock, so concurrent
    requests for one key trigger a single backend call.
    """

    def __init__(self, directory: str | os.PathLike | None = None) -> None:
        self.directory = Path(directory) if directory is not None else None
        self._memory: dict[str, str] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()
        self.hits = 0
        self.misses = 0

    def path_for(self, key: CacheKey) -> Path:
        assert self.directory is not None
        h = key.hexdigest()
        return self.directory / h[:2] / h[2:4] / f"{h}.json"

    def _lock_for(self, h: str) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(h, threading.Lock())

    def _read(self, key: CacheKey, warnings: list[str]) -> str | None:
        h = key.hexdigest()
        if h in self._memory:
            return self._memory[h]
        if self.directory is None:
            return None
        path = self.path_for(key)
        try:
            entry = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            return None
        except (OSError, ValueError) as exc:
            msg = f"cache read failed for {path.name}: {exc}"
            logger.warning(msg)
            warnings.append(msg)
            return None
        if entry.get("skill") != str(key.skill_id) or entry.get("asset_digest") != key.asset_digest:
            return None
        self._memory[h] = entry["text"]
        return entry["text"]

    def _write(self, key: CacheKey, text: str, warnings: list[str]) -> None:
        h = key.hexdigest()
        self._memory[h] = text
        if self.directory is None:
            return
        path = self.path_for(key)
        entry = {
            "skill": str(key.skill_id),
            "template_version": key.template_version,
            "backend": key.backend_id,
            "asset_digest": key.asset_digest,
            "created_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            "text": text,
        }
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(f".{os.getpid()}.{threading.get_ident()}.tmp")
            tmp.write_text(json.dumps(entry, ensure_ascii=False, indent=1), encoding="utf-8")
            os.replace(tmp, path)
        except OSError as exc:
            msg = f"cache write failed for {path.name}: {exc}"
            logger.warning(msg)
            warnings.append(msg)

    def get(self, key: CacheKey) -> str | None:
        return self._read(key, [])

    def get_or_compute(
        self, key: CacheKey, compute: Callable[[], ChatResponse]
    ) -> tuple[str, ChatResponse | None, list[str]]:
        """Return ``(text, response, warnings)``; ``response`` is None on a hit."""
        warnings: list[str] = []
        with self._lock_for(key.hexdigest()):
            cached = self._read(key, warnings)
            if cached is not None:
                with self._guard:
                    self.hits += 1
                return cached, None, warnings
            response = compute()
            self._write(key, response.text, warnings)
            with self._guard:
                self.misses += 1
            return response.text, response, warnings

    def __len__(self) -> int:
        if self.directory is None:
            return len(self._memory)
        return sum(1 for _ in self.directory.glob("*/*/*.json"))


def select_asset(query: Query, spec: ExpertSpec) -> MediaRef:
    """First asset, in query order, of the most preferred accepted modality."""
    for modality in spec.modalities:
        for asset in query.assets:
            if asset.modality is modality:
                return asset
    wanted = spec.modalities[0].value if spec.modalities else "matching"
    raise InvariantBreach(f"invariant breach: no {wanted} asset")


def invoke_expert(
    spec: ExpertSpec,
    asset: MediaRef,
    gateway: Gateway,
    cache: ExpertCache | None,
    backend_id: str | None = None,
) -> ExpertOutput:
    if spec.modalities and asset.modality not in spec.modalities:
        raise InvariantBreach(
            f"invariant breach: expert {spec.skill_id} cannot read {asset.modality.value} assets"
        )
    backend_id = backend_id or spec.backend_id
    key = CacheKey(spec.skill_id, spec.template_version, asset.content_digest, backend_id)

    def call() -> ChatResponse:
        prompt = spec.render_prompt(ASSET_PHRASES[asset.modality])
        request = ChatRequest.user(prompt, [asset], max_tokens=spec.max_tokens)
        try:
            return gateway.complete(backend_id, request)
        except GatewayError as exc:
            raise StageError(f"expert:{spec.skill_id}", exc) from exc

    text, response, warnings = cache.get_or_compute(key, call) if cache is not None else _uncached(call)
    if not text:
        warnings.append(f"expert {spec.skill_id} returned empty text")
    return ExpertOutput(
        skill_id=spec.skill_id,
        text=text,
        backend_id=backend_id,
        from_cache=response is None,
        latency_ms=response.latency_ms if response else 0,
        prompt_tokens=response.prompt_tokens if response else 0,
        completion_tokens=response.completion_tokens if response else 0,
        warnings=tuple(warnings),
    )


def _uncached(call: Callable[[], ChatResponse]) -> tuple[str, ChatResponse, list[str]]:
    response = call()
    return response.text, response, []


def unavailable_placeholder(skill_id: SkillId) -> str:
    return f"[expert {skill_id} unavailable]"


def run_selected(
    decision: RoutingDecision,
    query: Query,
    registry: TaxonomyRegistry,
    gateway: Gateway,
    cache: ExpertCache | None,
    *,
    fan_out: int = 4,
    strict: bool = True,
    backend_overrides: Mapping[SkillId, str] | None = None,
) -> ExpertBundle:
    """Run every selected expert and return outputs in skill order.

    Experts run concurrently, at most ``fan_out`` at a time. In strict mode
    the first failure (in skill order) is raised as a :class:`StageError`;
    in lenient mode failed experts are replaced by a placeholder text.
    """
    if not decision.selected:
        raise InvariantBreach("invariant breach: empty routing decision")
    overrides = backend_overrides or {}
    skills = sorted(set(decision.selected))

    def one(sid: SkillId) -> ExpertOutput:
        spec = expert_for_skill(registry, sid)
        asset = select_asset(query, spec)
        return invoke_expert(spec, asset, gateway, cache, overrides.get(sid))

    results: dict[SkillId, ExpertOutput | BaseException] = {}
    with ThreadPoolExecutor(max_workers=max(1, min(fan_out, len(skills)))) as pool:
        futures = {sid: pool.submit(one, sid) for sid in skills}
        for sid, fut in futures.items():
            try:
                results[sid] = fut.result()
            except (SkillmuxError, OSError) as exc:
                results[sid] = exc

    outputs: list[ExpertOutput] = []
    warnings: list[str] = []
    for sid in skills:
        res = results[sid]
        if isinstance(res, BaseException):
            err = res if isinstance(res, StageError) else StageError(f"expert:{sid}", res)
            if strict:
                raise err
            msg = f"expert {sid} failed: {err.cause}"
            logger.warning(msg)
            warnings.append(msg)
            spec = registry.experts.get(sid)
            res = ExpertOutput(
                skill_id=sid,
                text=unavailable_placeholder(sid),
                backend_id=overrides.get(sid) or (spec.backend_id if spec else ""),
                from_cache=False,
                latency_ms=0,
                warnings=(msg,),
            )
        else:
            warnings.extend(res.warnings)
        outputs.append(res)
    return ExpertBundle(tuple(outputs), query.digest(), tuple(warnings))
