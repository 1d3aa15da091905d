"""Uniform chat-completion client for remote backends and scripted doubles.

Remote backends speak the common ``POST {base_uri}/chat/completions`` shape:
role-tagged messages with optional media parts, ``temperature`` and
``max_tokens`` in the body, and ``choices[0].message.content`` plus a
``usage`` block in the reply. Scripted backends answer from an ordered
table of matchers and are used for hermetic tests and dry runs.
"""

from __future__ import annotations

import base64
import enum
import hashlib
import json
import logging
import os
import random
import threading
import time
from collections import Counter
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass

import httpx

from .errors import (
    AuthenticationError,
    BackendTimeout,
    BackendUnavailable,
    GatewayError,
    MalformedResponse,
    NoScriptEntry,
)
from .media import MediaRef, Modality, is_remote_uri

logger = logging.getLogger(__name__)

ALL_MODALITIES = frozenset(Modality)


class BackendKind(str, enum.Enum):
    REMOTE_CHAT = "remote-chat"
    SCRIPTED = "scripted"


# --- scripted matchers ---------------------------------------------------


@dataclass(frozen=True)
class Contains:
    """Matches when every needle occurs in the flattened request text."""

    needles: tuple[str, ...]

    def __init__(self, *needles: str) -> None:
        if not needles or any(not n for n in needles):
            raise ValueError("Contains needs at least one non-empty substring")
        object.__setattr__(self, "needles", tuple(needles))

    def matches(self, request: ChatRequest) -> bool:
        text = request.flatten()
        return all(n in text for n in self.needles)


@dataclass(frozen=True)
class DigestIs:
    """Matches one exact request digest (see :meth:`ChatRequest.digest`)."""

    digest: str

    def matches(self, request: ChatRequest) -> bool:
        return request.digest() == self.digest


Matcher = Contains | DigestIs


@dataclass(frozen=True)
class ScriptEntry:
    matcher: Matcher
    response: str
    latency_ms: int = 0


# --- backend and request types -------------------------------------------


@dataclass(frozen=True)
class BackendSpec:
    id: str
    kind: BackendKind = BackendKind.REMOTE_CHAT
    model_name: str = ""
    base_uri: str = ""
    auth_env_var: str = ""
    timeout: float = 60.0
    max_retries: int = 2
    temperature: float = 0.0
    max_in_flight: int = 4
    modalities: frozenset[Modality] = ALL_MODALITIES
    # Send http(s) asset URIs as-is instead of inlining base64 bytes.
    accept_uris: bool = True
    script: tuple[ScriptEntry, ...] = ()
    latency_ms: int = 0

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("backend id must be non-empty")
        if self.kind is BackendKind.REMOTE_CHAT:
            if not self.base_uri or not self.model_name:
                raise ValueError(f"remote-chat backend {self.id} requires base_uri and model_name")
        elif not self.script:
            raise ValueError(f"scripted backend {self.id} requires a non-empty script")
        if self.max_retries < 0:
            raise ValueError("max_retries must be non-negative")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must lie in [0, 2]")
        if self.timeout <= 0 or self.max_in_flight <= 0:
            raise ValueError("timeout and max_in_flight must be positive")


def scripted_backend(
    script: Sequence[tuple[Matcher | str, str] | ScriptEntry],
    id: str = "scripted",
    **options,
) -> BackendSpec:
    """Build a scripted backend; a bare string matcher means ``Contains(s)``.

    The first entry whose matcher accepts the request wins.
    """
    entries = []
    for item in script:
        if isinstance(item, ScriptEntry):
            entries.append(item)
            continue
        matcher, response = item
        if isinstance(matcher, str):
            matcher = Contains(matcher)
        entries.append(ScriptEntry(matcher, response))
    if not entries:
        raise ValueError("empty script")
    return BackendSpec(id=id, kind=BackendKind.SCRIPTED, script=tuple(entries), **options)


@dataclass(frozen=True)
class Message:
    role: str
    content: str
    attachments: tuple[MediaRef, ...] = ()

    def __post_init__(self) -> None:
        if self.role not in ("system", "user"):
            raise ValueError(f"unsupported role {self.role!r}")
        if self.attachments and self.role != "user":
            raise ValueError("attachments are only allowed on user messages")


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[Message, ...]
    temperature: float | None = None
    max_tokens: int = 1024

    def __post_init__(self) -> None:
        if not any(m.role == "user" for m in self.messages):
            raise ValueError("a chat request needs at least one user message")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")

    @classmethod
    def user(cls, text: str, attachments: Iterable[MediaRef] = (), system: str | None = None,
             **kwargs) -> ChatRequest:
        messages = []
        if system:
            messages.append(Message("system", system))
        messages.append(Message("user", text, tuple(attachments)))
        return cls(tuple(messages), **kwargs)

    @property
    def modalities(self) -> set[Modality]:
        return {a.modality for m in self.messages for a in m.attachments}

    def flatten(self) -> str:
        """Role-tagged text of all messages, attachments as digest lines."""
        parts = []
        for m in self.messages:
            parts.append(f"[{m.role}]\n{m.content}")
            parts.extend(a.describe() for a in m.attachments)
        return "\n".join(parts)

    def digest(self) -> str:
        """SHA-256 over message roles, contents and attachment digests."""
        payload = [
            [m.role, m.content, [[a.modality.value, a.content_digest] for a in m.attachments]]
            for m in self.messages
        ]
        blob = json.dumps(payload, ensure_ascii=False, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ChatResponse:
    text: str
    prompt_tokens: int
    completion_tokens: int
    latency_ms: int
    backend_id: str
    attempts: int = 1


@dataclass(frozen=True)
class CallRecord:
    backend_id: str
    request_digest: str
    ok: bool
    attempts: int


class _TransientError(Exception):
    def __init__(self, kind: type[GatewayError], message: str) -> None:
        self.kind = kind
        super().__init__(message)


class Gateway:
    """Routes chat requests to registered backends.

    Each backend gets its own in-flight limiter (``BackendSpec.max_in_flight``).
    Every call is appended to :attr:`calls`, and the high-water mark of
    concurrent calls is tracked per backend, so tests can assert call counts
    and fan-out bounds directly.

    ``sleep``, ``rng`` and ``environ`` are injectable; ``backoff_base`` is the
    first retry's upper delay bound in seconds (doubling each retry, full
    jitter).
    """

    backoff_factor = 2.0

    def __init__(
        self,
        backends: Iterable[BackendSpec] = (),
        *,
        http_client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
        rng: random.Random | None = None,
        environ: Mapping[str, str] | None = None,
        backoff_base: float = 1.0,
    ) -> None:
        self._backends: dict[str, BackendSpec] = {}
        self._limiters: dict[str, threading.BoundedSemaphore] = {}
        self._lock = threading.Lock()
        self._http = http_client
        self._sleep = sleep
        self._rng = rng or random.Random()
        self._environ = os.environ if environ is None else environ
        self.backoff_base = backoff_base
        self.calls: list[CallRecord] = []
        self.retries: Counter[str] = Counter()
        self._in_flight: Counter[str] = Counter()
        self.max_in_flight_seen: Counter[str] = Counter()
        for spec in backends:
            self.register(spec)

    def register(self, spec: BackendSpec) -> None:
        with self._lock:
            self._backends[spec.id] = spec
            self._limiters[spec.id] = threading.BoundedSemaphore(spec.max_in_flight)

    def backend(self, backend_id: str) -> BackendSpec:
        try:
            return self._backends[backend_id]
        except KeyError:
            raise GatewayError(f"unknown backend {backend_id}", backend_id) from None

    @property
    def backend_ids(self) -> list[str]:
        return list(self._backends)

    def calls_to(self, backend_id: str) -> list[CallRecord]:
        return [c for c in self.calls if c.backend_id == backend_id]

    def close(self) -> None:
        if self._http is not None:
            self._http.close()
            self._http = None

    def complete(self, backend: BackendSpec | str, request: ChatRequest) -> ChatResponse:
        spec = self.backend(backend) if isinstance(backend, str) else backend
        if spec.id not in self._backends:
            self.register(spec)
        limiter = self._limiters[spec.id]
        with limiter:
            with self._lock:
                self._in_flight[spec.id] += 1
                self.max_in_flight_seen[spec.id] = max(
                    self.max_in_flight_seen[spec.id], self._in_flight[spec.id]
                )
            attempts = 1
            ok = False
            try:
                if spec.kind is BackendKind.SCRIPTED:
                    response = self._complete_scripted(spec, request)
                else:
                    response = self._complete_remote(spec, request)
                attempts = response.attempts
                ok = True
                return response
            except GatewayError as exc:
                attempts = getattr(exc, "attempts", 1)
                raise
            finally:
                with self._lock:
                    self._in_flight[spec.id] -= 1
                    self.calls.append(CallRecord(spec.id, request.digest(), ok, attempts))

    # scripted --------------------------------------------------------------

    def _complete_scripted(self, spec: BackendSpec, request: ChatRequest) -> ChatResponse:
        for entry in spec.script:
            if entry.matcher.matches(request):
                latency = entry.latency_ms or spec.latency_ms
                if latency:
                    self._sleep(latency / 1000.0)
                # Injected latency is reported as-is so scripted runs stay
                # byte-reproducible.
                return ChatResponse(
                    text=entry.response,
                    prompt_tokens=len(request.flatten().split()),
                    completion_tokens=len(entry.response.split()),
                    latency_ms=latency,
                    backend_id=spec.id,
                )
        raise NoScriptEntry(request.digest(), spec.id)

    # remote ----------------------------------------------------------------

    def _client(self) -> httpx.Client:
        if self._http is None:
            with self._lock:
                if self._http is None:
                    self._http = httpx.Client()
        return self._http

    def _credential(self, spec: BackendSpec) -> str | None:
        if not spec.auth_env_var:
            return None
        value = self._environ.get(spec.auth_env_var, "")
        if not value:
            raise AuthenticationError(
                f"credential variable {spec.auth_env_var} is not set for backend {spec.id}",
                spec.id,
            )
        return value

    def build_payload(self, spec: BackendSpec, request: ChatRequest) -> dict:
        messages = []
        for m in request.messages:
            if not m.attachments:
                messages.append({"role": m.role, "content": m.content})
                continue
            parts: list[dict] = [{"type": "text", "text": m.content}]
            parts.extend(encode_media_part(a, spec.accept_uris) for a in m.attachments)
            messages.append({"role": m.role, "content": parts})
        temperature = spec.temperature if request.temperature is None else request.temperature
        return {
            "model": spec.model_name,
            "messages": messages,
            "temperature": temperature,
            "max_tokens": request.max_tokens,
        }

    def _complete_remote(self, spec: BackendSpec, request: ChatRequest) -> ChatResponse:
        key = self._credential(spec)
        headers = {"Content-Type": "application/json"}
        if key:
            headers["Authorization"] = f"Bearer {key}"
        url = spec.base_uri.rstrip("/") + "/chat/completions"
        payload = self.build_payload(spec, request)

        last: _TransientError | None = None
        for attempt in range(spec.max_retries + 1):
            if attempt:
                with self._lock:
                    self.retries[spec.id] += 1
                cap = self.backoff_base * self.backoff_factor ** (attempt - 1)
                self._sleep(self._rng.uniform(0.0, cap))
            started = time.perf_counter()
            try:
                resp = self._post(spec, url, payload, headers)
            except _TransientError as exc:
                last = exc
                logger.warning("backend %s attempt %d failed: %s", spec.id, attempt + 1, exc)
                continue
            except GatewayError as exc:
                exc.attempts = attempt + 1
                raise
            latency_ms = int((time.perf_counter() - started) * 1000)
            return _parse_completion(resp, spec.id, latency_ms, attempt + 1)

        assert last is not None
        err = last.kind(
            f"backend {spec.id} failed after {spec.max_retries + 1} attempts: {last}", spec.id
        )
        err.attempts = spec.max_retries + 1
        raise err

    def _post(self, spec: BackendSpec, url: str, payload: dict, headers: dict) -> httpx.Response:
        try:
            resp = self._client().post(url, json=payload, headers=headers, timeout=spec.timeout)
        except httpx.TimeoutException as exc:
            raise _TransientError(BackendTimeout, f"timeout: {exc}") from exc
        except httpx.TransportError as exc:
            raise _TransientError(BackendUnavailable, f"transport error: {exc}") from exc
        status = resp.status_code
        if status in (401, 403):
            raise AuthenticationError(f"backend {spec.id} rejected credentials ({status})", spec.id)
        if status == 408:
            raise _TransientError(BackendTimeout, "HTTP 408")
        if status == 429 or status >= 500:
            raise _TransientError(BackendUnavailable, f"HTTP {status}")
        if status >= 400:
            raise GatewayError(f"backend {spec.id} returned HTTP {status}: {resp.text[:200]}", spec.id)
        return resp


def encode_media_part(asset: MediaRef, accept_uris: bool = True) -> dict:
    """One message content part for ``asset``.

    Images and audio use the widely supported ``image_url`` and
    ``input_audio`` part types; other modalities go out as ``file`` parts.
    """
    if accept_uris and is_remote_uri(asset.uri):
        url = asset.uri
    else:
        data = base64.b64encode(asset.read_bytes()).decode("ascii")
        url = f"data:{asset.mime_type()};base64,{data}"
    if asset.modality is Modality.IMAGE:
        return {"type": "image_url", "image_url": {"url": url}}
    if asset.modality is Modality.AUDIO and url.startswith("data:"):
        fmt = asset.mime_type().split("/")[-1].replace("x-", "").replace("mpeg", "mp3")
        return {"type": "input_audio", "input_audio": {"data": url.split(",", 1)[1], "format": fmt}}
    return {"type": "file", "file": {"filename": asset.filename, "file_data": url}}


def _parse_completion(resp: httpx.Response, backend_id: str, latency_ms: int, attempts: int) -> ChatResponse:
    try:
        body = resp.json()
        message = body["choices"][0]["message"]
        content = message["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise MalformedResponse(f"backend {backend_id} sent a malformed completion: {exc!r}", backend_id) from exc
    if content is None:
        logger.warning("backend %s returned null content", backend_id)
        content = ""
    if isinstance(content, list):
        content = "".join(p.get("text", "") for p in content if isinstance(p, dict))
    if not isinstance(content, str):
        raise MalformedResponse(f"backend {backend_id} sent non-text content", backend_id)
    usage = body.get("usage") or {}
    return ChatResponse(
        text=content,
        prompt_tokens=int(usage.get("prompt_tokens", 0) or 0),
        completion_tokens=int(usage.get("completion_tokens", 0) or 0),
        latency_ms=latency_ms,
        backend_id=backend_id,
        attempts=attempts,
    )
