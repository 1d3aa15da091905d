"""Exception hierarchy shared by every stage of the pipeline."""

from __future__ import annotations


class SkillmuxError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(SkillmuxError):
    """Invalid configuration document; ``path`` names the offending key."""

    def __init__(self, message: str, path: str = "") -> None:
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class TemplateError(SkillmuxError):
    """A template's placeholders do not match what the renderer supplies."""


class UnknownSkillError(SkillmuxError, KeyError):
    def __init__(self, skill: object) -> None:
        self.skill = str(skill)
        super().__init__(f"unknown skill {self.skill}")

    def __str__(self) -> str:
        return self.args[0]


class InvariantBreach(SkillmuxError):
    """An upstream guarantee did not hold (e.g. S ⊆ M was violated)."""


class GatewayError(SkillmuxError):
    """Base class for backend call failures."""

    def __init__(self, message: str, backend_id: str = "") -> None:
        self.backend_id = backend_id
        super().__init__(message)


class AuthenticationError(GatewayError):
    pass


class BackendTimeout(GatewayError):
    pass


class BackendUnavailable(GatewayError):
    pass


class MalformedResponse(GatewayError):
    pass


class NoScriptEntry(GatewayError):
    def __init__(self, request_digest: str, backend_id: str = "") -> None:
        self.request_digest = request_digest
        super().__init__(f"no script entry for request {request_digest}", backend_id)


class UnsupportedModality(GatewayError):
    pass


class RoutingError(SkillmuxError):
    """The router cannot produce a non-empty, modality-valid selection."""


class StageError(SkillmuxError):
    """Wraps a failure with the pipeline stage that produced it.

    Stage tags are ``router``, ``expert:<skill_id>``, ``aggregator`` and
    ``direct``.
    """

    def __init__(self, stage: str, cause: BaseException) -> None:
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {cause}")


class DatasetError(SkillmuxError):
    def __init__(self, message: str, line: int | None = None) -> None:
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)
