"""Modalities and content-addressed references to media assets."""

from __future__ import annotations

import enum
import hashlib
import mimetypes
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from urllib.parse import urlparse

import httpx


class Modality(str, enum.Enum):
    IMAGE = "Image"
    VIDEO = "Video"
    AUDIO = "Audio"
    POINT_CLOUD_3D = "PointCloud3D"
    MEDICAL_VOLUME = "MedicalVolume"
    DOCUMENT = "Document"
    TEXT = "Text"

    @classmethod
    def parse(cls, value: str | Modality) -> Modality:
        """Accept canonical names case-insensitively, ignoring ``_``/``-``/spaces."""
        if isinstance(value, Modality):
            return value
        key = re.sub(r"[\s_\-]", "", str(value)).lower()
        for member in cls:
            if member.value.lower() == key:
                return member
        raise ValueError(f"unknown modality {value!r}")

    def __str__(self) -> str:
        return self.value


# Noun phrase substituted for {input-context} in expert templates.
ASSET_PHRASES: dict[Modality, str] = {
    Modality.IMAGE: "the attached image",
    Modality.VIDEO: "the attached video",
    Modality.AUDIO: "the attached audio clip",
    Modality.POINT_CLOUD_3D: "the attached 3D point cloud scene",
    Modality.MEDICAL_VOLUME: "the attached CT volume",
    Modality.DOCUMENT: "the attached document",
    Modality.TEXT: "the attached text",
}


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def is_remote_uri(uri: str) -> bool:
    return urlparse(uri).scheme in ("http", "https")


@dataclass(frozen=True)
class MediaRef:
    """A modality-tagged asset; identity is the SHA-256 of its bytes.

    ``data`` holds in-memory bytes for assets that have no backing file.
    The digest is computed lazily on first access and then memoized.
    """

    modality: Modality
    uri: str
    data: bytes | None = field(default=None, compare=False, repr=False)

    @classmethod
    def from_bytes(cls, modality: Modality | str, data: bytes, name: str = "") -> MediaRef:
        return cls(Modality.parse(modality), f"mem:{name or sha256_hex(data)[:12]}", data)

    def local_path(self) -> Path | None:
        if self.data is not None or is_remote_uri(self.uri):
            return None
        parsed = urlparse(self.uri)
        if parsed.scheme == "file":
            return Path(parsed.path)
        return Path(self.uri)

    def read_bytes(self) -> bytes:
        if self.data is not None:
            return self.data
        if is_remote_uri(self.uri):
            resp = httpx.get(self.uri, follow_redirects=True, timeout=60)
            resp.raise_for_status()
            return resp.content
        path = self.local_path()
        assert path is not None
        return path.read_bytes()

    @cached_property
    def content_digest(self) -> str:
        return sha256_hex(self.read_bytes())

    @property
    def filename(self) -> str:
        return Path(urlparse(self.uri).path or self.uri).name or "asset"

    def mime_type(self) -> str:
        guessed, _ = mimetypes.guess_type(self.filename)
        if guessed:
            return guessed
        return {
            Modality.IMAGE: "image/png",
            Modality.VIDEO: "video/mp4",
            Modality.AUDIO: "audio/wav",
            Modality.DOCUMENT: "application/pdf",
            Modality.TEXT: "text/plain",
        }.get(self.modality, "application/octet-stream")

    def describe(self) -> str:
        """Stable one-line descriptor used when flattening requests to text."""
        return f"<attachment modality={self.modality.value} sha256={self.content_digest}>"
