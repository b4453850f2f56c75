"""Structured service names and their fixed-size NAME_ID digest."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from urllib.parse import urlsplit

ANYCAST = "anycast"
MULTICAST = "multicast"
NAME_ID_BYTES = 32


@dataclass(frozen=True)
class StructuredName:
    """Tree-structured name rooted at the service name, e.g. ``foo.com/video/seg1``."""

    components: tuple[str, ...]
    service_class: str = ANYCAST

    def __post_init__(self):
        if not self.components:
            raise ValueError("a name needs at least one component")
        for c in self.components:
            if not c or "/" in c:
                raise ValueError(f"bad name component {c!r}")
        if self.service_class not in (ANYCAST, MULTICAST):
            raise ValueError(f"unknown service class {self.service_class!r}")

    @classmethod
    def parse(cls, text: str, service_class: str = ANYCAST) -> StructuredName:
        return cls(tuple(text.strip("/").split("/")), service_class)

    @classmethod
    def from_url(cls, url: str, service_class: str = ANYCAST) -> StructuredName:
        parts = urlsplit(url if "//" in url else "//" + url)
        comps = [parts.hostname or ""] + [c for c in parts.path.split("/") if c]
        return cls(tuple(comps), service_class)

    @property
    def root(self) -> str:
        return self.components[0]

    @property
    def text(self) -> str:
        return "/".join(self.components)

    def __str__(self) -> str:
        return self.text

    @property
    def name_id(self) -> bytes:
        return name_id(self.text)


def as_name(name, service_class: str = ANYCAST) -> StructuredName:
    if isinstance(name, StructuredName):
        return name
    return StructuredName.parse(str(name), service_class)


def name_id(text: str) -> bytes:
    return hashlib.sha256(text.encode("utf-8")).digest()
