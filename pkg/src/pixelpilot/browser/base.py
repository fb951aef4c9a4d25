"""Types shared by the real-browser and simulated environments.

Only pixels and the current URL cross this boundary: no DOM, no
accessibility tree, no HTML.
"""

from __future__ import annotations

import hashlib
import io
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum

from PIL import Image

from ..grammar import PIXEL, ActionCommand, SpaceMismatch, action_points

DEFAULT_VIEWPORT = (1280, 800)
DEFAULT_SETTLE_TIMEOUT = 10.0
DEFAULT_WAIT_SECONDS = 5.0
DEFAULT_SCROLL_FRACTION = 0.75


class BrowserError(RuntimeError):
    pass


class SessionClosed(BrowserError):
    pass


class LaunchFailure(BrowserError):
    pass


class PointOutOfViewport(BrowserError):
    pass


class BadPageGraph(ValueError):
    pass


def average_hash(png: bytes, size: int = 8) -> str:
    """64-bit mean-threshold perceptual hash of an image, as hex."""
    with Image.open(io.BytesIO(png)) as img:
        small = img.convert("L").resize((size, size), Image.Resampling.BILINEAR)
        pixels = list(small.tobytes())
    mean = sum(pixels) / len(pixels)
    bits = 0
    for p in pixels:
        bits = (bits << 1) | (p > mean)
    return f"{bits:0{size * size // 4}x}"


@dataclass(frozen=True)
class Screenshot:
    encoded_bytes: bytes = field(repr=False)
    width: int
    height: int
    url: str
    captured_at: float = field(default_factory=time.time, compare=False)

    @property
    def ref(self) -> str:
        """Content hash used as the on-disk file name."""
        return hashlib.sha256(self.encoded_bytes).hexdigest()[:16]

    @property
    def fingerprint(self) -> str:
        """Cheap page-state identity: URL plus perceptual-hash bucket."""
        key = f"{self.url}|{average_hash(self.encoded_bytes)}"
        return hashlib.sha1(key.encode("utf-8")).hexdigest()[:16]


class ExecStatus(str, Enum):
    OK = "ok"
    NO_EFFECT = "no_effect"
    ERROR = "error"


@dataclass(frozen=True)
class ExecutionOutcome:
    status: ExecStatus
    detail: str = ""

    @classmethod
    def ok(cls, detail: str = "") -> "ExecutionOutcome":
        return cls(ExecStatus.OK, detail)

    @classmethod
    def no_effect(cls, detail: str = "") -> "ExecutionOutcome":
        return cls(ExecStatus.NO_EFFECT, detail)

    @classmethod
    def error(cls, detail: str) -> "ExecutionOutcome":
        return cls(ExecStatus.ERROR, detail)

    def __str__(self) -> str:
        return f"{self.status.value}: {self.detail}" if self.detail else self.status.value


class Environment(ABC):
    """One browsing session with a viewport fixed for its lifetime."""

    viewport: tuple[int, int] = DEFAULT_VIEWPORT

    @property
    @abstractmethod
    def current_url(self) -> str: ...

    @abstractmethod
    def screenshot(self) -> Screenshot: ...

    @abstractmethod
    def execute(self, action: ActionCommand) -> ExecutionOutcome: ...

    @abstractmethod
    def navigate(self, url: str) -> ExecutionOutcome: ...

    @abstractmethod
    def back(self) -> ExecutionOutcome: ...

    @abstractmethod
    def close(self) -> None: ...

    def check_points(self, action: ActionCommand) -> None:
        w, h = self.viewport
        for p in action_points(action):
            if p.space != PIXEL:
                raise SpaceMismatch("only pixel-space points may reach the browser")
            if p.x >= w or p.y >= h:
                raise PointOutOfViewport(f"({p.x}, {p.y}) lies outside the {w}x{h} viewport")

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
